//! Wrinkle topology: ridge candidates from thresholded curvature, wrinkle
//! contours from second-derivative zero crossings, one-pixel thinning, and
//! the ridge-to-contour distances behind the TSD descriptor.

use crate::bspline::SmoothedSurface;
use crate::error::{Error, Result};
use crate::geometry::{principal_frame, CurvatureMap, ShapeIndexMap};
use crate::scalar::Real;

/// Pixel coordinate, ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[Pixel]) -> Self {
        let mut m = Self::empty(width, height);
        for p in pixels {
            m.set(p.col, p.row, true);
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    fn get_i(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> Vec<Pixel> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| Pixel::new(i / self.width, i % self.width))
            .collect()
    }

    /// Number of 8-connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for (dx, dy) in NEIGHBOURS {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.get_i(nx, ny) {
                        let j = ny as usize * self.width + nx as usize;
                        if !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        count
    }

    pub fn has_solid_2x2(&self) -> bool {
        (0..self.height.saturating_sub(1)).any(|y| {
            (0..self.width.saturating_sub(1)).any(|x| {
                self.get(x, y) && self.get(x + 1, y) && self.get(x, y + 1) && self.get(x + 1, y + 1)
            })
        })
    }
}

/// 8-neighbourhood, counter-clockwise from east (image rows grow downward,
/// so "north" is `dy = -1`).
const NEIGHBOURS: [(isize, isize); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

// ---------------------------------------------------------------------------
// Detection

/// Ridge candidates: pixels whose dominant principal curvature magnitude
/// exceeds any of `thresholds` and whose shape type is crest-like
/// (saddle ridge, ridge, dome, cap). Output is not thinned.
pub fn detect_ridges<T: Real>(
    cm: &CurvatureMap<T>,
    sim: &ShapeIndexMap<T>,
    thresholds: &[T],
) -> Result<BinaryMap> {
    if thresholds.is_empty() {
        return Err(Error::Config("ridge detection needs at least one threshold".into()));
    }
    if (cm.width, cm.height) != (sim.width, sim.height) {
        return Err(Error::Dimension("curvature and shape-index maps differ in size".into()));
    }
    let lowest = thresholds.iter().copied().fold(T::infinity(), T::min);
    let mut out = BinaryMap::empty(cm.width, cm.height);
    for y in 0..cm.height {
        for x in 0..cm.width {
            let Some(k) = cm.dominant(x, y) else { continue };
            if k.abs() > lowest && sim.class_at(x, y).is_ridge_like() {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourConfig {
    /// mm per pixel.
    pub pitch: f64,
    /// Minimum surface slope (mm/px) for a zero crossing to count.
    pub min_slope: f64,
    /// Minimum |second derivative| (mm/px^2) on the stronger side of a
    /// crossing; suppresses numerical sign flips on flat patches.
    pub min_second_derivative: f64,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self {
            pitch: 1.0,
            min_slope: 0.1,
            min_second_derivative: 1e-4,
        }
    }
}

/// Wrinkle contour candidates: pixels where the second directional
/// derivative along the dominant principal direction changes sign toward a
/// neighbour, keeping the side closer to the crossing. Output is not thinned.
pub fn detect_contours<T: Real>(surface: &SmoothedSurface<T>, cfg: &ContourConfig) -> BinaryMap {
    let (w, h) = (surface.width(), surface.height());
    let pitch = T::of(cfg.pitch);
    let min_slope2 = T::of(cfg.min_slope * cfg.min_slope);
    let min_d2 = T::of(cfg.min_second_derivative);
    let mut out = BinaryMap::empty(w, h);
    let d2 = |x: usize, y: usize, v: (T, T)| {
        let d = surface.derivs(x, y);
        v.0 * v.0 * d.zxx + T::of(2.0) * v.0 * v.1 * d.zxy + v.1 * v.1 * d.zyy
    };
    for y in 0..h {
        for x in 0..w {
            if !surface.is_valid(x, y) {
                continue;
            }
            let d = surface.derivs(x, y);
            if d.zx * d.zx + d.zy * d.zy < min_slope2 {
                continue;
            }
            let Some(frame) = principal_frame(d, pitch) else { continue };
            let v = frame.dominant_dir;
            let step = (
                v.0.as_f64().round() as isize,
                v.1.as_f64().round() as isize,
            );
            let here = d2(x, y, v);
            for sign in [1isize, -1] {
                let (nx, ny) = (x as isize + sign * step.0, y as isize + sign * step.1);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !surface.is_valid(nx, ny) {
                    continue;
                }
                let there = d2(nx, ny, v);
                if here * there < T::zero()
                    && here.abs() <= there.abs()
                    && here.abs().max(there.abs()) >= min_d2
                {
                    out.set(x, y, true);
                    break;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Thinning

/// Neighbour occupancy in [`NEIGHBOURS`] order.
fn ring(map: &BinaryMap, x: usize, y: usize) -> [bool; 8] {
    let mut r = [false; 8];
    for (k, (dx, dy)) in NEIGHBOURS.iter().enumerate() {
        r[k] = map.get_i(x as isize + dx, y as isize + dy);
    }
    r
}

/// Yokoi connectivity number for 8-connected foreground.
fn yokoi8(r: &[bool; 8]) -> usize {
    let bar = |k: usize| !r[k % 8] as usize;
    [0, 2, 4, 6]
        .iter()
        .map(|&k| bar(k) - bar(k) * bar(k + 1) * bar(k + 2))
        .sum()
}

/// Deletable without changing topology or shortening a branch end.
fn is_removable(r: &[bool; 8]) -> bool {
    let b = r.iter().filter(|&&v| v).count();
    (2..=6).contains(&b) && yokoi8(r) == 1
}

/// Zhang-Suen subiteration test. In Zhang-Suen labels
/// P2=N, P4=E, P6=S, P8=W.
fn zhang_suen_candidate(r: &[bool; 8], first: bool) -> bool {
    let (e, n, w, s) = (r[0], r[2], r[4], r[6]);
    let b = r.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    // 0->1 transitions around P2, P3, ..., P9 (clockwise from north)
    let seq = [r[2], r[1], r[0], r[7], r[6], r[5], r[4], r[3]];
    let a = (0..8).filter(|&i| !seq[i] && seq[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    if first {
        !(n && e && s) && !(e && s && w)
    } else {
        !(n && e && w) && !(n && s && w)
    }
}

/// Zhang-Suen thinning with sequential re-verification of every deletion
/// (simple point, not an end point), followed by removal of residual 2x2
/// blocks where that is topology-safe. Preserves 8-connected components and
/// is idempotent.
pub fn thin(map: &BinaryMap) -> BinaryMap {
    let mut cur = map.clone();
    let (w, h) = (cur.width, cur.height);
    loop {
        let mut changed = true;
        while changed {
            changed = false;
            for first in [true, false] {
                let candidates: Vec<(usize, usize)> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .filter(|&(x, y)| cur.get(x, y) && zhang_suen_candidate(&ring(&cur, x, y), first))
                    .collect();
                for (x, y) in candidates {
                    if is_removable(&ring(&cur, x, y)) {
                        cur.set(x, y, false);
                        changed = true;
                    }
                }
            }
        }
        let mut cleaned = false;
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let block = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
                if !block.iter().all(|&(bx, by)| cur.get(bx, by)) {
                    continue;
                }
                if let Some(&(bx, by)) = block
                    .iter()
                    .find(|&&(bx, by)| is_removable(&ring(&cur, bx, by)))
                {
                    cur.set(bx, by, false);
                    cleaned = true;
                }
            }
        }
        if !cleaned {
            return cur;
        }
    }
}

// ---------------------------------------------------------------------------
// Topology and TSD

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMap<T> {
    pub width: usize,
    pub height: usize,
    pub ridges: Vec<Pixel>,
    pub contours: Vec<Pixel>,
    /// Smoothed depth, row-major (mm).
    pub depth: Vec<T>,
}

impl<T: Real> TopologyMap<T> {
    pub fn new(
        width: usize,
        height: usize,
        mut ridges: Vec<Pixel>,
        mut contours: Vec<Pixel>,
        depth: Vec<T>,
    ) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Dimension(format!(
                "depth grid has {} entries for {}x{}",
                depth.len(),
                width,
                height
            )));
        }
        if let Some(p) = ridges
            .iter()
            .chain(&contours)
            .find(|p| p.row >= height || p.col >= width)
        {
            return Err(Error::Domain(format!("pixel {p:?} outside {width}x{height}")));
        }
        ridges.sort_unstable();
        ridges.dedup();
        contours.sort_unstable();
        contours.dedup();
        Ok(Self {
            width,
            height,
            ridges,
            contours,
            depth,
        })
    }

    #[inline]
    pub fn depth_at(&self, p: Pixel) -> T {
        self.depth[p.row * self.width + p.col]
    }

    /// Debug raster: ridges 255, contours 128, background 0.
    pub fn overlay_pgm_bytes(&self) -> Vec<u8> {
        let mut px = vec![0u8; self.width * self.height];
        for p in &self.contours {
            px[p.row * self.width + p.col] = 128;
        }
        for p in &self.ridges {
            px[p.row * self.width + p.col] = 255;
        }
        crate::depthio::encode_pgm8(self.width, self.height, &px)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TsdSamples<T> {
    /// Planar ridge-to-contour distance, pixels.
    pub widths: Vec<T>,
    /// Ridge depth minus nearest-contour depth, mm.
    pub heights: Vec<T>,
}

impl<T> TsdSamples<T> {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }
}

const EDT_INF: f64 = 1e20;

/// 1-D squared distance lower envelope (Felzenszwalb-Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `features` (`EDT_INF` when there is none).
pub fn squared_distance_transform(features: &BinaryMap) -> Vec<f64> {
    let (w, h) = (features.width, features.height);
    let mut grid: Vec<f64> = features
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { EDT_INF })
        .collect();
    let n = w.max(h);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y].min(EDT_INF);
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            grid[y * w + x] = out[x].min(EDT_INF);
        }
    }
    grid
}

/// Lexicographically smallest set pixel at exactly squared distance `d2`
/// from `p`.
fn nearest_at(features: &BinaryMap, p: Pixel, d2: u64) -> Option<Pixel> {
    let r = (d2 as f64).sqrt().floor() as i64;
    let (pr, pc) = (p.row as i64, p.col as i64);
    for dy in -r..=r {
        let rest = d2 as i64 - dy * dy;
        if rest < 0 {
            continue;
        }
        let dx = (rest as f64).sqrt().round() as i64;
        if dx * dx != rest {
            continue;
        }
        let row = pr + dy;
        if row < 0 || row >= features.height as i64 {
            continue;
        }
        for col in [pc - dx, pc + dx] {
            if col >= 0 && col < features.width as i64 && features.get(col as usize, row as usize) {
                return Some(Pixel::new(row as usize, col as usize));
            }
        }
    }
    None
}

/// For every ridge pixel, the distance to its nearest contour pixel and the
/// depth difference to it. Ties go to the smallest `(row, col)` contour
/// pixel. An empty contour set yields empty samples.
pub fn tsd_distances<T: Real>(top: &TopologyMap<T>) -> TsdSamples<T> {
    if top.contours.is_empty() || top.ridges.is_empty() {
        if top.contours.is_empty() && !top.ridges.is_empty() {
            log::debug!("no wrinkle contours; TSD samples empty");
        }
        return TsdSamples::default();
    }
    let features = BinaryMap::from_pixels(top.width, top.height, &top.contours);
    let dt = squared_distance_transform(&features);
    let mut samples = TsdSamples {
        widths: Vec::with_capacity(top.ridges.len()),
        heights: Vec::with_capacity(top.ridges.len()),
    };
    for &r in &top.ridges {
        let d2 = dt[r.row * top.width + r.col] as u64;
        let c = nearest_at(&features, r, d2).expect("distance transform value is attained");
        samples.widths.push(T::of((d2 as f64).sqrt()));
        samples.heights.push(top.depth_at(r) - top.depth_at(c));
    }
    samples
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    /// Curvature thresholds (1/mm) for ridge candidates.
    pub ridge_thresholds: Vec<f64>,
    pub contour: ContourConfig,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            ridge_thresholds: vec![0.02, 0.05, 0.1],
            contour: ContourConfig::default(),
        }
    }
}

/// Ridges and contours, thinned to one pixel, restricted to the mask.
pub fn extract_topology<T: Real>(
    surface: &SmoothedSurface<T>,
    cm: &CurvatureMap<T>,
    sim: &ShapeIndexMap<T>,
    cfg: &TopologyConfig,
) -> Result<TopologyMap<T>> {
    let thresholds: Vec<T> = cfg.ridge_thresholds.iter().map(|&t| T::of(t)).collect();
    let ridges = thin(&detect_ridges(cm, sim, &thresholds)?);
    let contours = thin(&detect_contours(surface, &cfg.contour));
    let depth = surface
        .all_derivs()
        .iter()
        .zip(surface.mask())
        .map(|(d, &m)| if m { d.z } else { T::zero() })
        .collect();
    let keep = |b: &BinaryMap| -> Vec<Pixel> {
        b.pixels()
            .into_iter()
            .filter(|p| surface.is_valid(p.col, p.row))
            .collect()
    };
    TopologyMap::new(
        surface.width(),
        surface.height(),
        keep(&ridges),
        keep(&contours),
        depth,
    )
}
