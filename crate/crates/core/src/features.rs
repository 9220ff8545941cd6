//! Descriptor families (shape-index histogram, multi-scale LBP, TSD
//! bi-histogram, local B-spline patches) and their fusion into one vector.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::bspline::fit_patch_5x5;
use crate::depthio::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{ShapeClass, ShapeIndexMap};
use crate::scalar::Real;
use crate::topology::{Pixel, TopologyMap, TsdSamples};

pub const SI_DIM: usize = 9;
pub const LBP_LEVELS: usize = 3;
pub const LBP_PATTERNS: usize = 58;
pub const LBP_DIM: usize = LBP_LEVELS * LBP_PATTERNS;
pub const TSD_BINS: usize = 10;
pub const TSD_DIM: usize = TSD_BINS * TSD_BINS;
pub const TSD_RANGE: (f64, f64) = (5.0, 50.0);
pub const BSP_DIM: usize = 25;
pub const GLOBAL_DIM: usize = LBP_DIM + SI_DIM + TSD_DIM;

/// Scales `v` to unit L2 norm; an all-zero vector is left as is.
pub fn l2_normalize<T: Real>(v: &mut [T]) -> bool {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
        true
    } else {
        false
    }
}

// ---------------------------------------------------------------------------
// Shape index

pub fn si_histogram<T: Real>(sim: &ShapeIndexMap<T>) -> Vec<T> {
    let mut h = vec![T::zero(); SI_DIM];
    for (i, &c) in sim.class.iter().enumerate() {
        if sim.valid[i] && c != ShapeClass::Undefined {
            h[c.index()] += T::one();
        }
    }
    if !l2_normalize(&mut h) {
        log::debug!("no defined shape-index pixels; SI block is zero");
    }
    h
}

// ---------------------------------------------------------------------------
// LBP

/// The 58 8-bit codes with at most two circular 0/1 transitions, ascending.
pub fn uniform_patterns() -> [u8; LBP_PATTERNS] {
    let mut out = [0u8; LBP_PATTERNS];
    let mut n = 0;
    for c in 0..=255u8 {
        if (c ^ c.rotate_left(1)).count_ones() <= 2 {
            out[n] = c;
            n += 1;
        }
    }
    debug_assert_eq!(n, LBP_PATTERNS);
    out
}

fn uniform_lookup() -> [Option<usize>; 256] {
    let mut lut = [None; 256];
    for (i, &c) in uniform_patterns().iter().enumerate() {
        lut[c as usize] = Some(i);
    }
    lut
}

/// Circular neighbour order for code bits (bit k = neighbour k).
const LBP_RING: [(isize, isize); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// LBP code at `(x, y)` (`neighbour >= centre` sets the bit), or `None`
/// unless the pixel and all eight neighbours are valid.
pub fn lbp_code<T: Real>(dm: &DepthMap<T>, x: usize, y: usize) -> Option<u8> {
    if !dm.is_valid(x, y) {
        return None;
    }
    let c = dm.get(x, y);
    let mut code = 0u8;
    for (k, (dx, dy)) in LBP_RING.iter().enumerate() {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 || nx >= dm.width() as isize || ny >= dm.height() as isize {
            return None;
        }
        let (nx, ny) = (nx as usize, ny as usize);
        if !dm.is_valid(nx, ny) {
            return None;
        }
        if dm.get(nx, ny) >= c {
            code |= 1 << k;
        }
    }
    Some(code)
}

const PYRAMID_SIGMA: f64 = 0.375;
const PYRAMID_RADIUS: isize = 2;

/// Mask-aware Gaussian blur followed by 2x decimation.
pub fn pyramid_down<T: Real>(dm: &DepthMap<T>) -> Option<DepthMap<T>> {
    let (w, h) = (dm.width(), dm.height());
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    if nw == 0 || nh == 0 {
        return None;
    }
    let kernel: Vec<f64> = (-PYRAMID_RADIUS..=PYRAMID_RADIUS)
        .map(|d| (-(d * d) as f64 / (2.0 * PYRAMID_SIGMA * PYRAMID_SIGMA)).exp())
        .collect();
    let mut depth = vec![T::zero(); nw * nh];
    let mut mask = vec![false; nw * nh];
    for ny in 0..nh {
        for nx in 0..nw {
            let (x, y) = (2 * nx, 2 * ny);
            if !dm.is_valid(x, y) {
                continue;
            }
            let (mut acc, mut wsum) = (T::zero(), T::zero());
            for (j, ky) in kernel.iter().enumerate() {
                let sy = y as isize + j as isize - PYRAMID_RADIUS;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for (i, kx) in kernel.iter().enumerate() {
                    let sx = x as isize + i as isize - PYRAMID_RADIUS;
                    if sx < 0 || sx >= w as isize || !dm.is_valid(sx as usize, sy as usize) {
                        continue;
                    }
                    let wt = T::of(kx * ky);
                    acc += wt * dm.get(sx as usize, sy as usize);
                    wsum += wt;
                }
            }
            depth[ny * nw + nx] = acc / wsum;
            mask[ny * nw + nx] = true;
        }
    }
    DepthMap::new(nw, nh, depth, mask).ok()
}

/// Uniform-pattern counts for one level (not normalised).
pub fn lbp_level_counts<T: Real>(dm: &DepthMap<T>) -> Vec<T> {
    let lut = uniform_lookup();
    let mut h = vec![T::zero(); LBP_PATTERNS];
    for y in 0..dm.height() {
        for x in 0..dm.width() {
            if let Some(bin) = lbp_code(dm, x, y).and_then(|c| lut[c as usize]) {
                h[bin] += T::one();
            }
        }
    }
    h
}

/// Three-level LBP histogram on the raw depth, concatenated and normalised.
pub fn lbp_histogram<T: Real>(raw: &DepthMap<T>) -> Vec<T> {
    // work relative to the masked minimum so a depth offset cannot change a
    // single rounding decision
    let floor = raw
        .depth()
        .iter()
        .zip(raw.mask())
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .fold(T::infinity(), T::min);
    let mut level = if floor.is_finite() {
        Some(raw.map_depth(|d| d - floor))
    } else {
        None
    };
    let mut out = Vec::with_capacity(LBP_DIM);
    for _ in 0..LBP_LEVELS {
        match &level {
            Some(dm) => {
                out.extend(lbp_level_counts(dm));
                level = pyramid_down(dm);
            }
            None => out.extend(std::iter::repeat_n(T::zero(), LBP_PATTERNS)),
        }
    }
    if !l2_normalize(&mut out) {
        log::debug!("no valid LBP neighbourhoods; LBP block is zero");
    }
    out
}

// ---------------------------------------------------------------------------
// TSD

/// Bin of `v` on `[5, 50]` with ten equal bins; the upper edge belongs to
/// the last bin.
pub fn tsd_bin(v: f64) -> Option<usize> {
    let (lo, hi) = TSD_RANGE;
    if !(lo..=hi).contains(&v) {
        return None;
    }
    let b = ((v - lo) / ((hi - lo) / TSD_BINS as f64)).floor() as usize;
    Some(b.min(TSD_BINS - 1))
}

/// Width-by-height histogram, row-major in width, normalised. Samples with
/// either coordinate outside the range are dropped.
pub fn tsd_histogram<T: Real>(samples: &TsdSamples<T>) -> Vec<T> {
    let mut h = vec![T::zero(); TSD_DIM];
    for (w, ht) in samples.widths.iter().zip(&samples.heights) {
        if let (Some(i), Some(j)) = (tsd_bin(w.as_f64()), tsd_bin(ht.as_f64())) {
            h[i * TSD_BINS + j] += T::one();
        }
    }
    if !l2_normalize(&mut h) {
        log::debug!("all {} TSD samples out of range; TSD block is zero", samples.len());
    }
    h
}

// ---------------------------------------------------------------------------
// BSP

#[derive(Debug, Clone, PartialEq)]
pub struct BspDescriptor<T> {
    pub anchor: Pixel,
    /// Control depths relative to the centre control, row-major.
    pub values: [T; BSP_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BspConfig {
    pub patch: usize,
    pub stride: usize,
}

impl Default for BspConfig {
    fn default() -> Self {
        Self { patch: 41, stride: 8 }
    }
}

impl BspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.patch < 5 {
            return Err(Error::Config(format!("bsp patch must be odd and >= 5, got {}", self.patch)));
        }
        if self.stride == 0 {
            return Err(Error::Config("bsp stride must be positive".into()));
        }
        Ok(())
    }
}

/// Local 5x5-control spline descriptors at every `stride`-th ridge pixel
/// whose window lies fully inside the mask.
pub fn bsp_descriptors<T: Real>(
    smoothed: &DepthMap<T>,
    top: &TopologyMap<T>,
    cfg: &BspConfig,
) -> Result<Vec<BspDescriptor<T>>> {
    cfg.validate()?;
    let half = cfg.patch / 2;
    let (w, h) = (smoothed.width(), smoothed.height());
    let mut out = Vec::new();
    for &p in top.ridges.iter().step_by(cfg.stride) {
        if p.col < half || p.row < half || p.col + half >= w || p.row + half >= h {
            continue;
        }
        let (x0, y0) = (p.col - half, p.row - half);
        let inside = (y0..y0 + cfg.patch).all(|y| (x0..x0 + cfg.patch).all(|x| smoothed.is_valid(x, y)));
        if !inside {
            continue;
        }
        let patch = smoothed.window(x0, y0, cfg.patch, cfg.patch)?;
        let fit = fit_patch_5x5(&patch, (x0, y0))?;
        let centre = fit.control(2, 2);
        let mut values = [T::zero(); BSP_DIM];
        for iy in 0..5 {
            for ix in 0..5 {
                values[iy * 5 + ix] = fit.control(ix, iy) - centre;
            }
        }
        out.push(BspDescriptor { anchor: p, values });
    }
    if out.is_empty() {
        log::debug!("no BSP anchors among {} ridge pixels", top.ridges.len());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fusion

/// Which descriptor blocks enter the fused vector. Block order is fixed:
/// LBP, SI, TSD, pooled BSP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSet {
    pub lbp: bool,
    pub si: bool,
    pub tsd: bool,
    pub bsp: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet {
        lbp: true,
        si: true,
        tsd: true,
        bsp: true,
    };

    pub fn dimension(&self, k: usize) -> usize {
        self.lbp as usize * LBP_DIM
            + self.si as usize * SI_DIM
            + self.tsd as usize * TSD_DIM
            + self.bsp as usize * k
    }

    pub fn is_empty(&self) -> bool {
        !(self.lbp || self.si || self.tsd || self.bsp)
    }
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "lstb" || s == "all" {
            return Ok(Self::ALL);
        }
        let mut set = FeatureSet {
            lbp: false,
            si: false,
            tsd: false,
            bsp: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "lbp" | "l" => set.lbp = true,
                "si" | "s" => set.si = true,
                "tsd" | "t" => set.tsd = true,
                "bsp" | "b" => set.bsp = true,
                other => return Err(Error::Config(format!("unknown feature block '{other}'"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config("feature set is empty".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.lbp, "lbp"),
            (self.si, "si"),
            (self.tsd, "tsd"),
            (self.bsp, "bsp"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Global blocks of one image, before any coding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatures<T> {
    pub lbp: Vec<T>,
    pub si: Vec<T>,
    pub tsd: Vec<T>,
}

fn check_dim<T>(name: &str, v: &[T], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::Dimension(format!("{name} block has {} values, expected {want}", v.len())));
    }
    Ok(())
}

/// Concatenates the selected blocks in canonical order. No cross-block
/// normalisation is applied.
pub fn fuse<T: Real>(set: FeatureSet, g: &GlobalFeatures<T>, pooled: &[T]) -> Result<Vec<T>> {
    check_dim("LBP", &g.lbp, LBP_DIM)?;
    check_dim("SI", &g.si, SI_DIM)?;
    check_dim("TSD", &g.tsd, TSD_DIM)?;
    let mut v = Vec::with_capacity(set.dimension(pooled.len()));
    if set.lbp {
        v.extend_from_slice(&g.lbp);
    }
    if set.si {
        v.extend_from_slice(&g.si);
    }
    if set.tsd {
        v.extend_from_slice(&g.tsd);
    }
    if set.bsp {
        if pooled.is_empty() {
            return Err(Error::Dimension("pooled BSP block is empty".into()));
        }
        v.extend_from_slice(pooled);
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Feature dumps

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub item: String,
    pub label: String,
    pub values: Vec<f64>,
}

const CSV_HEADER: [&str; 4] = ["item", "label", "dim", "values"];

/// A table of fused vectors plus a free-form provenance line (config hash,
/// feature set, seed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub meta: String,
    pub records: Vec<FeatureRecord>,
}

const LSTB_MAGIC: &[u8; 5] = b"LSTB1";

impl FeatureTable {
    /// `# meta`, a header row, then `item,label,D,v_1..v_D` per record.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            let mut row = vec![r.item.clone(), r.label.clone(), r.values.len().to_string()];
            row.extend(r.values.iter().map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("# {}\n{body}", self.meta.replace('\n', " ")))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = String::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(m) = line.strip_prefix('#') {
                if meta.is_empty() {
                    meta = m.trim().to_string();
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(body.as_bytes());
        let header = rd.headers().map_err(|e| Error::Format(format!("feature header: {e}")))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Format(format!(
                "feature header must be `{}`",
                CSV_HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        for (n, row) in rd.records().enumerate() {
            let row = row.map_err(|e| Error::Format(format!("feature row {}: {e}", n + 1)))?;
            if row.len() < 3 {
                return Err(Error::Format(format!("feature row {} too short", n + 1)));
            }
            let d: usize = row[2]
                .parse()
                .map_err(|_| Error::Format(format!("feature row {}: bad dimension", n + 1)))?;
            if row.len() != d + 3 {
                return Err(Error::Format(format!(
                    "feature row {} declares {d} values but has {}",
                    n + 1,
                    row.len() - 3
                )));
            }
            let values = (3..row.len())
                .map(|i| {
                    row[i]
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("feature row {}: bad value '{}'", n + 1, &row[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            records.push(FeatureRecord {
                item: row[0].to_string(),
                label: row[1].to_string(),
                values,
            });
        }
        Ok(Self { meta, records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LSTB_MAGIC);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.item);
            put_str(&mut out, &r.label);
            out.extend_from_slice(&(r.values.len() as u32).to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != LSTB_MAGIC {
            return Err(Error::Format("missing LSTB1 header".into()));
        }
        let meta = r.string()?;
        let n = r.u64()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let item = r.string()?;
            let label = r.string()?;
            let d = r.u32()? as usize;
            let values = (0..d).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            records.push(FeatureRecord { item, label, values });
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after LSTB1 records".into()));
        }
        Ok(Self { meta, records })
    }

    /// Writes CSV, or binary when the extension is `.lstb`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_binary_path(path) {
            self.to_bytes()
        } else {
            self.to_csv()?.into_bytes()
        };
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(LSTB_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            Self::from_csv(&String::from_utf8(bytes).map_err(|_| Error::Format("feature CSV is not UTF-8".into()))?)
        }
    }
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("lstb"))
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Cursor over little-endian binary artefacts.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated binary file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
