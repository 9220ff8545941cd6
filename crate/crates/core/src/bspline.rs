//! Tensor-product B-spline surfaces over depth-map pixels: basis evaluation
//! (Cox-de Boor with derivatives), least-squares fitting of control depths,
//! analytic derivative evaluation, and a blended piecewise fit of whole maps.

use rayon::prelude::*;

use crate::depthio::DepthMap;
use crate::error::{Error, Result};
use crate::linalg::{self, SolveStatus};
use crate::scalar::Real;

/// Diagonal ridge (relative to the mean diagonal) used when normal equations
/// are near-singular.
const NEAR_SINGULAR_RIDGE: f64 = 1e-9;

/// Relative pivot below which masked normal equations count as rank deficient.
const MASKED_PIVOT_TOL: f64 = 1e-10;

/// Thin-plate penalty weight relative to the data term for rank-deficient
/// masked fits.
const THIN_PLATE_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector<T> {
    order: usize,
    knots: Vec<T>,
}

impl<T: Real> KnotVector<T> {
    /// `order` is degree + 1.
    pub fn new(order: usize, knots: Vec<T>) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config("knot vector order must be >= 1".into()));
        }
        if knots.len() < 2 * order {
            return Err(Error::Config(format!(
                "order {order} needs at least {} knots, got {}",
                2 * order,
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Config("knots must be non-decreasing".into()));
        }
        let kv = Self { order, knots };
        let (lo, hi) = kv.domain();
        if !(lo < hi) {
            return Err(Error::Config("knot vector has an empty domain".into()));
        }
        Ok(kv)
    }

    /// Open uniform knots `[0 x order, 1, 2, ..., spans x order]` for
    /// `n_controls` control points.
    pub fn open_uniform(order: usize, n_controls: usize) -> Result<Self> {
        if n_controls < order {
            return Err(Error::Config(format!(
                "{n_controls} controls cannot carry an order-{order} spline"
            )));
        }
        let spans = n_controls - order + 1;
        let mut knots = vec![T::zero(); order];
        knots.extend((1..spans).map(T::of_usize));
        knots.extend(std::iter::repeat_n(T::of_usize(spans), order));
        Self::new(order, knots)
    }

    /// Cubic open uniform vector `[0 0 0 0 1 2 2 2 2]` (five controls).
    pub fn cubic_two_span() -> Self {
        Self::open_uniform(4, 5).expect("valid by construction")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn degree(&self) -> usize {
        self.order - 1
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn n_controls(&self) -> usize {
        self.knots.len() - self.order
    }

    /// Active parameter interval `[t_{p}, t_{n}]`.
    pub fn domain(&self) -> (T, T) {
        (self.knots[self.order - 1], self.knots[self.n_controls()])
    }

    pub fn contains(&self, t: T) -> bool {
        let (lo, hi) = self.domain();
        t >= lo && t <= hi
    }

    /// Index of the knot span holding `t` (right end maps to the last span).
    fn find_span(&self, t: T) -> usize {
        let p = self.degree();
        let n = self.n_controls() - 1;
        if t >= self.knots[n + 1] {
            return n;
        }
        if t <= self.knots[p] {
            // skip zero-length spans at the start
            let mut s = p;
            while s < n && self.knots[s + 1] <= t {
                s += 1;
            }
            return s;
        }
        let (mut lo, mut hi) = (p, n + 1);
        let mut mid = (lo + hi) / 2;
        while t < self.knots[mid] || t >= self.knots[mid + 1] {
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    fn check(&self, t: T) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            let (lo, hi) = self.domain();
            Err(Error::Domain(format!("parameter {t} outside [{lo}, {hi}]")))
        }
    }

    /// All `n_controls` basis weights at `t`.
    pub fn basis_values(&self, t: T) -> Result<Vec<T>> {
        self.check(t)?;
        let (span, ders) = self.local_derivatives(t, 0);
        let mut out = vec![T::zero(); self.n_controls()];
        let first = span + 1 - self.order;
        out[first..first + self.order].copy_from_slice(&ders[0]);
        Ok(out)
    }

    /// Non-zero basis functions and their derivatives up to `n_ders` at `t`:
    /// returns the span index `s` and `ders[k][r]`, the k-th derivative of
    /// basis function `s - degree + r`.
    ///
    /// Caller guarantees `t` is in the domain.
    pub fn local_derivatives(&self, t: T, n_ders: usize) -> (usize, Vec<Vec<T>>) {
        let p = self.degree();
        let span = self.find_span(t);
        let u = &self.knots;
        let zero = T::zero();

        let mut ndu = vec![vec![zero; p + 1]; p + 1];
        let mut left = vec![zero; p + 1];
        let mut right = vec![zero; p + 1];
        ndu[0][0] = T::one();
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = zero;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![zero; p + 1]; n_ders + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let top = n_ders.min(p);
        let mut a = [vec![zero; p + 1], vec![zero; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = T::one();
            for k in 1..=top {
                let mut d = zero;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = T::of_usize(p);
        for k in 1..=top {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= T::of_usize(p - k);
        }
        (span, ders)
    }
}

/// Pixel rectangle a surface was fitted over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }
}

/// Depth and its first and second partial derivatives (pixel units).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurfaceDerivs<T> {
    pub z: T,
    pub zx: T,
    pub zy: T,
    pub zxx: T,
    pub zxy: T,
    pub zyy: T,
}

impl<T: Real> SurfaceDerivs<T> {
    fn scaled_add(&mut self, w: T, o: &Self) {
        self.z += w * o.z;
        self.zx += w * o.zx;
        self.zy += w * o.zy;
        self.zxx += w * o.zxx;
        self.zxy += w * o.zxy;
        self.zyy += w * o.zyy;
    }

    fn scale(&mut self, s: T) {
        self.z *= s;
        self.zx *= s;
        self.zy *= s;
        self.zxx *= s;
        self.zxy *= s;
        self.zyy *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.z, self.zx, self.zy, self.zxx, self.zxy, self.zyy]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Control depths on a uniform grid over a pixel rectangle. Pixel
/// coordinates map affinely onto each knot vector's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSurface<T> {
    /// Row-major, `ny` rows (y) by `nx` columns (x).
    controls: Vec<T>,
    knots_x: KnotVector<T>,
    knots_y: KnotVector<T>,
    domain: PixelRect,
    residual_rms: T,
}

/// Per-sample local basis rows of one axis: span start and up to 3
/// derivative orders of the `order` non-zero functions.
struct AxisBasis<T> {
    first: Vec<usize>,
    ders: Vec<[Vec<T>; 3]>,
    /// d(parameter)/d(pixel)
    scale: T,
}

fn axis_param<T: Real>(kv: &KnotVector<T>, len: usize, offset: T) -> (T, T) {
    let (lo, hi) = kv.domain();
    let scale = if len > 1 {
        (hi - lo) / T::of_usize(len - 1)
    } else {
        T::zero()
    };
    let t = (lo + offset * scale).max(lo).min(hi);
    (t, scale)
}

fn axis_basis<T: Real>(kv: &KnotVector<T>, len: usize, n_ders: usize) -> AxisBasis<T> {
    let mut first = Vec::with_capacity(len);
    let mut ders = Vec::with_capacity(len);
    let mut scale = T::zero();
    for i in 0..len {
        let (t, s) = axis_param(kv, len, T::of_usize(i));
        scale = s;
        let (span, d) = kv.local_derivatives(t, n_ders);
        first.push(span + 1 - kv.order());
        let zeros = vec![T::zero(); kv.order()];
        let get = |k: usize| d.get(k).cloned().unwrap_or_else(|| zeros.clone());
        ders.push([get(0), get(1), get(2)]);
    }
    AxisBasis { first, ders, scale }
}

fn dense_basis<T: Real>(ab: &AxisBasis<T>, n: usize) -> Vec<T> {
    let len = ab.first.len();
    let mut m = vec![T::zero(); len * n];
    for i in 0..len {
        for (r, &v) in ab.ders[i][0].iter().enumerate() {
            m[i * n + ab.first[i] + r] = v;
        }
    }
    m
}

impl<T: Real> FittedSurface<T> {
    pub fn controls(&self) -> &[T] {
        &self.controls
    }

    /// `(nx, ny)`
    pub fn control_dims(&self) -> (usize, usize) {
        (self.knots_x.n_controls(), self.knots_y.n_controls())
    }

    pub fn control(&self, ix: usize, iy: usize) -> T {
        self.controls[iy * self.knots_x.n_controls() + ix]
    }

    pub fn knots_x(&self) -> &KnotVector<T> {
        &self.knots_x
    }

    pub fn knots_y(&self) -> &KnotVector<T> {
        &self.knots_y
    }

    pub fn domain(&self) -> PixelRect {
        self.domain
    }

    pub fn residual_rms(&self) -> T {
        self.residual_rms
    }

    /// Builds a surface directly from control depths.
    pub fn from_controls(
        controls: Vec<T>,
        knots_x: KnotVector<T>,
        knots_y: KnotVector<T>,
        domain: PixelRect,
    ) -> Result<Self> {
        if controls.len() != knots_x.n_controls() * knots_y.n_controls() {
            return Err(Error::Dimension(format!(
                "{} controls for a {}x{} grid",
                controls.len(),
                knots_x.n_controls(),
                knots_y.n_controls()
            )));
        }
        if domain.width < 2 || domain.height < 2 {
            return Err(Error::Domain("surface domain must span at least 2x2 pixels".into()));
        }
        Ok(Self {
            controls,
            knots_x,
            knots_y,
            domain,
            residual_rms: T::zero(),
        })
    }

    /// Evaluates the `(dx, dy)` partial derivative at pixel coordinates
    /// `(x, y)` (derivatives per pixel). Orders are limited to `dx + dy <= 2`.
    pub fn evaluate(&self, x: T, y: T, dx: usize, dy: usize) -> Result<T> {
        if dx + dy > 2 {
            return Err(Error::Domain(format!(
                "derivative order ({dx}, {dy}) exceeds 2"
            )));
        }
        let d = self.domain;
        let eps = T::of(1e-9);
        let (fx0, fy0) = (T::of_usize(d.x0), T::of_usize(d.y0));
        let (fx1, fy1) = (
            T::of_usize(d.x0 + d.width - 1),
            T::of_usize(d.y0 + d.height - 1),
        );
        if !(x >= fx0 - eps && x <= fx1 + eps && y >= fy0 - eps && y <= fy1 + eps) {
            return Err(Error::Domain(format!(
                "({x}, {y}) outside fitted rectangle {:?}",
                d
            )));
        }
        let (u, su) = axis_param(&self.knots_x, d.width, x - fx0);
        let (v, sv) = axis_param(&self.knots_y, d.height, y - fy0);
        let (span_u, bu) = self.knots_x.local_derivatives(u, dx);
        let (span_v, bv) = self.knots_y.local_derivatives(v, dy);
        let nx = self.knots_x.n_controls();
        let (ou, ov) = (span_u + 1 - self.knots_x.order(), span_v + 1 - self.knots_y.order());
        let mut acc = T::zero();
        for (j, &wv) in bv[dy].iter().enumerate() {
            let row = (ov + j) * nx + ou;
            let mut s = T::zero();
            for (i, &wu) in bu[dx].iter().enumerate() {
                s += wu * self.controls[row + i];
            }
            acc += wv * s;
        }
        Ok(acc * su.powi(dx as i32) * sv.powi(dy as i32))
    }

    /// Depth and derivatives at every pixel of the domain, row-major.
    pub fn evaluate_grid(&self) -> Vec<SurfaceDerivs<T>> {
        let d = self.domain;
        let bx = axis_basis(&self.knots_x, d.width, 2);
        let by = axis_basis(&self.knots_y, d.height, 2);
        let nx = self.knots_x.n_controls();
        let (sx, sy) = (bx.scale, by.scale);
        let mut out = Vec::with_capacity(d.width * d.height);
        // contract along x first: per (pixel column, control row) partial sums
        let mut tmp = vec![[T::zero(); 3]; self.knots_y.n_controls()];
        let mut cols: Vec<Vec<[T; 3]>> = Vec::with_capacity(d.width);
        for px in 0..d.width {
            for (cy, t) in tmp.iter_mut().enumerate() {
                let row = cy * nx + bx.first[px];
                for (k, slot) in t.iter_mut().enumerate() {
                    *slot = bx.ders[px][k]
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| w * self.controls[row + i])
                        .sum();
                }
            }
            cols.push(tmp.clone());
        }
        for py in 0..d.height {
            let oy = by.first[py];
            let wy = &by.ders[py];
            for col in cols.iter() {
                let mut r = SurfaceDerivs::default();
                for j in 0..self.knots_y.order() {
                    let c = col[oy + j];
                    r.z += wy[0][j] * c[0];
                    r.zx += wy[0][j] * c[1];
                    r.zxx += wy[0][j] * c[2];
                    r.zy += wy[1][j] * c[0];
                    r.zxy += wy[1][j] * c[1];
                    r.zyy += wy[2][j] * c[0];
                }
                r.zx *= sx;
                r.zxx *= sx * sx;
                r.zy *= sy;
                r.zxy *= sx * sy;
                r.zyy *= sy * sy;
                out.push(r);
            }
        }
        out
    }
}

/// Least-squares fit of control depths to `patch`, whose top-left pixel sits
/// at `origin` in the parent image. Control counts follow the knot vectors.
///
/// Fully valid patches are solved separably (`(Ay'Ay)^-1 Ay' P Ax (Ax'Ax)^-1`);
/// masked patches fall back to the full normal equations over valid pixels.
pub fn fit_patch<T: Real>(
    patch: &DepthMap<T>,
    origin: (usize, usize),
    knots_x: &KnotVector<T>,
    knots_y: &KnotVector<T>,
) -> Result<FittedSurface<T>> {
    let (w, h) = (patch.width(), patch.height());
    let (nx, ny) = (knots_x.n_controls(), knots_y.n_controls());
    let valid = patch.valid_count();
    if w < 2 || h < 2 || valid < nx * ny || (valid == w * h && (w < nx || h < ny)) {
        return Err(Error::Fit(format!(
            "{w}x{h} patch with {valid} valid samples cannot determine {nx}x{ny} controls"
        )));
    }
    let mean = patch
        .depth()
        .iter()
        .zip(patch.mask())
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .sum::<T>()
        / T::of_usize(valid);

    let bx = axis_basis(knots_x, w, 0);
    let by = axis_basis(knots_y, h, 0);
    let ax = dense_basis(&bx, nx);
    let ay = dense_basis(&by, ny);

    let reg = T::of(NEAR_SINGULAR_RIDGE);
    let mut controls = if valid == w * h {
        // M = Ay' P Ax  (ny x nx), P centred
        let mut pax = vec![T::zero(); h * nx];
        for y in 0..h {
            for x in 0..w {
                let p = patch.get(x, y) - mean;
                let o = bx.first[x];
                for (i, &b) in bx.ders[x][0].iter().enumerate() {
                    pax[y * nx + o + i] += p * b;
                }
            }
        }
        let mut m = vec![T::zero(); ny * nx];
        for y in 0..h {
            let o = by.first[y];
            for (j, &b) in by.ders[y][0].iter().enumerate() {
                for i in 0..nx {
                    m[(o + j) * nx + i] += b * pax[y * nx + i];
                }
            }
        }
        let gy = linalg::gram(&ay, h, ny);
        let gx = linalg::gram(&ax, w, nx);
        let s1 = linalg::solve_spd(&gy, ny, &mut m, nx, reg)
            .ok_or_else(|| Error::Fit("singular row-basis Gram matrix".into()))?;
        // Omega Gx = Z  <=>  Gx Omega' = Z'
        let mut zt = transpose(&m, ny, nx);
        let s2 = linalg::solve_spd(&gx, nx, &mut zt, ny, reg)
            .ok_or_else(|| Error::Fit("singular column-basis Gram matrix".into()))?;
        warn_if_regularized(s1);
        warn_if_regularized(s2);
        transpose(&zt, nx, ny)
    } else {
        let n = nx * ny;
        let mut ata = vec![T::zero(); n * n];
        let mut atb = vec![T::zero(); n];
        let mut idx = Vec::with_capacity(knots_x.order() * knots_y.order());
        let mut val = Vec::with_capacity(idx.capacity());
        for y in 0..h {
            for x in 0..w {
                if !patch.is_valid(x, y) {
                    continue;
                }
                idx.clear();
                val.clear();
                for (j, &vy) in by.ders[y][0].iter().enumerate() {
                    for (i, &vx) in bx.ders[x][0].iter().enumerate() {
                        idx.push((by.first[y] + j) * nx + bx.first[x] + i);
                        val.push(vx * vy);
                    }
                }
                let p = patch.get(x, y) - mean;
                for a in 0..idx.len() {
                    atb[idx[a]] += val[a] * p;
                    for b in 0..idx.len() {
                        ata[idx[a] * n + idx[b]] += val[a] * val[b];
                    }
                }
            }
        }
        let mut l = ata.clone();
        if linalg::cholesky_in_place(&mut l, n, T::of(MASKED_PIVOT_TOL)) {
            linalg::cholesky_solve(&l, n, &mut atb, 1);
        } else {
            // Controls without data support: add a small thin-plate penalty,
            // which vanishes on planes.
            let bx2 = axis_basis(knots_x, w, 2);
            let by2 = axis_basis(knots_y, h, 2);
            let (sx, sy) = (bx2.scale, by2.scale);
            let mut bend = vec![T::zero(); n * n];
            let two = T::of(2.0).sqrt();
            for y in 0..h {
                for x in 0..w {
                    for (dxo, dyo, f) in [(2, 0, sx * sx), (1, 1, two * sx * sy), (0, 2, sy * sy)] {
                        idx.clear();
                        val.clear();
                        for (j, &vy) in by2.ders[y][dyo].iter().enumerate() {
                            for (i, &vx) in bx2.ders[x][dxo].iter().enumerate() {
                                idx.push((by2.first[y] + j) * nx + bx2.first[x] + i);
                                val.push(f * vx * vy);
                            }
                        }
                        for a in 0..idx.len() {
                            for b in 0..idx.len() {
                                bend[idx[a] * n + idx[b]] += val[a] * val[b];
                            }
                        }
                    }
                }
            }
            let tr_a: T = (0..n).map(|i| ata[i * n + i]).sum();
            let tr_b: T = (0..n).map(|i| bend[i * n + i]).sum();
            if tr_b > T::zero() {
                let mu = T::of(THIN_PLATE_WEIGHT) * tr_a / tr_b;
                for (a, b) in ata.iter_mut().zip(&bend) {
                    *a += mu * *b;
                }
            }
            let status = linalg::solve_spd(&ata, n, &mut atb, 1, reg)
                .ok_or_else(|| Error::Fit("singular masked normal equations".into()))?;
            warn_if_regularized(status);
        }
        atb
    };
    for c in controls.iter_mut() {
        *c += mean;
    }

    let mut surface = FittedSurface {
        controls,
        knots_x: knots_x.clone(),
        knots_y: knots_y.clone(),
        domain: PixelRect {
            x0: origin.0,
            y0: origin.1,
            width: w,
            height: h,
        },
        residual_rms: T::zero(),
    };
    let fitted = surface.evaluate_grid();
    let sse: T = fitted
        .iter()
        .zip(patch.depth().iter().zip(patch.mask()))
        .filter(|(_, (_, &m))| m)
        .map(|(f, (&d, _))| (f.z - d) * (f.z - d))
        .sum();
    surface.residual_rms = (sse / T::of_usize(valid)).sqrt();
    Ok(surface)
}

fn warn_if_regularized(s: SolveStatus) {
    if let SolveStatus::Regularized(r) = s {
        log::warn!("near-singular spline normal equations; added ridge {r:.3e}");
    }
}

fn transpose<T: Copy>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut t = Vec::with_capacity(a.len());
    for j in 0..c {
        for i in 0..r {
            t.push(a[i * c + j]);
        }
    }
    t
}

/// Fits the cubic 5x5-control patch used by the BSP descriptor.
pub fn fit_patch_5x5<T: Real>(patch: &DepthMap<T>, origin: (usize, usize)) -> Result<FittedSurface<T>> {
    let kv = KnotVector::cubic_two_span();
    fit_patch(patch, origin, &kv, &kv)
}

// ---------------------------------------------------------------------------
// Piecewise fitting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecewiseConfig {
    /// Tile side, pixels.
    pub tile: usize,
    /// Overlap between neighbouring tiles, pixels.
    pub overlap: usize,
    /// Target spacing of interior knots, pixels.
    pub knot_spacing: f64,
}

impl Default for PiecewiseConfig {
    fn default() -> Self {
        Self {
            tile: 64,
            overlap: 16,
            knot_spacing: 4.0,
        }
    }
}

const TILE_ORDER: usize = 4;

impl PiecewiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile < 2 * TILE_ORDER {
            return Err(Error::Config(format!(
                "tile {} px is smaller than the cubic control support ({} px)",
                self.tile,
                2 * TILE_ORDER
            )));
        }
        if 2 * self.overlap >= self.tile {
            return Err(Error::Config(format!(
                "overlap {} must be under half the tile ({})",
                self.overlap, self.tile
            )));
        }
        if !(self.knot_spacing >= 1.0) {
            return Err(Error::Config("knot spacing must be >= 1 px".into()));
        }
        Ok(())
    }

    fn controls_for(&self, len: usize) -> usize {
        let spans = ((len.saturating_sub(1)) as f64 / self.knot_spacing).ceil().max(1.0) as usize;
        (spans + TILE_ORDER - 1).min(len)
    }
}

/// Tile start offsets along an axis of length `len`.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Blend weight along one axis: cosine ramp over `overlap` pixels on sides
/// that have a neighbouring tile, one elsewhere.
fn taper(pos: usize, len: usize, overlap: usize, left: bool, right: bool) -> f64 {
    let ramp = |q: usize| {
        if q < overlap {
            let s = (std::f64::consts::FRAC_PI_2 * (q + 1) as f64 / (overlap + 1) as f64).sin();
            s * s
        } else {
            1.0
        }
    };
    let mut w = 1.0;
    if left {
        w *= ramp(pos);
    }
    if right {
        w *= ramp(len - 1 - pos);
    }
    w
}

/// Piecewise spline approximation of a whole depth map with blended tiles.
///
/// Derivatives are blended with the same weights as depth; weight gradients
/// are not propagated since neighbouring tiles fit the same samples.
#[derive(Debug, Clone)]
pub struct SmoothedSurface<T> {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    derivs: Vec<SurfaceDerivs<T>>,
    tiles: Vec<FittedSurface<T>>,
}

impl<T: Real> SmoothedSurface<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn derivs(&self, x: usize, y: usize) -> &SurfaceDerivs<T> {
        &self.derivs[y * self.width + x]
    }

    pub fn all_derivs(&self) -> &[SurfaceDerivs<T>] {
        &self.derivs
    }

    pub fn tiles(&self) -> &[FittedSurface<T>] {
        &self.tiles
    }

    /// Tiles whose rectangle covers pixel `(x, y)`.
    pub fn tiles_at(&self, x: usize, y: usize) -> impl Iterator<Item = &FittedSurface<T>> {
        self.tiles.iter().filter(move |t| t.domain().contains(x, y))
    }

    pub fn depth_map(&self) -> DepthMap<T> {
        let depth = self
            .derivs
            .iter()
            .zip(&self.mask)
            .map(|(d, &m)| if m { d.z } else { T::zero() })
            .collect();
        DepthMap::new(self.width, self.height, depth, self.mask.clone())
            .expect("smoothed depths are finite on the mask")
    }
}

fn fit_tile<T: Real>(
    dm: &DepthMap<T>,
    rect: PixelRect,
    cfg: &PiecewiseConfig,
) -> Result<Option<FittedSurface<T>>> {
    let patch = dm.window(rect.x0, rect.y0, rect.width, rect.height)?;
    let valid = patch.valid_count();
    if valid == 0 {
        return Ok(None);
    }
    let nx = cfg.controls_for(rect.width);
    let ny = cfg.controls_for(rect.height);
    let kx = KnotVector::open_uniform(TILE_ORDER, nx)?;
    let ky = KnotVector::open_uniform(TILE_ORDER, ny)?;
    let origin = (rect.x0, rect.y0);
    match fit_patch(&patch, origin, &kx, &ky) {
        Ok(s) => Ok(Some(s)),
        Err(Error::Fit(_)) => {
            // sparse coverage near the garment boundary: single bicubic span,
            // then a constant if even that is undetermined
            let k4 = KnotVector::open_uniform(TILE_ORDER, TILE_ORDER)?;
            match fit_patch(&patch, origin, &k4, &k4) {
                Ok(s) => Ok(Some(s)),
                Err(Error::Fit(_)) => {
                    let mean = patch
                        .depth()
                        .iter()
                        .zip(patch.mask())
                        .filter(|(_, &m)| m)
                        .map(|(&d, _)| d)
                        .sum::<T>()
                        / T::of_usize(valid);
                    let k2 = KnotVector::open_uniform(2, 2)?;
                    FittedSurface::from_controls(vec![mean; 4], k2.clone(), k2, rect).map(Some)
                }
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

/// Fits overlapping tiles over the masked region and blends them.
pub fn fit_surface_piecewise<T: Real>(
    dm: &DepthMap<T>,
    cfg: &PiecewiseConfig,
) -> Result<SmoothedSurface<T>> {
    cfg.validate()?;
    if dm.valid_count() == 0 {
        return Err(Error::Invalid("cannot smooth a depth map with an empty mask".into()));
    }
    let (w, h) = (dm.width(), dm.height());
    if w < 2 || h < 2 {
        return Err(Error::Invalid("depth map must be at least 2x2".into()));
    }
    let xs = tile_starts(w, cfg.tile, cfg.overlap);
    let ys = tile_starts(h, cfg.tile, cfg.overlap);
    let tw = cfg.tile.min(w);
    let th = cfg.tile.min(h);
    let rects: Vec<PixelRect> = ys
        .iter()
        .flat_map(|&y0| {
            xs.iter().map(move |&x0| PixelRect {
                x0,
                y0,
                width: tw,
                height: th,
            })
        })
        .collect();

    let fitted: Vec<Result<Option<(FittedSurface<T>, Vec<SurfaceDerivs<T>>)>>> = rects
        .par_iter()
        .map(|r| {
            Ok(fit_tile(dm, *r, cfg)?.map(|s| {
                let g = s.evaluate_grid();
                (s, g)
            }))
        })
        .collect();

    let mut acc = vec![SurfaceDerivs::<T>::default(); w * h];
    let mut wsum = vec![T::zero(); w * h];
    let mut tiles = Vec::with_capacity(rects.len());
    for (rect, res) in rects.iter().zip(fitted) {
        let Some((surface, grid)) = res? else { continue };
        let left = rect.x0 > 0;
        let right = rect.x0 + rect.width < w;
        let top = rect.y0 > 0;
        let bottom = rect.y0 + rect.height < h;
        let wx: Vec<f64> = (0..rect.width)
            .map(|i| taper(i, rect.width, cfg.overlap, left, right))
            .collect();
        for j in 0..rect.height {
            let wy = taper(j, rect.height, cfg.overlap, top, bottom);
            for i in 0..rect.width {
                let idx = (rect.y0 + j) * w + rect.x0 + i;
                if !dm.mask()[idx] {
                    continue;
                }
                let wt = T::of(wy * wx[i]);
                acc[idx].scaled_add(wt, &grid[j * rect.width + i]);
                wsum[idx] += wt;
            }
        }
        tiles.push(surface);
    }

    let mut mask = dm.mask().to_vec();
    for (i, d) in acc.iter_mut().enumerate() {
        if mask[i] && wsum[i] > T::zero() {
            d.scale(T::one() / wsum[i]);
            if !d.is_finite() {
                mask[i] = false;
                *d = SurfaceDerivs::default();
            }
        } else {
            mask[i] = false;
        }
    }
    Ok(SmoothedSurface {
        width: w,
        height: h,
        mask,
        derivs: acc,
        tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cox-de Boor recursion straight from the definition.
    fn oracle_basis(kv: &KnotVector<f64>, t: f64) -> Vec<f64> {
        let n = kv.n_controls();
        let (_, hi) = kv.domain();
        // only the last non-empty span may claim the right end
        let last_span = (0..kv.knots().len() - 1)
            .rev()
            .find(|&i| kv.knots()[i] < kv.knots()[i + 1])
            .unwrap();
        (0..n)
            .map(|i| {
                let ks = kv.knots().to_vec();
                let p = kv.degree();
                eval_with_end(&ks, i, p, t, t == hi, last_span)
            })
            .collect()
    }

    fn eval_with_end(knots: &[f64], i: usize, p: usize, t: f64, at_end: bool, last: usize) -> f64 {
        if p == 0 {
            if at_end {
                return if i == last { 1.0 } else { 0.0 };
            }
            return if knots[i] <= t && t < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * eval_with_end(knots, i, p - 1, t, at_end, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * eval_with_end(knots, i + 1, p - 1, t, at_end, last);
        }
        v
    }

    #[test]
    fn endpoint_interpolation() {
        let kv = KnotVector::<f64>::cubic_two_span();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(kv.basis_values(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(kv.basis_values(2.0).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn interior_knot_matches_recursive_definition() {
        let kv = KnotVector::<f64>::cubic_two_span();
        let fast = kv.basis_values(1.0).unwrap();
        let slow = oracle_basis(&kv, 1.0);
        // frozen: N(1) = (0, 1/4, 1/2, 1/4, 0)
        assert_eq!(slow, vec![0.0, 0.25, 0.5, 0.25, 0.0]);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_matches_recursion_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let order = rng.random_range(1..=5);
            let n = rng.random_range(order..order + 6);
            let kv = KnotVector::<f64>::open_uniform(order, n).unwrap();
            let (lo, hi) = kv.domain();
            let t = if rng.random_bool(0.1) { hi } else { rng.random_range(lo..hi) };
            let fast = kv.basis_values(t).unwrap();
            let slow = oracle_basis(&kv, t);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "order {order} t {t}: {fast:?} vs {slow:?}");
            }
        }
    }

    #[test]
    fn out_of_domain_is_error() {
        let kv = KnotVector::<f64>::cubic_two_span();
        assert!(matches!(kv.basis_values(-0.1), Err(Error::Domain(_))));
        assert!(matches!(kv.basis_values(2.0001), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_knot_vectors_rejected() {
        assert!(KnotVector::<f64>::new(4, vec![0.0, 0.0, 1.0]).is_err());
        assert!(KnotVector::<f64>::new(2, vec![0.0, 1.0, 0.5, 2.0]).is_err());
        assert!(KnotVector::<f64>::new(2, vec![1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn partition_of_unity_f32() {
        let kv = KnotVector::<f32>::open_uniform(4, 9).unwrap();
        for i in 0..=600 {
            let t = i as f32 / 100.0;
            let s: f32 = kv.basis_values(t).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_patch_fits_exactly() {
        let patch = DepthMap::constant(9, 9, 2.0f64);
        let s = fit_patch_5x5(&patch, (0, 0)).unwrap();
        assert_eq!(s.controls().len(), 25);
        for &c in s.controls() {
            assert!((c - 2.0).abs() < 1e-12);
        }
        assert!(s.residual_rms() < 1e-12);
    }

    #[test]
    fn too_few_samples_is_fit_error() {
        let patch = DepthMap::constant(4, 9, 1.0);
        assert!(matches!(fit_patch_5x5(&patch, (0, 0)), Err(Error::Fit(_))));
    }

    #[test]
    fn masked_patch_uses_valid_samples_only() {
        let kv = KnotVector::<f64>::cubic_two_span();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ctrl: Vec<f64> = (0..25).map(|_| rng.random_range(-5.0..5.0)).collect();
        let rect = PixelRect { x0: 0, y0: 0, width: 15, height: 13 };
        let truth = FittedSurface::from_controls(ctrl.clone(), kv.clone(), kv.clone(), rect).unwrap();
        let grid = truth.evaluate_grid();
        let mut mask = vec![true; 15 * 13];
        for i in (0..mask.len()).step_by(7) {
            mask[i] = false;
        }
        let depth: Vec<f64> = grid
            .iter()
            .zip(&mask)
            .map(|(g, &m)| if m { g.z } else { 1e6 })
            .collect();
        let dm = DepthMap::new(15, 13, depth, mask).unwrap();
        let fit = fit_patch(&dm, (0, 0), &kv, &kv).unwrap();
        for (a, b) in fit.controls().iter().zip(&ctrl) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn derivative_orders_limited() {
        let kv = KnotVector::<f64>::cubic_two_span();
        let rect = PixelRect { x0: 0, y0: 0, width: 5, height: 5 };
        let s = FittedSurface::from_controls(vec![0.0; 25], kv.clone(), kv, rect).unwrap();
        assert!(matches!(s.evaluate(1.0, 1.0, 2, 1), Err(Error::Domain(_))));
        assert!(matches!(s.evaluate(5.0, 1.0, 0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_surface_has_zero_derivatives() {
        let kv = KnotVector::<f64>::cubic_two_span();
        let rect = PixelRect { x0: 3, y0: 4, width: 11, height: 11 };
        let s = FittedSurface::from_controls(vec![7.5; 25], kv.clone(), kv, rect).unwrap();
        for (dx, dy) in [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)] {
            let v = s.evaluate(8.3, 9.1, dx, dy).unwrap();
            assert!(v.abs() < 1e-12);
        }
        assert!((s.evaluate(8.3, 9.1, 0, 0).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_ramp_has_constant_slope() {
        // Greville abscissae of [0 0 0 0 1 2 2 2 2] are 0, 1/3, 1, 5/3, 2
        let greville = [0.0, 1.0 / 3.0, 1.0, 5.0 / 3.0, 2.0];
        let kv = KnotVector::<f64>::cubic_two_span();
        let ctrl: Vec<f64> = (0..25).map(|k| 3.0 * greville[k % 5] + 10.0).collect();
        let rect = PixelRect { x0: 0, y0: 0, width: 21, height: 21 };
        let s = FittedSurface::from_controls(ctrl, kv.clone(), kv, rect).unwrap();
        // 20 px span the parameter range [0, 2]: slope 3 * 2/20 per pixel
        for &(x, y) in &[(0.0, 0.0), (3.3, 7.0), (10.0, 10.0), (19.9, 2.0)] {
            assert!((s.evaluate(x, y, 1, 0).unwrap() - 0.3).abs() < 1e-12);
            assert!(s.evaluate(x, y, 0, 1).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn grid_evaluation_agrees_with_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kx = KnotVector::<f64>::open_uniform(4, 7).unwrap();
        let ky = KnotVector::<f64>::open_uniform(4, 6).unwrap();
        let ctrl: Vec<f64> = (0..42).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rect = PixelRect { x0: 10, y0: 20, width: 17, height: 12 };
        let s = FittedSurface::from_controls(ctrl, kx, ky, rect).unwrap();
        let g = s.evaluate_grid();
        for y in 0..12 {
            for x in 0..17 {
                let d = &g[y * 17 + x];
                let (fx, fy) = ((x + 10) as f64, (y + 20) as f64);
                for (dx, dy, v) in [
                    (0, 0, d.z),
                    (1, 0, d.zx),
                    (0, 1, d.zy),
                    (2, 0, d.zxx),
                    (1, 1, d.zxy),
                    (0, 2, d.zyy),
                ] {
                    assert!((s.evaluate(fx, fy, dx, dy).unwrap() - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn tile_layout_covers_axis() {
        assert_eq!(tile_starts(50, 64, 16), vec![0]);
        assert_eq!(tile_starts(64, 64, 16), vec![0]);
        assert_eq!(tile_starts(256, 64, 16), vec![0, 48, 96, 144, 192]);
        assert_eq!(tile_starts(100, 64, 16), vec![0, 36]);
    }

    #[test]
    fn piecewise_config_validation() {
        let dm = DepthMap::constant(32, 32, 1.0);
        let bad = PiecewiseConfig { tile: 6, ..Default::default() };
        assert!(matches!(fit_surface_piecewise(&dm, &bad), Err(Error::Config(_))));
        let bad = PiecewiseConfig { tile: 32, overlap: 16, ..Default::default() };
        assert!(matches!(fit_surface_piecewise(&dm, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn planes_reproduce_through_blending() {
        let dm = DepthMap::from_fn(150, 120, |x, y| 700.0 + 0.3 * x as f64 - 0.7 * y as f64);
        let s = fit_surface_piecewise(&dm, &PiecewiseConfig::default()).unwrap();
        assert!(s.tiles().len() > 1);
        for y in 0..120 {
            for x in 0..150 {
                let d = s.derivs(x, y);
                assert!((d.z - dm.get(x, y)).abs() < 1e-6);
                assert!((d.zx - 0.3).abs() < 1e-6 && (d.zy + 0.7).abs() < 1e-6);
                assert!(d.zxx.abs() < 1e-6 && d.zyy.abs() < 1e-6 && d.zxy.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_plane_reproduces_away_from_boundary() {
        let mut dm = DepthMap::from_fn(96, 96, |x, y| 500.0 + 0.2 * x as f64 + 0.1 * y as f64);
        let mask: Vec<bool> = (0..96 * 96)
            .map(|i| {
                let (x, y) = ((i % 96) as f64 - 48.0, (i / 96) as f64 - 48.0);
                x * x + y * y < 40.0 * 40.0
            })
            .collect();
        dm = dm.with_mask(mask).unwrap();
        let s = fit_surface_piecewise(&dm, &PiecewiseConfig::default()).unwrap();
        for y in 0..96 {
            for x in 0..96 {
                if dm.is_valid(x, y) {
                    assert!(s.is_valid(x, y));
                    assert!((s.derivs(x, y).z - dm.get(x, y)).abs() < 1e-6);
                } else {
                    assert!(!s.is_valid(x, y));
                }
            }
        }
    }

    #[test]
    fn single_tile_equals_fit_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dm = DepthMap::from_fn(40, 30, |_, _| rng.random_range(0.0..10.0));
        let cfg = PiecewiseConfig::default();
        let s = fit_surface_piecewise(&dm, &cfg).unwrap();
        assert_eq!(s.tiles().len(), 1);
        let kx = KnotVector::open_uniform(4, cfg.controls_for(40)).unwrap();
        let ky = KnotVector::open_uniform(4, cfg.controls_for(30)).unwrap();
        let direct = fit_patch(&dm, (0, 0), &kx, &ky).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                let v = direct.evaluate(x as f64, y as f64, 0, 0).unwrap();
                assert!((s.derivs(x, y).z - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smoothing_reduces_noise_variance() {
        use rand_distr::{Distribution, Normal};
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 1.0).unwrap();
            let dm = DepthMap::from_fn(96, 80, |_, _| 300.0 + n.sample(&mut rng));
            let s = fit_surface_piecewise(&dm, &PiecewiseConfig::default()).unwrap();
            let before = dm.masked_variance();
            let after = s.depth_map().masked_variance();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }
}
