//! Principal curvatures of the smoothed surface, the shape index, its
//! nine-way surface-type quantisation, and majority rank filtering.
//!
//! Curvatures are those of the Monge patch `z = f(x, y)` with the normal
//! oriented toward increasing depth value. Raised bumps therefore have
//! negative curvature and map to positive shape index (dome, cap).

use crate::bspline::{SmoothedSurface, SurfaceDerivs};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMap<T> {
    pub width: usize,
    pub height: usize,
    pub k_min: Vec<T>,
    pub k_max: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> CurvatureMap<T> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<(T, T)> {
        let i = y * self.width + x;
        self.valid[i].then(|| (self.k_min[i], self.k_max[i]))
    }

    /// Principal curvature with the largest magnitude.
    #[inline]
    pub fn dominant(&self, x: usize, y: usize) -> Option<T> {
        self.at(x, y)
            .map(|(a, b)| if a.abs() >= b.abs() { a } else { b })
    }
}

/// Curvature and principal frame at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalFrame<T> {
    pub k_min: T,
    pub k_max: T,
    /// Unit image-plane direction of the principal curvature with the larger
    /// magnitude.
    pub dominant_dir: (T, T),
}

/// Principal curvatures from depth derivatives; `pitch` is mm per pixel.
pub fn principal_frame<T: Real>(d: &SurfaceDerivs<T>, pitch: T) -> Option<PrincipalFrame<T>> {
    if !d.is_finite() {
        return None;
    }
    let (fx, fy) = (d.zx / pitch, d.zy / pitch);
    let p2 = pitch * pitch;
    let (fxx, fxy, fyy) = (d.zxx / p2, d.zxy / p2, d.zyy / p2);
    let one = T::one();
    let e = one + fx * fx;
    let f = fx * fy;
    let g = one + fy * fy;
    let w = (one + fx * fx + fy * fy).sqrt();
    let l = fxx / w;
    let m = fxy / w;
    let n = fyy / w;
    let det1 = e * g - f * f;
    let gauss = (l * n - m * m) / det1;
    let mean = (e * n - T::of(2.0) * f * m + g * l) / (T::of(2.0) * det1);
    let disc = (mean * mean - gauss).max(T::zero()).sqrt();
    let (k_min, k_max) = (mean - disc, mean + disc);
    if !k_min.is_finite() || !k_max.is_finite() {
        return None;
    }
    let k = if k_min.abs() >= k_max.abs() { k_min } else { k_max };
    // (II - k I) v = 0; take the better conditioned row
    let r1 = (m - k * f, -(l - k * e));
    let r2 = (n - k * g, -(m - k * f));
    let n1 = r1.0 * r1.0 + r1.1 * r1.1;
    let n2 = r2.0 * r2.0 + r2.1 * r2.1;
    let (vx, vy, nn) = if n1 >= n2 { (r1.0, r1.1, n1) } else { (r2.0, r2.1, n2) };
    let dominant_dir = if nn > T::of(1e-24) {
        let s = nn.sqrt();
        (vx / s, vy / s)
    } else {
        // umbilic: fall back to the slope direction, then to x
        let gn = (fx * fx + fy * fy).sqrt();
        if gn > T::of(1e-12) {
            (fx / gn, fy / gn)
        } else {
            (one, T::zero())
        }
    };
    Some(PrincipalFrame {
        k_min,
        k_max,
        dominant_dir,
    })
}

/// Eigenvalue extremes of the Monge-patch shape operator at every valid
/// pixel. Pixels with non-finite derivatives are marked invalid.
pub fn principal_curvatures<T: Real>(surface: &SmoothedSurface<T>, pitch: T) -> CurvatureMap<T> {
    let (w, h) = (surface.width(), surface.height());
    let mut k_min = vec![T::zero(); w * h];
    let mut k_max = vec![T::zero(); w * h];
    let mut valid = vec![false; w * h];
    for (i, d) in surface.all_derivs().iter().enumerate() {
        if !surface.mask()[i] {
            continue;
        }
        if let Some(fr) = principal_frame(d, pitch) {
            k_min[i] = fr.k_min;
            k_max[i] = fr.k_max;
            valid[i] = true;
        }
    }
    CurvatureMap {
        width: w,
        height: h,
        k_min,
        k_max,
        valid,
    }
}

/// Surface types ordered by increasing shape index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ShapeClass {
    Cup = 0,
    Trough = 1,
    Rut = 2,
    SaddleRut = 3,
    Saddle = 4,
    SaddleRidge = 5,
    Ridge = 6,
    Dome = 7,
    Cap = 8,
    Undefined = 9,
}

impl ShapeClass {
    pub const DEFINED: [ShapeClass; 9] = [
        ShapeClass::Cup,
        ShapeClass::Trough,
        ShapeClass::Rut,
        ShapeClass::SaddleRut,
        ShapeClass::Saddle,
        ShapeClass::SaddleRidge,
        ShapeClass::Ridge,
        ShapeClass::Dome,
        ShapeClass::Cap,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::DEFINED.get(i).copied().unwrap_or(ShapeClass::Undefined)
    }

    /// Crest-like types accepted by ridge detection.
    pub fn is_ridge_like(self) -> bool {
        matches!(
            self,
            ShapeClass::SaddleRidge | ShapeClass::Ridge | ShapeClass::Dome | ShapeClass::Cap
        )
    }
}

/// Breakpoints used to quantise the shape index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quantization {
    /// Nine equal intervals over `[-1, 1]`.
    #[default]
    Uniform,
    /// Koenderink's boundaries at odd multiples of 1/8.
    Koenderink,
}

impl Quantization {
    pub fn classify<T: Real>(self, s: T) -> ShapeClass {
        let s = s.as_f64();
        let idx = match self {
            Quantization::Uniform => ((s + 1.0) * 4.5).floor(),
            Quantization::Koenderink => ((s + 1.0) * 4.0 + 0.5).floor(),
        };
        ShapeClass::from_index(idx.clamp(0.0, 8.0) as usize)
    }

    /// The eight interior class boundaries.
    pub fn breakpoints(self) -> [f64; 8] {
        let mut b = [0.0; 8];
        for (k, v) in b.iter_mut().enumerate() {
            *v = match self {
                Quantization::Uniform => -1.0 + 2.0 * (k + 1) as f64 / 9.0,
                Quantization::Koenderink => -7.0 / 8.0 + k as f64 / 4.0,
            };
        }
        b
    }
}

/// Curvature magnitude below which a pixel counts as flat.
pub const FLAT_CURVATURE: f64 = 1e-9;

/// `S = (2/pi) atan((k_min + k_max) / (k_min - k_max))`; `None` when both
/// curvatures vanish. Umbilics with non-zero curvature saturate to +-1.
pub fn shape_index_value<T: Real>(k_min: T, k_max: T) -> Option<T> {
    let flat = T::of(FLAT_CURVATURE);
    if k_min.abs() <= flat && k_max.abs() <= flat {
        return None;
    }
    // positive denominator keeps the umbilic limit signed correctly
    let denom = (k_max - k_min).abs();
    let s = -T::of(2.0) / T::PI() * ((k_min + k_max) / denom).atan();
    Some(s.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeIndexMap<T> {
    pub width: usize,
    pub height: usize,
    /// Shape index, zero where undefined.
    pub s: Vec<T>,
    pub class: Vec<ShapeClass>,
    /// Garment pixels with a curvature estimate.
    pub valid: Vec<bool>,
}

impl<T: Real> ShapeIndexMap<T> {
    #[inline]
    pub fn class_at(&self, x: usize, y: usize) -> ShapeClass {
        self.class[y * self.width + x]
    }

    /// Debug raster: class index x 25 (undefined = 225, off-mask = 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let samples: Vec<u8> = self
            .class
            .iter()
            .zip(&self.valid)
            .map(|(c, &v)| if v { c.index() as u8 * 25 } else { 255 })
            .collect();
        crate::depthio::encode_pgm8(self.width, self.height, &samples)
    }
}

pub fn shape_index<T: Real>(cm: &CurvatureMap<T>, quant: Quantization) -> ShapeIndexMap<T> {
    let n = cm.width * cm.height;
    let mut s = vec![T::zero(); n];
    let mut class = vec![ShapeClass::Undefined; n];
    for i in 0..n {
        if !cm.valid[i] {
            continue;
        }
        if let Some(v) = shape_index_value(cm.k_min[i], cm.k_max[i]) {
            s[i] = v;
            class[i] = quant.classify(v);
        }
    }
    ShapeIndexMap {
        width: cm.width,
        height: cm.height,
        s,
        class,
        valid: cm.valid.clone(),
    }
}

/// Replaces each valid pixel's class with the most frequent defined class in
/// its `window x window` neighbourhood (clipped at the border). Ties go to
/// the lowest class index; pixels with no defined neighbour become
/// undefined. The shape-index values are left untouched.
pub fn majority_rank_filter<T: Real>(sim: &ShapeIndexMap<T>, window: usize) -> Result<ShapeIndexMap<T>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "majority filter window must be odd and >= 3, got {window}"
        )));
    }
    let (w, h) = (sim.width, sim.height);
    let r = window / 2;
    let mut out = sim.clone();
    let mut votes = [0u32; 9];
    for y in 0..h {
        for x in 0..w {
            if !sim.valid[y * w + x] {
                continue;
            }
            votes.fill(0);
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let c = sim.class[yy * w + xx];
                    if sim.valid[yy * w + xx] && c != ShapeClass::Undefined {
                        votes[c.index()] += 1;
                    }
                }
            }
            let (best, &count) = votes
                .iter()
                .enumerate()
                .fold((0, &0), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            out.class[y * w + x] = if count == 0 {
                ShapeClass::Undefined
            } else {
                ShapeClass::from_index(best)
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{fit_surface_piecewise, PiecewiseConfig};
    use crate::depthio::DepthMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn curvature_of(dm: &DepthMap<f64>) -> CurvatureMap<f64> {
        let s = fit_surface_piecewise(dm, &PiecewiseConfig::default()).unwrap();
        principal_curvatures(&s, 1.0)
    }

    #[test]
    fn plane_has_zero_curvature() {
        let dm = DepthMap::from_fn(48, 40, |x, y| 100.0 + 0.5 * x as f64 - 0.25 * y as f64);
        let cm = curvature_of(&dm);
        for i in 0..48 * 40 {
            assert!(cm.valid[i]);
            assert!(cm.k_min[i].abs() < 1e-9 && cm.k_max[i].abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_cap_curvature() {
        let r = 100.0;
        let dm = DepthMap::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 32.0, y as f64 - 32.0);
            (r * r - dx * dx - dy * dy).sqrt()
        });
        let cm = curvature_of(&dm);
        let (kmin, kmax) = cm.at(32, 32).unwrap();
        // frozen analytic value: -1/R for a raised sphere
        for k in [kmin, kmax] {
            assert!((k + 1.0 / r).abs() < 0.02 / r, "{k}");
        }
    }

    #[test]
    fn cylinder_crest_curvature() {
        let r = 50.0;
        let dm = DepthMap::from_fn(64, 64, |x, _| {
            let dx = x as f64 - 32.0;
            (r * r - dx * dx).sqrt()
        });
        let cm = curvature_of(&dm);
        let (kmin, kmax) = cm.at(32, 20).unwrap();
        assert!((kmin + 1.0 / r).abs() < 0.02 / r);
        assert!(kmax.abs() < 1e-6);
        assert!(kmin <= kmax);
    }

    #[test]
    fn ordering_invariant_on_random_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dm = DepthMap::from_fn(64, 64, |_, _| rng.random_range(0.0..20.0));
        let cm = curvature_of(&dm);
        for i in 0..64 * 64 {
            assert!(cm.k_min[i] <= cm.k_max[i]);
        }
    }

    #[test]
    fn shape_index_examples() {
        assert_eq!(shape_index_value(-1.0, 1.0), Some(0.0));
        let s = shape_index_value(0.0, 1.0).unwrap();
        assert!((s - (2.0 / PI) * (-1.0f64).atan()).abs() < 1e-15);
        assert!((s + 0.5).abs() < 1e-15);
        assert_eq!(shape_index_value(2.0, 2.0), Some(-1.0));
        assert_eq!(shape_index_value(-2.0, -2.0), Some(1.0));
        assert_eq!(shape_index_value(0.0, 0.0), None);
    }

    #[test]
    fn shape_index_f32() {
        let s: f32 = shape_index_value(-0.5f32, 0.5).unwrap();
        assert!(s.abs() < 1e-7);
    }

    #[test]
    fn quantisation_boundaries() {
        for q in [Quantization::Uniform, Quantization::Koenderink] {
            let bps = q.breakpoints();
            for (k, &b) in bps.iter().enumerate() {
                assert_eq!(q.classify(b - 1e-12).index(), k);
                assert_eq!(q.classify(b).index(), k + 1);
            }
            assert_eq!(q.classify(-1.0), ShapeClass::Cup);
            assert_eq!(q.classify(1.0), ShapeClass::Cap);
        }
        assert_eq!(Quantization::Uniform.classify(0.5), ShapeClass::Ridge);
        assert_eq!(Quantization::Uniform.classify(0.0), ShapeClass::Saddle);
    }

    fn class_map(w: usize, h: usize, classes: Vec<ShapeClass>) -> ShapeIndexMap<f64> {
        ShapeIndexMap {
            width: w,
            height: h,
            s: vec![0.0; w * h],
            valid: vec![true; w * h],
            class: classes,
        }
    }

    #[test]
    fn majority_filter_fixed_point_and_outlier() {
        let uniform = class_map(5, 5, vec![ShapeClass::Ridge; 25]);
        assert_eq!(majority_rank_filter(&uniform, 3).unwrap(), uniform);

        let mut c = vec![ShapeClass::Dome; 25];
        c[12] = ShapeClass::Cup;
        let out = majority_rank_filter(&class_map(5, 5, c), 3).unwrap();
        assert!(out.class.iter().all(|&c| c == ShapeClass::Dome));
        assert!(matches!(majority_rank_filter(&uniform, 4), Err(Error::Config(_))));
        assert!(matches!(majority_rank_filter(&uniform, 1), Err(Error::Config(_))));
    }

    #[test]
    fn majority_filter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (w, h) = (23, 17);
        let classes: Vec<ShapeClass> = (0..w * h)
            .map(|_| ShapeClass::from_index(rng.random_range(0..10)))
            .collect();
        let mut sim = class_map(w, h, classes);
        for i in (0..w * h).step_by(11) {
            sim.valid[i] = false;
        }
        for window in [3, 5] {
            let out = majority_rank_filter(&sim, window).unwrap();
            let r = window as isize / 2;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let i = (y * w as isize + x) as usize;
                    if !sim.valid[i] {
                        assert_eq!(out.class[i], sim.class[i]);
                        continue;
                    }
                    // mode by explicit list counting, smallest class on ties
                    let mut list = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                                continue;
                            }
                            let j = (yy * w as isize + xx) as usize;
                            if sim.valid[j] && sim.class[j] != ShapeClass::Undefined {
                                list.push(sim.class[j]);
                            }
                        }
                    }
                    let expected = ShapeClass::DEFINED
                        .iter()
                        .map(|c| (list.iter().filter(|&&v| v == *c).count(), *c))
                        .filter(|(n, _)| *n > 0)
                        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                        .map(|(_, c)| c)
                        .unwrap_or(ShapeClass::Undefined);
                    assert_eq!(out.class[i], expected, "pixel ({x},{y}) window {window}");
                }
            }
        }
    }

    #[test]
    fn majority_filter_idempotent_on_outlier_maps() {
        let mut c = vec![ShapeClass::Saddle; 49];
        c[24] = ShapeClass::Cap;
        c[3] = ShapeClass::Rut;
        let once = majority_rank_filter(&class_map(7, 7, c), 3).unwrap();
        let twice = majority_rank_filter(&once, 3).unwrap();
        assert_eq!(once, twice);
    }
}
