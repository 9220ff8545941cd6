//! Binary soft-margin SVM trained by SMO with maximal-violating-pair working
//! set selection.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Kernel matrices up to this many samples are precomputed in full.
pub const FULL_GRAM_LIMIT: usize = 4096;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval<T: Real>(&self, a: &[T], b: &[T]) -> T {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(&p, &q)| p * q).sum(),
            Kernel::Rbf { gamma } => {
                let d2: T = a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum();
                (-T::of(gamma) * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoConfig {
    pub c: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub eps: f64,
    /// Row-cache capacity when the Gram matrix is not precomputed.
    pub cache_rows: usize,
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            eps: 1e-3,
            cache_rows: 1024,
        }
    }
}

/// Kernel rows, either all precomputed or computed on demand behind an LRU.
pub struct KernelSource<'a, T> {
    x: &'a [Vec<T>],
    kernel: Kernel,
    full: Option<Arc<Vec<Arc<[T]>>>>,
    cache: HashMap<usize, (Arc<[T]>, u64)>,
    capacity: usize,
    clock: u64,
}

impl<'a, T: Real> KernelSource<'a, T> {
    /// Precomputes all rows when `x.len() <= FULL_GRAM_LIMIT`.
    pub fn new(x: &'a [Vec<T>], kernel: Kernel, cache_rows: usize) -> Self {
        let full = (x.len() <= FULL_GRAM_LIMIT).then(|| Arc::new(full_rows(x, kernel)));
        Self {
            x,
            kernel,
            full,
            cache: HashMap::new(),
            capacity: cache_rows.max(2),
            clock: 0,
        }
    }

    /// Shares an already computed Gram matrix.
    fn sharing(&self) -> Self {
        Self {
            x: self.x,
            kernel: self.kernel,
            full: self.full.clone(),
            cache: HashMap::new(),
            capacity: self.capacity,
            clock: 0,
        }
    }

    pub fn is_precomputed(&self) -> bool {
        self.full.is_some()
    }

    pub fn row(&mut self, i: usize) -> Arc<[T]> {
        if let Some(full) = &self.full {
            return full[i].clone();
        }
        self.clock += 1;
        if let Some(entry) = self.cache.get_mut(&i) {
            entry.1 = self.clock;
            return entry.0.clone();
        }
        if self.cache.len() >= self.capacity {
            let oldest = *self.cache.iter().min_by_key(|(_, v)| v.1).map(|(k, _)| k).unwrap();
            self.cache.remove(&oldest);
        }
        let row: Arc<[T]> = self.x.iter().map(|b| self.kernel.eval(&self.x[i], b)).collect();
        self.cache.insert(i, (row.clone(), self.clock));
        row
    }

    pub fn diag(&self, i: usize) -> T {
        self.kernel.eval(&self.x[i], &self.x[i])
    }
}

fn full_rows<T: Real>(x: &[Vec<T>], kernel: Kernel) -> Vec<Arc<[T]>> {
    use rayon::prelude::*;
    let n = x.len();
    let mut k = vec![T::zero(); n * n];
    k.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for j in 0..n {
            row[j] = kernel.eval(&x[i], &x[j]);
        }
    });
    k.chunks(n.max(1)).take(n).map(Arc::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryModel<T> {
    pub support: Vec<Vec<T>>,
    /// `alpha_i * y_i` per support vector.
    pub coef: Vec<T>,
    pub bias: T,
}

impl<T: Real> BinaryModel<T> {
    pub fn decision(&self, kernel: &Kernel, x: &[T]) -> T {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, &c)| c * kernel.eval(s, x))
            .sum::<T>()
            + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    /// Largest `m(alpha) - M(alpha)` gap at exit.
    pub kkt_gap: f64,
    pub converged: bool,
    /// Dual objective `e'a - a'Qa/2` after every update.
    pub dual_objective: Vec<f64>,
    /// Full multiplier vector, training order.
    pub alpha: Vec<f64>,
}

/// Trains one binary model. `y` holds +1 / -1.
pub fn train_binary<T: Real>(
    x: &[Vec<T>],
    y: &[i8],
    kernel: Kernel,
    cfg: &SmoConfig,
) -> Result<(BinaryModel<T>, TrainReport)> {
    let mut src = KernelSource::new(x, kernel, cfg.cache_rows);
    train_with_source(&mut src, y, cfg)
}

pub(crate) fn train_with_source<T: Real>(
    src: &mut KernelSource<'_, T>,
    y: &[i8],
    cfg: &SmoConfig,
) -> Result<(BinaryModel<T>, TrainReport)> {
    let x = src.x;
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", y.len())));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::Config(format!("SVM cost must be positive, got {}", cfg.c)));
    }
    if !y.contains(&1) || !y.contains(&-1) {
        return Err(Error::Invalid("binary SVM needs both positive and negative samples".into()));
    }
    let c = cfg.c;
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let qd: Vec<f64> = (0..n).map(|i| src.diag(i).as_f64()).collect();
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let max_iter = (100 * n).max(10_000_000);
    let mut iterations = 0;
    let mut dual = Vec::new();
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi < 0.0 && a < c) || (yi > 0.0 && a > 0.0);
    let gap;
    loop {
        let (mut gmax, mut i_sel) = (f64::NEG_INFINITY, usize::MAX);
        let (mut gmin, mut j_sel) = (f64::INFINITY, usize::MAX);
        for t in 0..n {
            let v = -yf[t] * grad[t];
            if up(alpha[t], yf[t]) && v > gmax {
                gmax = v;
                i_sel = t;
            }
            if low(alpha[t], yf[t]) && v < gmin {
                gmin = v;
                j_sel = t;
            }
        }
        if i_sel == usize::MAX || j_sel == usize::MAX || gmax - gmin < cfg.eps || iterations >= max_iter {
            gap = if i_sel == usize::MAX || j_sel == usize::MAX { 0.0 } else { gmax - gmin };
            break;
        }
        iterations += 1;
        let (i, j) = (i_sel, j_sel);
        let ki = src.row(i);
        let kj = src.row(j);
        let kij = ki[j].as_f64();
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if yf[i] != yf[j] {
            let quad = (qd[i] + qd[j] - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            // Q_it = y_i y_t K_it
            grad[t] += yf[t] * (yf[i] * ki[t].as_f64() * di + yf[j] * kj[t].as_f64() * dj);
        }
        dual.push(alpha.iter().zip(&grad).map(|(a, g)| a - 0.5 * a * (g + 1.0)).sum());
    }
    let converged = gap < cfg.eps;
    if !converged {
        log::warn!("SMO stopped after {iterations} iterations with KKT gap {gap:.3e}");
    }
    let rho = bias_rho(&alpha, &grad, &yf, c);
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support.push(x[t].clone());
            coef.push(T::of(alpha[t] * yf[t]));
        }
    }
    Ok((
        BinaryModel {
            support,
            coef,
            bias: T::of(-rho),
        },
        TrainReport {
            iterations,
            kkt_gap: gap,
            converged,
            dual_objective: dual,
            alpha,
        },
    ))
}

/// Offset from free multipliers, or the midpoint of the feasible interval.
fn bias_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Trains one model per class (`labels[i]` is a class index) against the
/// rest, sharing one kernel matrix.
pub(crate) fn train_one_vs_all<T: Real>(
    x: &[Vec<T>],
    labels: &[usize],
    n_classes: usize,
    kernel: Kernel,
    cfg: &SmoConfig,
) -> Result<Vec<(BinaryModel<T>, TrainReport)>> {
    use rayon::prelude::*;
    let base = KernelSource::new(x, kernel, cfg.cache_rows);
    let shared: Vec<KernelSource<'_, T>> = (0..n_classes).map(|_| base.sharing()).collect();
    shared
        .into_par_iter()
        .enumerate()
        .map(|(class, mut src)| {
            let y: Vec<i8> = labels.iter().map(|&l| if l == class { 1 } else { -1 }).collect();
            train_with_source(&mut src, &y, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kkt_residual(x: &[Vec<f64>], y: &[i8], kernel: Kernel, m: &BinaryModel<f64>, r: &TrainReport, c: f64) -> f64 {
        // complementary slackness per sample, tolerance-scaled
        let mut worst = 0.0f64;
        for t in 0..x.len() {
            let f = y[t] as f64 * m.decision(&kernel, &x[t]);
            let a = r.alpha[t];
            let v = if a <= 0.0 {
                (1.0 - f).max(0.0)
            } else if a >= c {
                (f - 1.0).max(0.0)
            } else {
                (f - 1.0).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    #[test]
    fn two_point_analytic_dual() {
        let x = vec![vec![-1.0f64, 0.0], vec![1.0, 0.0]];
        let y = [-1, 1];
        let cfg = SmoConfig { c: 1e6, ..Default::default() };
        let (m, r) = train_binary(&x, &y, Kernel::Linear, &cfg).unwrap();
        // dual: max 2a - 2a^2 at a = 1/2; w = (1, 0), b = 0
        assert!((r.alpha[0] - 0.5).abs() < 1e-6 && (r.alpha[1] - 0.5).abs() < 1e-6);
        assert!(m.bias.abs() < 1e-6);
        assert_eq!(m.support.len(), 2);
        assert!(m.decision(&Kernel::Linear, &[0.0, 3.0]).abs() < 1e-6);
    }

    #[test]
    fn xor_rbf_separates() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = [1, 1, -1, -1];
        let k = Kernel::Rbf { gamma: 1.0 };
        let (m, r) = train_binary(&x, &y, k, &SmoConfig::default()).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert!(m.decision(&k, xi) * yi as f64 > 0.0);
        }
        assert!(r.converged && r.kkt_gap < 1e-3);
        assert!(kkt_residual(&x, &y, k, &m, &r, 10.0) < 1e-3);
        assert_eq!(k.eval(&[3.0, -2.0], &[3.0, -2.0]), 1.0);
    }

    fn blobs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(vec![s * 0.7 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            y.push(s as i8);
        }
        (x, y)
    }

    #[test]
    fn dual_feasibility_and_monotone_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (x, y) = blobs(&mut rng, 60);
            let cfg = SmoConfig { c: 2.0, ..Default::default() };
            let k = Kernel::Rbf { gamma: 0.5 };
            let (m, r) = train_binary(&x, &y, k, &cfg).unwrap();
            assert!(r.alpha.iter().all(|&a| (0.0..=2.0).contains(&a)));
            let balance: f64 = r.alpha.iter().zip(&y).map(|(a, &b)| a * b as f64).sum();
            assert!(balance.abs() < 1e-6);
            assert!(r.dual_objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            assert!(kkt_residual(&x, &y, k, &m, &r, 2.0) < 2e-3);
        }
    }

    #[test]
    fn duplicated_points_keep_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = blobs(&mut rng, 30);
        let k = Kernel::Rbf { gamma: 0.5 };
        let cfg = SmoConfig { c: 10.0, eps: 1e-6, ..Default::default() };
        let (m1, _) = train_binary(&x, &y, k, &cfg).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<i8> = y.iter().chain(&y).copied().collect();
        // duplicating every point is equivalent to halving the per-point cost
        let cfg2 = SmoConfig { c: 5.0, ..cfg };
        let (m2, _) = train_binary(&x2, &y2, k, &cfg2).unwrap();
        for _ in 0..50 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert!((m1.decision(&k, &p) - m2.decision(&k, &p)).abs() < 1e-3);
        }
    }

    #[test]
    fn lazy_rows_match_precomputed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = blobs(&mut rng, 40);
        let k = Kernel::Rbf { gamma: 0.3 };
        let cfg = SmoConfig { cache_rows: 3, ..Default::default() };
        let (full, _) = train_binary(&x, &y, k, &cfg).unwrap();
        let mut lazy_src = KernelSource {
            x: &x,
            kernel: k,
            full: None,
            cache: HashMap::new(),
            capacity: 3,
            clock: 0,
        };
        assert!(!lazy_src.is_precomputed());
        let (lazy, _) = train_with_source(&mut lazy_src, &y, &cfg).unwrap();
        assert_eq!(full, lazy);
    }

    #[test]
    fn rejects_single_class() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            train_binary(&x, &[1, 1], Kernel::Linear, &SmoConfig::default()),
            Err(Error::Invalid(_))
        ));
        assert!(train_binary(&x, &[1, -1], Kernel::Linear, &SmoConfig { c: 0.0, ..Default::default() }).is_err());
    }
}
