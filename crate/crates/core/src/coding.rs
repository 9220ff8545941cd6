//! Codebook learning, cluster-size atom weights, weighted locality-constrained
//! linear coding and sum pooling of local descriptors.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{put_str, ByteReader};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::scalar::Real;

pub const DEFAULT_SIGMA_W: f64 = 0.005;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_NEIGHBOURS: usize = 5;
pub const MAX_LLOYD_ITERATIONS: usize = 100;
const GRAM_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    dim: usize,
    /// `K x dim`, row-major.
    atoms: Vec<T>,
    counts: Vec<u64>,
    sigma_w: f64,
    weights: Vec<T>,
}

/// `1 / (1 + exp(-sigma_w (n_j - mean)))` per atom.
pub fn atom_weights<T: Real>(counts: &[u64], sigma_w: f64, mean_count: f64) -> Vec<T> {
    counts
        .iter()
        .map(|&n| T::of(1.0 / (1.0 + (-sigma_w * (n as f64 - mean_count)).exp())))
        .collect()
}

impl<T: Real> Codebook<T> {
    pub fn new(dim: usize, atoms: Vec<T>, counts: Vec<u64>, sigma_w: f64) -> Result<Self> {
        if dim == 0 || atoms.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} atom values do not split into rows of {dim}", atoms.len())));
        }
        let k = atoms.len() / dim;
        if k < 2 {
            return Err(Error::Invalid(format!("codebook needs at least 2 atoms, got {k}")));
        }
        if counts.len() != k {
            return Err(Error::Dimension(format!("{} counts for {k} atoms", counts.len())));
        }
        if atoms.iter().any(|a| !a.is_finite()) || !sigma_w.is_finite() {
            return Err(Error::Numeric("codebook contains non-finite values".into()));
        }
        let total: u64 = counts.iter().sum();
        let weights = atom_weights(&counts, sigma_w, total as f64 / k as f64);
        Ok(Self {
            dim,
            atoms,
            counts,
            sigma_w,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, j: usize) -> &[T] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[T] {
        &self.atoms
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    pub fn mean_count(&self) -> f64 {
        self.counts.iter().sum::<u64>() as f64 / self.len() as f64
    }

    /// Same atoms and counts with replaced weights (for experiments).
    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::Dimension("weight count differs from atom count".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Index of the nearest atom (ties to the lowest index) and its squared
    /// distance.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        (0..self.len())
            .map(|j| (j, sq_dist(x, self.atom(j))))
            .fold((0, T::infinity()), |best, c| if c.1 < best.1 { c } else { best })
    }

    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LLCB_MAGIC);
        put_str(&mut out, meta);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.sigma_w.to_le_bytes());
        for a in &self.atoms {
            out.extend_from_slice(&a.as_f64().to_le_bytes());
        }
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Parses a codebook and its provenance string. Weights are recomputed
    /// from the stored counts.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = ByteReader::new(bytes);
        if r.take(LLCB_MAGIC.len())? != LLCB_MAGIC {
            return Err(Error::Format("missing LLCB1 header".into()));
        }
        let cb = Self::read_from(&mut r)?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after codebook".into()));
        }
        Ok(cb)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<(Self, String)> {
        let meta = r.string()?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let sigma_w = r.f64()?;
        let atoms = (0..k * dim).map(|_| r.f64().map(T::of)).collect::<Result<Vec<T>>>()?;
        let counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
        Ok((Self::new(dim, atoms, counts, sigma_w)?, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes(meta)))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) const LLCB_MAGIC: &[u8; 5] = b"LLCB1";

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum()
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone)]
pub struct KmeansOutcome<T> {
    pub codebook: Codebook<T>,
    pub iterations: usize,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment no
/// longer changes (at most [`MAX_LLOYD_ITERATIONS`]).
pub fn kmeans<T: Real, S: AsRef<[T]> + Sync>(
    samples: &[S],
    k: usize,
    seed: u64,
    sigma_w: f64,
) -> Result<KmeansOutcome<T>> {
    let n = samples.len();
    if k < 2 {
        return Err(Error::Config(format!("codebook size must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::Invalid(format!("{n} descriptors cannot train {k} atoms")));
    }
    let dim = samples[0].as_ref().len();
    if dim == 0 || samples.iter().any(|s| s.as_ref().len() != dim) {
        return Err(Error::Dimension("descriptors differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = seed_plus_plus(samples, k, dim, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let nearest: Vec<(usize, T)> = samples
            .par_iter()
            .map(|s| nearest_row(s.as_ref(), &centres, dim))
            .collect();
        objective.push(nearest.iter().map(|p| p.1.as_f64()).sum());
        let changed = nearest.iter().zip(&assign).any(|(p, &a)| p.0 != a);
        for (a, p) in assign.iter_mut().zip(&nearest) {
            *a = p.0;
        }
        if !changed || iterations == MAX_LLOYD_ITERATIONS {
            break;
        }
        iterations += 1;
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(s.as_ref()) {
                *acc += v;
            }
        }
        let mut dist: Vec<T> = nearest.iter().map(|p| p.1).collect();
        for j in 0..k {
            let row = &mut centres[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let c = T::of_usize(counts[j]);
                for (r, &s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *r = s / c;
                }
            } else {
                // empty cluster: restart at the worst-represented sample
                let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                log::debug!("k-means atom {j} empty; reseeded from sample {far}");
                row.copy_from_slice(samples[far].as_ref());
                dist[far] = T::neg_infinity();
                assign[far] = usize::MAX;
            }
        }
    }
    let mut counts = vec![0u64; k];
    for &a in &assign {
        counts[a] += 1;
    }
    Ok(KmeansOutcome {
        codebook: Codebook::new(dim, centres, counts, sigma_w)?,
        iterations,
        objective,
    })
}

fn nearest_row<T: Real>(x: &[T], centres: &[T], dim: usize) -> (usize, T) {
    centres
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, c)| (j, sq_dist(x, c)))
        .fold((0, T::infinity()), |best, c| if c.1 < best.1 { c } else { best })
}

fn seed_plus_plus<T: Real, S: AsRef<[T]> + Sync>(samples: &[S], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n = samples.len();
    let mut centres = Vec::with_capacity(k * dim);
    centres.extend_from_slice(samples[rng.random_range(0..n)].as_ref());
    let mut d2: Vec<f64> = samples
        .iter()
        .map(|s| sq_dist(s.as_ref(), &centres[..dim]).as_f64())
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = samples[pick].as_ref().to_vec();
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s.as_ref(), &c).as_f64());
        }
        centres.extend(c);
    }
    centres
}

// ---------------------------------------------------------------------------
// LLC

#[derive(Debug, Clone, PartialEq)]
pub struct LlcCode<T> {
    pub indices: Vec<usize>,
    pub coefficients: Vec<T>,
    /// Codebook size.
    pub k_total: usize,
}

impl<T: Real> LlcCode<T> {
    pub fn dense(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.k_total];
        for (&i, &c) in self.indices.iter().zip(&self.coefficients) {
            v[i] += c;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlcConfig {
    pub neighbours: usize,
    pub lambda: f64,
}

impl Default for LlcConfig {
    fn default() -> Self {
        Self {
            neighbours: DEFAULT_NEIGHBOURS,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Indices of the `k` nearest atoms, ties broken by atom index.
pub fn nearest_atoms<T: Real>(x: &[T], cb: &Codebook<T>, k: usize) -> Vec<(usize, T)> {
    let mut d: Vec<(usize, T)> = (0..cb.len()).map(|j| (j, sq_dist(x, cb.atom(j)))).collect();
    d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// `||x - sum_j c_j b_j||^2 + lambda * sum_j (d_j w_j c_j)^2` over the
/// code's support.
pub fn llc_objective<T: Real>(x: &[T], cb: &Codebook<T>, code: &LlcCode<T>, lambda: f64) -> f64 {
    let mut r: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let mut penalty = 0.0;
    for (&j, &c) in code.indices.iter().zip(&code.coefficients) {
        let c = c.as_f64();
        for (ri, &b) in r.iter_mut().zip(cb.atom(j)) {
            *ri -= c * b.as_f64();
        }
        let d = sq_dist(x, cb.atom(j)).as_f64().sqrt();
        let w = cb.weights()[j].as_f64();
        penalty += (d * w * c).powi(2);
    }
    r.iter().map(|v| v * v).sum::<f64>() + lambda * penalty
}

/// Weighted LLC code of `x` on its `k` nearest atoms; coefficients sum to 1.
pub fn llc_encode<T: Real>(x: &[T], cb: &Codebook<T>, cfg: &LlcConfig) -> Result<LlcCode<T>> {
    if x.len() != cb.dim() {
        return Err(Error::Dimension(format!("descriptor has {} values, codebook {}", x.len(), cb.dim())));
    }
    let k = cfg.neighbours;
    if k == 0 || k > cb.len() {
        return Err(Error::Config(format!("llc neighbours must be in 1..={}, got {k}", cb.len())));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("llc lambda must be non-negative, got {}", cfg.lambda)));
    }
    let near = nearest_atoms(x, cb, k);
    if let Some(&(j, _)) = near.iter().find(|p| p.1 == T::zero()) {
        let mut coefficients = vec![T::zero(); k];
        coefficients[near.iter().position(|p| p.0 == j).unwrap()] = T::one();
        return Ok(LlcCode {
            indices: near.iter().map(|p| p.0).collect(),
            coefficients,
            k_total: cb.len(),
        });
    }
    // z_p = b_p - x, C = Z Z^T, then the locality penalty on the diagonal
    let z: Vec<Vec<T>> = near
        .iter()
        .map(|&(j, _)| cb.atom(j).iter().zip(x).map(|(&b, &v)| b - v).collect())
        .collect();
    let lambda = T::of(cfg.lambda);
    let mut c = vec![T::zero(); k * k];
    for p in 0..k {
        for q in p..k {
            let v: T = z[p].iter().zip(&z[q]).map(|(&a, &b)| a * b).sum();
            c[p * k + q] = v;
            c[q * k + p] = v;
        }
        let (j, d2) = near[p];
        let w = cb.weights()[j];
        c[p * k + p] += lambda * d2 * w * w;
    }
    let mut w = vec![T::one(); k];
    let mut l = c.clone();
    if !cholesky_in_place(&mut l, k, T::of(1e-12)) {
        let trace: T = (0..k).map(|i| c[i * k + i]).sum();
        let ridge = T::of(GRAM_REGULARIZATION) * if trace > T::zero() { trace } else { T::one() };
        l.copy_from_slice(&c);
        for i in 0..k {
            l[i * k + i] += ridge;
        }
        if !cholesky_in_place(&mut l, k, T::zero()) {
            return Err(Error::Numeric("LLC Gram matrix is not positive definite".into()));
        }
    }
    cholesky_solve(&l, k, &mut w, 1);
    let sum: T = w.iter().copied().sum();
    if !sum.is_finite() || sum == T::zero() {
        return Err(Error::Numeric("LLC coefficients do not normalise".into()));
    }
    Ok(LlcCode {
        indices: near.iter().map(|p| p.0).collect(),
        coefficients: w.iter().map(|&v| v / sum).collect(),
        k_total: cb.len(),
    })
}

pub fn llc_encode_all<T: Real, S: AsRef<[T]> + Sync>(
    descriptors: &[S],
    cb: &Codebook<T>,
    cfg: &LlcConfig,
) -> Result<Vec<LlcCode<T>>> {
    descriptors.par_iter().map(|d| llc_encode(d.as_ref(), cb, cfg)).collect()
}

pub fn sum_pool<T: Real>(codes: &[LlcCode<T>], k_total: usize) -> Result<Vec<T>> {
    let mut v = vec![T::zero(); k_total];
    for code in codes {
        if code.k_total != k_total {
            return Err(Error::Dimension(format!(
                "code for {} atoms pooled into {k_total}",
                code.k_total
            )));
        }
        for (&i, &c) in code.indices.iter().zip(&code.coefficients) {
            v[i] += c;
        }
    }
    Ok(v)
}

/// Post-pooling scaling of the coded block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolNorm {
    None,
    #[default]
    L2,
}

impl std::str::FromStr for PoolNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PoolNorm::None),
            "l2" => Ok(PoolNorm::L2),
            other => Err(Error::Config(format!("unknown pool normalisation '{other}'"))),
        }
    }
}

impl std::fmt::Display for PoolNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolNorm::None => "none",
            PoolNorm::L2 => "l2",
        })
    }
}

pub fn apply_pool_norm<T: Real>(v: &mut [T], norm: PoolNorm) {
    if norm == PoolNorm::L2 {
        crate::features::l2_normalize(v);
    }
}
