//! One-vs-all kernel SVM, confusion matrices and the repeated grouped
//! cross-validation protocol.

pub mod cv;
pub mod svm;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coding::{Codebook, LLCB_MAGIC};
use crate::error::{Error, Result};
use crate::features::{put_str, ByteReader};
use crate::scalar::Real;

pub use cv::{crossval, crossval_descriptors, repeat_seed, CvReport};
pub use svm::{train_binary, BinaryModel, Kernel, SmoConfig, TrainReport};

/// Per-dimension affine map onto `[0, 1]` over the training vectors.
/// Dimensions that are constant in training map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling<T> {
    pub offset: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> FeatureScaling<T> {
    pub fn fit(x: &[Vec<T>]) -> Result<Self> {
        let first = x.first().ok_or_else(|| Error::Invalid("no vectors to fit a scaling on".into()))?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for v in x {
            if v.len() != lo.len() {
                return Err(Error::Dimension("training vectors differ in length".into()));
            }
            for ((l, h), &e) in lo.iter_mut().zip(hi.iter_mut()).zip(v) {
                *l = l.min(e);
                *h = h.max(e);
            }
        }
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { T::one() / (h - l) } else { T::zero() })
            .collect();
        Ok(Self { offset: lo, scale })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(&v, (&o, &s))| (v - o) * s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel<T> {
    pub classes: Vec<String>,
    pub kernel: Kernel,
    pub c: f64,
    pub dim: usize,
    /// Applied to every input before the kernel, when present.
    pub scaling: Option<FeatureScaling<T>>,
    pub models: Vec<BinaryModel<T>>,
}

impl<T: Real> SvmModel<T> {
    /// One binary model per class. `labels[i]` indexes `classes`.
    pub fn train(
        x: &[Vec<T>],
        labels: &[usize],
        classes: Vec<String>,
        kernel: Kernel,
        cfg: &SmoConfig,
    ) -> Result<(Self, Vec<TrainReport>)> {
        if x.len() != labels.len() {
            return Err(Error::Dimension(format!("{} vectors for {} labels", x.len(), labels.len())));
        }
        if classes.len() < 2 {
            return Err(Error::Invalid("at least two classes are needed".into()));
        }
        let dim = x.first().map_or(0, Vec::len);
        if x.iter().any(|v| v.len() != dim) {
            return Err(Error::Dimension("training vectors differ in length".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Invalid(format!("label index {l} outside {} classes", classes.len())));
        }
        for (ci, name) in classes.iter().enumerate() {
            if !labels.contains(&ci) {
                return Err(Error::Invalid(format!("class '{name}' has no training samples")));
            }
        }
        let trained = svm::train_one_vs_all(x, labels, classes.len(), kernel, cfg)?;
        let (models, reports) = trained.into_iter().unzip();
        Ok((
            Self {
                classes,
                kernel,
                c: cfg.c,
                dim,
                scaling: None,
                models,
            },
            reports,
        ))
    }

    pub fn decision_values(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "feature vector has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        let scaled;
        let x = match &self.scaling {
            Some(s) => {
                scaled = s.apply(x);
                &scaled[..]
            }
            None => x,
        };
        Ok(self.models.iter().map(|m| m.decision(&self.kernel, x)).collect())
    }

    /// Winning class index (ties to the lowest index) and all decision values.
    pub fn predict(&self, x: &[T]) -> Result<(usize, Vec<T>)> {
        let d = self.decision_values(x)?;
        Ok((argmax(&d), d))
    }

    pub fn predict_all(&self, xs: &[Vec<T>]) -> Result<Vec<(usize, Vec<T>)>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_bytes(&self, meta: &str, codebook: Option<(&Codebook<T>, &str)>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SVMM_MAGIC);
        put_str(&mut out, meta);
        match self.kernel {
            Kernel::Linear => {
                out.push(0);
                out.extend_from_slice(&0f64.to_le_bytes());
            }
            Kernel::Rbf { gamma } => {
                out.push(1);
                out.extend_from_slice(&gamma.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.c.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for (name, m) in self.classes.iter().zip(&self.models) {
            put_str(&mut out, name);
            out.extend_from_slice(&m.bias.as_f64().to_le_bytes());
            out.extend_from_slice(&(m.support.len() as u32).to_le_bytes());
            for (sv, c) in m.support.iter().zip(&m.coef) {
                out.extend_from_slice(&c.as_f64().to_le_bytes());
                for v in sv {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        match &self.scaling {
            Some(s) => {
                out.push(1);
                for v in s.offset.iter().chain(&s.scale) {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
            None => out.push(0),
        }
        match codebook {
            Some((cb, cb_meta)) => {
                out.push(1);
                out.extend_from_slice(&cb.to_bytes(cb_meta)[LLCB_MAGIC.len()..]);
            }
            None => out.push(0),
        }
        out
    }

    /// Model, provenance string and the embedded codebook if any.
    #[allow(clippy::type_complexity)]
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String, Option<(Codebook<T>, String)>)> {
        let mut r = ByteReader::new(bytes);
        if r.take(SVMM_MAGIC.len())? != SVMM_MAGIC {
            return Err(Error::Format("missing SVMM1 header".into()));
        }
        let meta = r.string()?;
        let tag = r.take(1)?[0];
        let gamma = r.f64()?;
        let kernel = match tag {
            0 => Kernel::Linear,
            1 => Kernel::Rbf { gamma },
            t => return Err(Error::Format(format!("unknown kernel tag {t}"))),
        };
        let c = r.f64()?;
        let dim = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let mut classes = Vec::with_capacity(n_classes);
        let mut models = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            classes.push(r.string()?);
            let bias = T::of(r.f64()?);
            let n_sv = r.u32()? as usize;
            let mut support = Vec::with_capacity(n_sv);
            let mut coef = Vec::with_capacity(n_sv);
            for _ in 0..n_sv {
                coef.push(T::of(r.f64()?));
                support.push((0..dim).map(|_| r.f64().map(T::of)).collect::<Result<Vec<T>>>()?);
            }
            models.push(BinaryModel { support, coef, bias });
        }
        let scaling = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut read = || (0..dim).map(|_| r.f64().map(T::of)).collect::<Result<Vec<T>>>();
                let offset = read()?;
                let scale = read()?;
                Some(FeatureScaling { offset, scale })
            }
            t => return Err(Error::Format(format!("unknown scaling flag {t}"))),
        };
        let codebook = match r.take(1)?[0] {
            0 => None,
            1 => Some(Codebook::read_from(&mut r)?),
            t => return Err(Error::Format(format!("unknown codebook flag {t}"))),
        };
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        Ok((
            Self {
                classes,
                kernel,
                c,
                dim,
                scaling,
                models,
            },
            meta,
            codebook,
        ))
    }

    pub fn save(&self, path: &Path, meta: &str, codebook: Option<(&Codebook<T>, &str)>) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes(meta, codebook)))
            .map_err(|e| Error::io(path, e))
    }

    #[allow(clippy::type_complexity)]
    pub fn load(path: &Path) -> Result<(Self, String, Option<(Codebook<T>, String)>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const SVMM_MAGIC: &[u8; 5] = b"SVMM1";

/// Index of the largest value, first one on ties.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

// ---------------------------------------------------------------------------
// Confusion matrix

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// Row = true class, column = predicted class.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        let n = self.n();
        self.counts[truth * n + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n() + predicted]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Consistency("confusion matrices cover different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.n()).map(|j| self.get(truth, j)).sum()
    }

    /// Diagonal over row sum; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.n())
            .map(|i| {
                let r = self.row_sum(i);
                (r > 0).then(|| self.get(i, i) as f64 / r as f64)
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    /// Mean of the defined per-class accuracies.
    pub fn macro_accuracy(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(c);
            for j in 0..self.n() {
                s.push_str(&format!(",{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty confusion CSV".into()))?;
        let classes: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut cm = Self::new(classes);
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if i >= cm.n() || cells.len() != cm.n() + 1 || cells[0].trim() != cm.classes[i] {
                return Err(Error::Format(format!("malformed confusion row {}", i + 1)));
            }
            for (j, cell) in cells[1..].iter().enumerate() {
                let n = cm.n();
                cm.counts[i * n + j] = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad count '{cell}'")))?;
            }
        }
        Ok(cm)
    }

    /// Per-class and overall accuracy table.
    pub fn accuracy_report(&self) -> String {
        let mut s = String::from("class,samples,accuracy\n");
        for (i, (c, a)) in self.classes.iter().zip(self.per_class_accuracy()).enumerate() {
            let a = a.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("{c},{},{a}\n", self.row_sum(i)));
        }
        let overall = self.overall_accuracy().map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!("overall,{},{overall}\n", self.total()));
        s
    }
}

// ---------------------------------------------------------------------------
// Folds

/// Fold index per sample for one repeat: each class's item ids are shuffled
/// with a seeded generator and dealt round-robin to the folds, so every item
/// sits in exactly one fold.
pub fn grouped_folds(
    labels: &[usize],
    items: &[String],
    classes: &[String],
    folds: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be at least 2, got {folds}")));
    }
    if labels.len() != items.len() {
        return Err(Error::Dimension("labels and item ids differ in length".into()));
    }
    let mut item_class: BTreeMap<&str, usize> = BTreeMap::new();
    for (item, &l) in items.iter().zip(labels) {
        if let Some(&prev) = item_class.get(item.as_str()) {
            if prev != l {
                return Err(Error::Consistency(format!(
                    "item '{item}' appears under classes '{}' and '{}'",
                    classes[prev], classes[l]
                )));
            }
        }
        item_class.insert(item, l);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (ci, name) in classes.iter().enumerate() {
        let mut ids: Vec<&str> = item_class.iter().filter(|(_, &c)| c == ci).map(|(&i, _)| i).collect();
        if ids.len() < folds {
            return Err(Error::Config(format!(
                "class '{name}' has {} distinct items, {folds} folds need at least {folds}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        for (k, id) in ids.into_iter().enumerate() {
            fold_of.insert(id, k % folds);
        }
    }
    Ok(items.iter().map(|i| fold_of[i.as_str()]).collect())
}

/// Item ids present on both sides of a split (empty for a valid split).
pub fn leaked_items(items: &[String], fold: &[usize], test_fold: usize) -> BTreeSet<String> {
    let train: BTreeSet<&String> = items.iter().zip(fold).filter(|(_, &f)| f != test_fold).map(|(i, _)| i).collect();
    items
        .iter()
        .zip(fold)
        .filter(|(i, &f)| f == test_fold && train.contains(i))
        .map(|(i, _)| i.clone())
        .collect()
}
