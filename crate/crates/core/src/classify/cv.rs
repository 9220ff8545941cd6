//! Repeated, class-stratified, item-grouped k-fold cross-validation.

use crate::classify::{grouped_folds, leaked_items, ConfusionMatrix};
use crate::config::PipelineConfig;
use crate::depthio::DatasetManifest;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::pipeline::{describe_manifest, fit_codebook, fused_vectors, train_classifier, ImageDescriptors};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub features: FeatureSet,
    pub config_hash: String,
    /// Accuracy of each repeat (pooled over its folds).
    pub accuracies: Vec<f64>,
    /// Aggregate over every fold of every repeat.
    pub confusion: ConfusionMatrix,
}

impl CvReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        s.push_str(&format!("config_hash,{}\n", self.config_hash));
        s.push_str(&format!("seed,{}\n", self.seed));
        s.push_str(&format!("features,\"{}\"\n", self.features));
        s.push_str(&format!("folds,{}\n", self.folds));
        s.push_str(&format!("repeats,{}\n", self.repeats));
        for (i, a) in self.accuracies.iter().enumerate() {
            s.push_str(&format!("repeat_{},{a:.6}\n", i + 1));
        }
        s.push_str(&format!("mean_accuracy,{:.6}\n", self.mean_accuracy()));
        s
    }
}

/// Seed of one repeat, decorrelated from its neighbours.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    let mut z = seed ^ (repeat as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cross-validation over descriptors that were already extracted.
pub fn crossval_descriptors<T: Real>(
    images: &[ImageDescriptors<T>],
    labels: &[usize],
    items: &[String],
    classes: &[String],
    cfg: &PipelineConfig,
) -> Result<CvReport> {
    cfg.validate()?;
    if images.len() != labels.len() || images.len() != items.len() {
        return Err(Error::Dimension("descriptors, labels and items differ in length".into()));
    }
    let mut confusion = ConfusionMatrix::new(classes.to_vec());
    let mut accuracies = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let rseed = repeat_seed(cfg.seed, repeat);
        let fold = grouped_folds(labels, items, classes, cfg.folds, rseed)?;
        let mut cm = ConfusionMatrix::new(classes.to_vec());
        for test in 0..cfg.folds {
            debug_assert!(leaked_items(items, &fold, test).is_empty());
            let train: Vec<usize> = (0..images.len()).filter(|&i| fold[i] != test).collect();
            let held: Vec<usize> = (0..images.len()).filter(|&i| fold[i] == test).collect();
            let train_imgs: Vec<&ImageDescriptors<T>> = train.iter().map(|&i| &images[i]).collect();
            let test_imgs: Vec<&ImageDescriptors<T>> = held.iter().map(|&i| &images[i]).collect();
            let cb = if cfg.features.bsp {
                Some(fit_codebook(&train_imgs, cfg, rseed ^ test as u64)?)
            } else {
                None
            };
            let xtr = fused_vectors(&train_imgs, cb.as_ref(), cfg)?;
            let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let (model, _) = train_classifier(&xtr, &ytr, classes.to_vec(), cfg)?;
            let xte = fused_vectors(&test_imgs, cb.as_ref(), cfg)?;
            for ((pred, _), &i) in model.predict_all(&xte)?.into_iter().zip(&held) {
                cm.add(labels[i], pred);
            }
            log::info!("repeat {} fold {}: {} train / {} test", repeat + 1, test + 1, train.len(), held.len());
        }
        accuracies.push(cm.overall_accuracy().unwrap_or(0.0));
        confusion.merge(&cm)?;
    }
    Ok(CvReport {
        folds: cfg.folds,
        repeats: cfg.repeats,
        seed: cfg.seed,
        features: cfg.features,
        config_hash: cfg.hash(),
        accuracies,
        confusion,
    })
}

/// Extracts every manifest entry once, then cross-validates.
pub fn crossval<T: Real>(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<CvReport> {
    cfg.validate()?;
    let labels: Vec<usize> = manifest.entries.iter().map(|e| e.class).collect();
    let items: Vec<String> = manifest.entries.iter().map(|e| e.item.clone()).collect();
    grouped_folds(&labels, &items, &manifest.categories, cfg.folds, cfg.seed)?;
    let images = describe_manifest::<T>(manifest, cfg);
    crossval_descriptors(&images, &labels, &items, &manifest.categories, cfg)
}
