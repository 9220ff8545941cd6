//! Flat key=value pipeline configuration and its provenance hash.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bspline::PiecewiseConfig;
use crate::coding::{LlcConfig, PoolNorm, DEFAULT_LAMBDA, DEFAULT_NEIGHBOURS, DEFAULT_SIGMA_W};
use crate::depthio::parse_key_values;
use crate::error::{Error, Result};
use crate::features::{BspConfig, FeatureSet};
use crate::geometry::Quantization;
use crate::topology::{ContourConfig, TopologyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Flip the depth axis when inputs store distance from the camera.
    pub invert_depth: bool,
    /// mm per pixel.
    pub pitch: f64,
    pub tile: usize,
    pub overlap: usize,
    pub knot_spacing: f64,
    pub quantization: Quantization,
    /// Majority filter window on the shape-index classes; 0 disables it.
    pub rank_filter: usize,
    pub ridge_thresholds: Vec<f64>,
    pub contour_min_slope: f64,
    pub contour_min_d2: f64,
    pub bsp_patch: usize,
    pub bsp_stride: usize,
    pub codebook_size: usize,
    pub codebook_samples: usize,
    pub sigma_w: f64,
    pub llc_k: usize,
    pub llc_lambda: f64,
    pub pool_normalize: PoolNorm,
    pub kernel: KernelChoice,
    /// Min-max scale each fused dimension over the training set before the SVM.
    pub svm_scale: bool,
    pub svm_c: f64,
    /// `None` means `10 / D` of the fused vector.
    pub svm_gamma: Option<f64>,
    pub svm_eps: f64,
    pub folds: usize,
    pub repeats: usize,
    pub features: FeatureSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            invert_depth: false,
            pitch: 1.0,
            tile: 64,
            overlap: 16,
            knot_spacing: 4.0,
            quantization: Quantization::Uniform,
            rank_filter: 3,
            ridge_thresholds: vec![0.02, 0.05, 0.1],
            contour_min_slope: 0.1,
            contour_min_d2: 1e-4,
            bsp_patch: 41,
            bsp_stride: 8,
            codebook_size: 256,
            codebook_samples: 100_000,
            sigma_w: DEFAULT_SIGMA_W,
            llc_k: DEFAULT_NEIGHBOURS,
            llc_lambda: DEFAULT_LAMBDA,
            pool_normalize: PoolNorm::None,
            kernel: KernelChoice::Rbf,
            svm_scale: true,
            svm_c: 10.0,
            svm_gamma: None,
            svm_eps: 1e-3,
            folds: 5,
            repeats: 10,
            features: FeatureSet::ALL,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 28] = [
        "seed",
        "invert_depth",
        "pitch",
        "tile",
        "overlap",
        "knot_spacing",
        "quantization",
        "rank_filter",
        "ridge_thresholds",
        "contour_min_slope",
        "contour_min_d2",
        "bsp_patch",
        "bsp_stride",
        "codebook_size",
        "codebook_samples",
        "sigma_w",
        "llc_k",
        "llc_lambda",
        "pool_normalize",
        "kernel",
        "svm_scale",
        "svm_c",
        "svm_gamma",
        "svm_eps",
        "folds",
        "repeats",
        "features",
        "lbp_levels",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "invert_depth" => self.invert_depth = parse_bool(key, v)?,
            "pitch" => self.pitch = parse_num(key, v)?,
            "tile" => self.tile = parse_num(key, v)?,
            "overlap" => self.overlap = parse_num(key, v)?,
            "knot_spacing" => self.knot_spacing = parse_num(key, v)?,
            "quantization" => {
                self.quantization = match v.to_ascii_lowercase().as_str() {
                    "uniform" => Quantization::Uniform,
                    "koenderink" => Quantization::Koenderink,
                    _ => return Err(Error::Config(format!("unknown quantization '{v}'"))),
                }
            }
            "rank_filter" => self.rank_filter = parse_num(key, v)?,
            "ridge_thresholds" => {
                self.ridge_thresholds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "contour_min_slope" => self.contour_min_slope = parse_num(key, v)?,
            "contour_min_d2" => self.contour_min_d2 = parse_num(key, v)?,
            "bsp_patch" => self.bsp_patch = parse_num(key, v)?,
            "bsp_stride" => self.bsp_stride = parse_num(key, v)?,
            "codebook_size" => self.codebook_size = parse_num(key, v)?,
            "codebook_samples" => self.codebook_samples = parse_num(key, v)?,
            "sigma_w" => self.sigma_w = parse_num(key, v)?,
            "llc_k" => self.llc_k = parse_num(key, v)?,
            "llc_lambda" => self.llc_lambda = parse_num(key, v)?,
            "pool_normalize" => self.pool_normalize = v.parse()?,
            "kernel" => {
                self.kernel = match v.to_ascii_lowercase().as_str() {
                    "rbf" => KernelChoice::Rbf,
                    "linear" => KernelChoice::Linear,
                    _ => return Err(Error::Config(format!("unknown kernel '{v}'"))),
                }
            }
            "svm_scale" => self.svm_scale = parse_bool(key, v)?,
            "svm_c" => self.svm_c = parse_num(key, v)?,
            "svm_gamma" => {
                self.svm_gamma = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "svm_eps" => self.svm_eps = parse_num(key, v)?,
            "folds" => self.folds = parse_num(key, v)?,
            "repeats" => self.repeats = parse_num(key, v)?,
            "features" => self.features = v.parse()?,
            "lbp_levels" => {
                if v != "3" {
                    return Err(Error::Config("lbp_levels is fixed at 3".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it reproduces the configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let q = match self.quantization {
            Quantization::Uniform => "uniform",
            Quantization::Koenderink => "koenderink",
        };
        let thresholds: Vec<String> = self.ridge_thresholds.iter().map(|t| t.to_string()).collect();
        let kernel = match self.kernel {
            KernelChoice::Rbf => "rbf",
            KernelChoice::Linear => "linear",
        };
        let gamma = self.svm_gamma.map_or_else(|| "auto".to_string(), |g| g.to_string());
        let pairs: [(&str, String); 27] = [
            ("seed", self.seed.to_string()),
            ("invert_depth", self.invert_depth.to_string()),
            ("pitch", self.pitch.to_string()),
            ("tile", self.tile.to_string()),
            ("overlap", self.overlap.to_string()),
            ("knot_spacing", self.knot_spacing.to_string()),
            ("quantization", q.to_string()),
            ("rank_filter", self.rank_filter.to_string()),
            ("ridge_thresholds", thresholds.join(",")),
            ("contour_min_slope", self.contour_min_slope.to_string()),
            ("contour_min_d2", self.contour_min_d2.to_string()),
            ("bsp_patch", self.bsp_patch.to_string()),
            ("bsp_stride", self.bsp_stride.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("codebook_samples", self.codebook_samples.to_string()),
            ("sigma_w", self.sigma_w.to_string()),
            ("llc_k", self.llc_k.to_string()),
            ("llc_lambda", self.llc_lambda.to_string()),
            ("pool_normalize", self.pool_normalize.to_string()),
            ("kernel", kernel.to_string()),
            ("svm_scale", self.svm_scale.to_string()),
            ("svm_c", self.svm_c.to_string()),
            ("svm_gamma", gamma),
            ("svm_eps", self.svm_eps.to_string()),
            ("folds", self.folds.to_string()),
            ("repeats", self.repeats.to_string()),
            ("features", self.features.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Provenance line embedded in artefacts.
    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={} features={}", self.hash(), self.seed, self.features)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return bad(format!("pitch must be positive, got {}", self.pitch));
        }
        self.piecewise().validate()?;
        if self.rank_filter != 0 && (self.rank_filter < 3 || self.rank_filter % 2 == 0) {
            return bad(format!("rank_filter must be 0 or an odd window >= 3, got {}", self.rank_filter));
        }
        if self.ridge_thresholds.is_empty() || self.ridge_thresholds.iter().any(|t| !(*t >= 0.0)) {
            return bad("ridge_thresholds must be a non-empty list of non-negative values".into());
        }
        if !(self.contour_min_slope >= 0.0) || !(self.contour_min_d2 >= 0.0) {
            return bad("contour gates must be non-negative".into());
        }
        self.bsp().validate()?;
        if self.codebook_size < 2 {
            return bad(format!("codebook_size must be at least 2, got {}", self.codebook_size));
        }
        if self.codebook_samples < self.codebook_size {
            return bad("codebook_samples must be at least codebook_size".into());
        }
        if !self.sigma_w.is_finite() {
            return bad("sigma_w must be finite".into());
        }
        if self.llc_k == 0 || self.llc_k > self.codebook_size {
            return bad(format!("llc_k must be in 1..={}, got {}", self.codebook_size, self.llc_k));
        }
        if !(self.llc_lambda >= 0.0) {
            return bad("llc_lambda must be non-negative".into());
        }
        if !(self.svm_c > 0.0) {
            return bad(format!("svm_c must be positive, got {}", self.svm_c));
        }
        if let Some(g) = self.svm_gamma {
            if !(g > 0.0) {
                return bad(format!("svm_gamma must be positive, got {g}"));
            }
        }
        if !(self.svm_eps > 0.0) {
            return bad("svm_eps must be positive".into());
        }
        if self.folds < 2 || self.repeats == 0 {
            return bad("folds must be >= 2 and repeats >= 1".into());
        }
        Ok(())
    }

    pub fn piecewise(&self) -> PiecewiseConfig {
        PiecewiseConfig {
            tile: self.tile,
            overlap: self.overlap,
            knot_spacing: self.knot_spacing,
        }
    }

    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig {
            ridge_thresholds: self.ridge_thresholds.clone(),
            contour: ContourConfig {
                pitch: self.pitch,
                min_slope: self.contour_min_slope,
                min_second_derivative: self.contour_min_d2,
            },
        }
    }

    pub fn bsp(&self) -> BspConfig {
        BspConfig {
            patch: self.bsp_patch,
            stride: self.bsp_stride,
        }
    }

    pub fn llc(&self) -> LlcConfig {
        LlcConfig {
            neighbours: self.llc_k,
            lambda: self.llc_lambda,
        }
    }

    /// Fused dimension for this feature set and codebook size.
    pub fn fused_dimension(&self) -> usize {
        self.features.dimension(self.codebook_size)
    }

    /// RBF width: configured value or `10 / D`.
    pub fn gamma(&self, dim: usize) -> f64 {
        self.svm_gamma.unwrap_or(10.0 / dim.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        assert_eq!(cfg.fused_dimension(), 539);
        assert!((cfg.gamma(539) - 10.0 / 539.0).abs() < 1e-18);
        for k in cfg.to_text().lines().map(|l| l.split('=').next().unwrap()) {
            assert!(PipelineConfig::KEYS.contains(&k));
        }
    }

    #[test]
    fn overrides_change_hash() {
        let mut cfg = PipelineConfig::default();
        let h = cfg.hash();
        cfg.set("codebook_size", "64").unwrap();
        assert_ne!(cfg.hash(), h);
        assert_eq!(cfg.fused_dimension(), 347);
        cfg.set("features", "lbp").unwrap();
        assert_eq!(cfg.fused_dimension(), 174);
        cfg.set("svm_gamma", "0.5").unwrap();
        assert_eq!(cfg.gamma(10), 0.5);
    }

    #[test]
    fn rejects_invalid_values() {
        for (k, v) in [
            ("rank_filter", "4"),
            ("bsp_patch", "40"),
            ("svm_c", "0"),
            ("llc_k", "300"),
            ("folds", "1"),
            ("overlap", "40"),
            ("ridge_thresholds", ""),
        ] {
            let text = format!("{k}={v}\n");
            assert!(matches!(PipelineConfig::parse(&text), Err(Error::Config(_))), "{k}={v}");
        }
        assert!(PipelineConfig::parse("colour=red\n").is_err());
        assert!(PipelineConfig::parse("tile=abc\n").is_err());
    }
}
