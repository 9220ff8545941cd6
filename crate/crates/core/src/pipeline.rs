//! End-to-end composition: depth map to descriptors, descriptors to fused
//! vectors, fused vectors to a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bspline::{fit_surface_piecewise, SmoothedSurface};
use crate::classify::{FeatureScaling, Kernel, SmoConfig, SvmModel, TrainReport};
use crate::coding::{apply_pool_norm, kmeans, llc_encode_all, sum_pool, Codebook};
use crate::config::{KernelChoice, PipelineConfig};
use crate::depthio::{DatasetManifest, DepthMap};
use crate::error::{Error, Result};
use crate::features::{
    bsp_descriptors, fuse, lbp_histogram, si_histogram, tsd_histogram, GlobalFeatures, BSP_DIM, LBP_DIM, SI_DIM,
    TSD_DIM,
};
use crate::geometry::{majority_rank_filter, principal_curvatures, shape_index, CurvatureMap, ShapeIndexMap};
use crate::scalar::Real;
use crate::topology::{extract_topology, tsd_distances, TopologyMap, TsdSamples};

/// Every intermediate product of one image.
pub struct ImageAnalysis<T> {
    pub surface: SmoothedSurface<T>,
    pub curvature: CurvatureMap<T>,
    pub shape: ShapeIndexMap<T>,
    pub topology: TopologyMap<T>,
    pub tsd: TsdSamples<T>,
}

/// Descriptors of one image before coding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptors<T> {
    pub global: GlobalFeatures<T>,
    pub bsp: Vec<[T; BSP_DIM]>,
}

impl<T: Real> ImageDescriptors<T> {
    /// Stand-in for an image that could not be analysed.
    pub fn zero() -> Self {
        Self {
            global: GlobalFeatures {
                lbp: vec![T::zero(); LBP_DIM],
                si: vec![T::zero(); SI_DIM],
                tsd: vec![T::zero(); TSD_DIM],
            },
            bsp: Vec::new(),
        }
    }
}

pub fn analyse<T: Real>(dm: &DepthMap<T>, cfg: &PipelineConfig) -> Result<ImageAnalysis<T>> {
    dm.check_analysable()?;
    let surface = fit_surface_piecewise(dm, &cfg.piecewise())?;
    let curvature = principal_curvatures(&surface, T::of(cfg.pitch));
    let mut shape = shape_index(&curvature, cfg.quantization);
    if cfg.rank_filter > 0 {
        shape = majority_rank_filter(&shape, cfg.rank_filter)?;
    }
    let topology = extract_topology(&surface, &curvature, &shape, &cfg.topology())?;
    let tsd = tsd_distances(&topology);
    Ok(ImageAnalysis {
        surface,
        curvature,
        shape,
        topology,
        tsd,
    })
}

/// Global blocks and local descriptors of one depth map (depth axis already
/// oriented as configured).
pub fn describe<T: Real>(raw: &DepthMap<T>, cfg: &PipelineConfig) -> Result<ImageDescriptors<T>> {
    let dm = if cfg.invert_depth { raw.inverted() } else { raw.clone() };
    let a = analyse(&dm, cfg)?;
    let lbp = lbp_histogram(&dm);
    let si = si_histogram(&a.shape);
    let tsd = tsd_histogram(&a.tsd);
    let bsp = if cfg.features.bsp {
        bsp_descriptors(&a.surface.depth_map(), &a.topology, &cfg.bsp())?
            .into_iter()
            .map(|d| d.values)
            .collect()
    } else {
        Vec::new()
    };
    Ok(ImageDescriptors {
        global: GlobalFeatures { lbp, si, tsd },
        bsp,
    })
}

/// Descriptors of every manifest entry, in manifest order. Entries that fail
/// to load or analyse are logged and replaced by zero blocks.
pub fn describe_manifest<T: Real>(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Vec<ImageDescriptors<T>> {
    manifest
        .entries
        .par_iter()
        .map(|e| match e.load::<T>().and_then(|dm| describe(&dm, cfg)) {
            Ok(d) => d,
            Err(err) => {
                log::warn!("{}: {err}; emitting zero blocks", e.depth.display());
                ImageDescriptors::zero()
            }
        })
        .collect()
}

/// At most `cap` local descriptors drawn without replacement from the given
/// images, kept in image order.
pub fn sample_descriptors<T: Real>(images: &[&ImageDescriptors<T>], cap: usize, seed: u64) -> Vec<[T; BSP_DIM]> {
    let all: Vec<&[T; BSP_DIM]> = images.iter().flat_map(|i| i.bsp.iter()).collect();
    if all.len() <= cap {
        return all.into_iter().copied().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, all.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| *all[i]).collect()
}

pub fn fit_codebook<T: Real>(images: &[&ImageDescriptors<T>], cfg: &PipelineConfig, seed: u64) -> Result<Codebook<T>> {
    let samples = sample_descriptors(images, cfg.codebook_samples, seed);
    if samples.len() < cfg.codebook_size {
        return Err(Error::Invalid(format!(
            "{} local descriptors are too few for a codebook of {}",
            samples.len(),
            cfg.codebook_size
        )));
    }
    let out = kmeans(&samples, cfg.codebook_size, seed, cfg.sigma_w)?;
    log::info!(
        "codebook: {} atoms from {} descriptors, {} Lloyd iterations",
        cfg.codebook_size,
        samples.len(),
        out.iterations
    );
    Ok(out.codebook)
}

/// Sum-pooled, optionally normalised LLC codes of one image.
pub fn pooled_codes<T: Real>(img: &ImageDescriptors<T>, cb: &Codebook<T>, cfg: &PipelineConfig) -> Result<Vec<T>> {
    if cb.dim() != BSP_DIM {
        return Err(Error::Dimension(format!("codebook atoms have {} values, expected {BSP_DIM}", cb.dim())));
    }
    let codes = llc_encode_all(&img.bsp, cb, &cfg.llc())?;
    let mut pooled = sum_pool(&codes, cb.len())?;
    apply_pool_norm(&mut pooled, cfg.pool_normalize);
    Ok(pooled)
}

/// Fused vector of the configured feature set. A codebook is required when
/// the set includes the local block.
pub fn fused_vector<T: Real>(
    img: &ImageDescriptors<T>,
    cb: Option<&Codebook<T>>,
    cfg: &PipelineConfig,
) -> Result<Vec<T>> {
    let pooled = if cfg.features.bsp {
        let cb = cb.ok_or_else(|| Error::Config("the bsp block needs a codebook".into()))?;
        pooled_codes(img, cb, cfg)?
    } else {
        Vec::new()
    };
    fuse(cfg.features, &img.global, &pooled)
}

pub fn fused_vectors<T: Real>(
    images: &[&ImageDescriptors<T>],
    cb: Option<&Codebook<T>>,
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<T>>> {
    images.par_iter().map(|i| fused_vector(i, cb, cfg)).collect()
}

pub fn kernel_for(cfg: &PipelineConfig, dim: usize) -> Kernel {
    match cfg.kernel {
        KernelChoice::Rbf => Kernel::Rbf { gamma: cfg.gamma(dim) },
        KernelChoice::Linear => Kernel::Linear,
    }
}

pub fn smo_config(cfg: &PipelineConfig) -> SmoConfig {
    SmoConfig {
        c: cfg.svm_c,
        eps: cfg.svm_eps,
        ..SmoConfig::default()
    }
}

pub fn train_classifier<T: Real>(
    vectors: &[Vec<T>],
    labels: &[usize],
    classes: Vec<String>,
    cfg: &PipelineConfig,
) -> Result<(SvmModel<T>, Vec<TrainReport>)> {
    let dim = vectors.first().map_or(0, Vec::len);
    if !cfg.svm_scale {
        return SvmModel::train(vectors, labels, classes, kernel_for(cfg, dim), &smo_config(cfg));
    }
    let scaling = FeatureScaling::fit(vectors)?;
    let scaled: Vec<Vec<T>> = vectors.iter().map(|v| scaling.apply(v)).collect();
    let (mut model, reports) = SvmModel::train(&scaled, labels, classes, kernel_for(cfg, dim), &smo_config(cfg))?;
    model.scaling = Some(scaling);
    Ok((model, reports))
}
