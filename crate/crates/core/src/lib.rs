//! Single-shot clothing category recognition from 2.5D depth maps: B-spline
//! surface analysis, wrinkle topology, depth descriptors, weighted LLC coding
//! and one-vs-all SVM classification.

pub mod bspline;
pub mod classify;
pub mod coding;
pub mod config;
pub mod depthio;
pub mod error;
pub mod features;
pub mod geometry;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod topology;

pub use config::PipelineConfig;
pub use error::{Error, ErrorKind, Result};
pub use scalar::Real;

pub type DepthMapF64 = depthio::DepthMap<f64>;
pub type DepthMapF32 = depthio::DepthMap<f32>;
pub type FittedSurfaceF64 = bspline::FittedSurface<f64>;
pub type FittedSurfaceF32 = bspline::FittedSurface<f32>;
pub type SmoothedSurfaceF64 = bspline::SmoothedSurface<f64>;
pub type SmoothedSurfaceF32 = bspline::SmoothedSurface<f32>;
pub type CurvatureMapF64 = geometry::CurvatureMap<f64>;
pub type ShapeIndexMapF64 = geometry::ShapeIndexMap<f64>;
pub type TopologyMapF64 = topology::TopologyMap<f64>;
pub type CodebookF64 = coding::Codebook<f64>;
pub type CodebookF32 = coding::Codebook<f32>;
pub type SvmModelF64 = classify::SvmModel<f64>;
pub type SvmModelF32 = classify::SvmModel<f32>;
pub type ImageDescriptorsF64 = pipeline::ImageDescriptors<f64>;
