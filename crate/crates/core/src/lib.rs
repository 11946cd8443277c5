//! Evaluation toolkit for 2D-slice-based MRI-to-CT translation.
//!
//! The library covers the full pipeline around (but not including) the
//! generative models themselves:
//!
//! - [`nifti`] / [`volume`]: NIfTI-1 ingestion, transverse slicing, and
//!   restacking synthetic slices into volumes,
//! - [`preprocess`]: CT window normalization, its inverse, MRI percentile
//!   normalization, and multi-channel conditioning stacks,
//! - [`dataset`]: patient manifests, stratified per-patient splits, slice
//!   pairing,
//! - [`metrics`]: MAE/MSE/PSNR, SSIM, slice-continuity distance, Fréchet
//!   distance over pluggable slice embeddings, and mask IoU,
//! - [`seg`]: label-mask ingestion and per-label IoU evaluation,
//! - [`report`]: config-driven end-to-end evaluation runs and report
//!   rendering.

pub mod dataset;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod nifti;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod seg;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    extract_transverse_slices, stack_slices, Slice, ValueKind, Volume, VolumeGeometry,
};
