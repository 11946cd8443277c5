//! Scalar quality metrics: pixel-wise error (MAE/MSE/PSNR), windowed SSIM,
//! the consecutive-slice continuity metric, Gaussian-fit Fréchet distance
//! with pluggable slice embedders, and mask IoU.

mod embed;
mod frechet;
mod iou;
mod simos;
mod ssim;

pub use embed::{
    embed_slices, read_embeddings, write_embeddings, BlockMeanEmbedder, SliceEmbedder,
};
pub use frechet::{fit_gaussian, frechet_distance, EmbeddingSet, GaussianStats};
pub use iou::iou;
pub use simos::simos;
pub use ssim::{ssim, SsimParams};

use ndarray::{ArrayView, Dimension};

use crate::error::{Error, Result};

/// Pixel-wise accuracy summary.
///
/// `psnr` is `+inf` when the images are identical (mse = 0); it is the
/// caller's job to render that distinguished value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelMetrics {
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Mean absolute error, mean squared error and PSNR over two same-shape
/// arrays (slices or volumes).
pub fn pixel_metrics<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    peak: f64,
) -> Result<PixelMetrics> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "pixel metrics need matching shapes, got {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput(
            "pixel metrics over an empty array".into(),
        ));
    }
    if !peak.is_finite() || peak <= 0.0 {
        return Err(Error::Precondition(format!(
            "peak must be positive, got {peak}"
        )));
    }

    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let mae = abs_sum / n;
    let mse = sq_sum / n;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok(PixelMetrics { mae, mse, psnr })
}
