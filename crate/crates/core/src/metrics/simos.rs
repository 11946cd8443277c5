//! Slice-continuity metric for restacked volumes.
//!
//! For each consecutive transverse pair (i, i+1), compute the MSE between
//! the two planes within the ground-truth volume and within the synthetic
//! volume; the score is the mean absolute difference between the two MSE
//! profiles, with divisor nz−1 (the number of consecutive pairs). Zero
//! means the synthetic volume reproduces the ground truth's
//! plane-to-plane variation exactly; identical volumes score 0.

use ndarray::{ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

fn plane_mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Consecutive-slice continuity distance between two `[z, y, x]` volumes.
pub fn simos(gt: ArrayView3<'_, f64>, syn: ArrayView3<'_, f64>) -> Result<f64> {
    if gt.dim() != syn.dim() {
        return Err(Error::Dimension(format!(
            "volumes must share dims, got {:?} vs {:?}",
            gt.dim(),
            syn.dim()
        )));
    }
    let nz = gt.dim().0;
    if nz < 2 {
        return Err(Error::DegenerateInput(format!(
            "consecutive-slice metric needs at least 2 slices, got {nz}"
        )));
    }

    let mut acc = 0.0;
    for i in 0..nz - 1 {
        let gt_step = plane_mse(gt.index_axis(Axis(0), i), gt.index_axis(Axis(0), i + 1));
        let syn_step = plane_mse(syn.index_axis(Axis(0), i), syn.index_axis(Axis(0), i + 1));
        acc += (gt_step - syn_step).abs();
    }
    Ok(acc / (nz - 1) as f64)
}
