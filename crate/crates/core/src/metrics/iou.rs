//! Intersection over union of binary masks.

use ndarray::ArrayView3;

use crate::error::{Error, Result};

/// |a ∧ b| / |a ∨ b| over two same-shape binary masks.
///
/// Two empty masks agree perfectly on absence and score 1; one empty mask
/// against a nonempty one scores 0.
pub fn iou(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "masks must share dims, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (x, y) in a.iter().zip(b.iter()) {
        intersection += u64::from(x & y);
        union += u64::from(x | y);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(values: &[bool]) -> Array3<bool> {
        Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn identical_nonempty_masks_score_one() {
        let a = mask(&[true, false, true]);
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let a = mask(&[true, false, false]);
        let b = mask(&[false, true, false]);
        assert_eq!(iou(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn two_voxel_masks_with_single_overlap_score_a_third() {
        let a = mask(&[true, true, false, false]);
        let b = mask(&[false, true, true, false]);
        assert_eq!(iou(a.view(), b.view()).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn both_empty_is_one_single_empty_is_zero() {
        let empty = mask(&[false, false]);
        let full = mask(&[true, true]);
        assert_eq!(iou(empty.view(), empty.view()).unwrap(), 1.0);
        assert_eq!(iou(empty.view(), full.view()).unwrap(), 0.0);
    }

    #[test]
    fn symmetric() {
        let a = mask(&[true, true, false]);
        let b = mask(&[true, false, true]);
        assert_eq!(
            iou(a.view(), b.view()).unwrap(),
            iou(b.view(), a.view()).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = mask(&[true]);
        let b = mask(&[true, false]);
        assert!(matches!(iou(a.view(), b.view()), Err(Error::Dimension(_))));
    }
}
