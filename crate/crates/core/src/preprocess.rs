//! Intensity normalization for CT and MRI volumes, the CT inverse map,
//! and multi-channel conditioning-slice construction.
//!
//! CT: values are capped at `ct_cap` (2000 HU by default, everything above
//! is treated as implant-grade abnormality), then min-max mapped to
//! `[0, 1]` against the `ct_floor` population minimum (−1000 HU). Values
//! below the floor clamp to 0.
//!
//! MRI: the long intensity tail is capped at the volume's own 98th
//! percentile (nearest-rank), then the volume is min-max normalized to
//! `[0, 1]`. A constant volume maps to all zeros.

use crate::error::{Error, Result};
use crate::volume::{Slice, ValueKind, Volume};

/// Normalization constants. Defaults follow the standard CT window used
/// for synthetic-CT work: floor −1000 HU, cap 2000 HU, and a per-image
/// 98th-percentile MRI cap.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationParams {
    pub ct_floor: f64,
    pub ct_cap: f64,
    pub mri_percentile: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        NormalizationParams {
            ct_floor: -1000.0,
            ct_cap: 2000.0,
            mri_percentile: 0.98,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ct_floor.is_finite() && self.ct_cap.is_finite()) || self.ct_floor >= self.ct_cap {
            return Err(Error::Precondition(format!(
                "ct_floor ({}) must lie below ct_cap ({})",
                self.ct_floor, self.ct_cap
            )));
        }
        if !self.mri_percentile.is_finite()
            || self.mri_percentile <= 0.0
            || self.mri_percentile >= 1.0
        {
            return Err(Error::Precondition(format!(
                "mri_percentile must lie in (0, 1), got {}",
                self.mri_percentile
            )));
        }
        Ok(())
    }

    /// Width of the HU window, i.e. the dynamic range after
    /// [`denormalize_ct`].
    pub fn hu_range(&self) -> f64 {
        self.ct_cap - self.ct_floor
    }
}

fn expect_kind(volume: &Volume, expected: ValueKind, op: &str) -> Result<()> {
    if volume.value_kind() != expected {
        return Err(Error::Precondition(format!(
            "{op} expects a {expected:?} volume, got {:?}",
            volume.value_kind()
        )));
    }
    Ok(())
}

/// Maps a HU volume into `[0, 1]`: cap at `ct_cap`, shift by `ct_floor`,
/// scale by the window width, clamp.
pub fn preprocess_ct(volume: &Volume, params: &NormalizationParams) -> Result<Volume> {
    params.validate()?;
    expect_kind(volume, ValueKind::Hu, "preprocess_ct")?;
    let range = params.hu_range();
    volume.map(ValueKind::Normalized, |v| {
        ((v.min(params.ct_cap) - params.ct_floor) / range).clamp(0.0, 1.0)
    })
}

/// Inverse of [`preprocess_ct`] on its image: maps `[0, 1]` back to
/// `[ct_floor, ct_cap]` HU.
pub fn denormalize_ct(volume: &Volume, params: &NormalizationParams) -> Result<Volume> {
    params.validate()?;
    expect_kind(volume, ValueKind::Normalized, "denormalize_ct")?;
    let range = params.hu_range();
    volume.map(ValueKind::Hu, |u| u * range + params.ct_floor)
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest value (1-based).
fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Caps an MRI volume at its own percentile (nearest-rank over all voxels)
/// and min-max normalizes to `[0, 1]`. Constant volumes map to zeros.
pub fn preprocess_mri(volume: &Volume, params: &NormalizationParams) -> Result<Volume> {
    params.validate()?;
    expect_kind(volume, ValueKind::RawMri, "preprocess_mri")?;

    let mut sorted: Vec<f64> = volume.voxels().iter().copied().collect();
    sorted.sort_unstable_by(f64::total_cmp);
    let cap = percentile_nearest_rank(&sorted, params.mri_percentile);
    let min = sorted[0];
    let denom = cap - min;
    if !denom.is_finite() || denom <= 0.0 {
        return volume.map(ValueKind::Normalized, |_| 0.0);
    }
    volume.map(ValueKind::Normalized, |v| {
        ((v.min(cap) - min) / denom).clamp(0.0, 1.0)
    })
}

/// A stack of `k` consecutive source slices centered on `center_index`,
/// paired with the target slice at the same index.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSlice {
    /// `k` channels in ascending z order, boundary slices replicated.
    pub channels: Vec<Slice>,
    pub center_index: usize,
    pub target: Slice,
}

/// Builds the multi-channel dataset: item `i` stacks the MRI slices at the
/// edge-clamped indices `i−(k−1)/2 ..= i+(k−1)/2` and targets the CT slice
/// at `i`. With `k = 1` this degenerates to plain slice pairing.
pub fn build_multichannel(
    mri_slices: &[Slice],
    ct_slices: &[Slice],
    k: usize,
) -> Result<Vec<MultiChannelSlice>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "channel count must be odd and >= 1, got {k}"
        )));
    }
    if mri_slices.len() != ct_slices.len() {
        return Err(Error::Pairing(format!(
            "modality slice counts differ: {} MRI vs {} CT",
            mri_slices.len(),
            ct_slices.len()
        )));
    }
    if mri_slices.is_empty() {
        return Err(Error::DegenerateInput("no slices to pair".into()));
    }

    let n = mri_slices.len();
    let half = (k - 1) / 2;
    let items = (0..n)
        .map(|i| {
            let channels = (0..k)
                .map(|c| {
                    let idx = (i + c).saturating_sub(half).min(n - 1);
                    mri_slices[idx].clone()
                })
                .collect();
            MultiChannelSlice {
                channels,
                center_index: i,
                target: ct_slices[i].clone(),
            }
        })
        .collect();
    Ok(items)
}
