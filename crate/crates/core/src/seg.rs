//! Evaluation of externally produced segmentation masks: label-map
//! ingestion, deterministic sub-sampling of the test set, and per-label
//! IoU averaging.
//!
//! Masks arrive as NIfTI integer volumes with a sidecar label map (lines
//! of `id<TAB>name`). Labels are matched across ground truth and
//! synthetic masks by *name*, since different segmentor runs may permute
//! ids.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::nifti::read_nifti;
use crate::rng::SplitMix64;
use crate::volume::VolumeGeometry;

/// A 3D integer label volume (0 = background) with human-readable names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaskVolume {
    /// Shape `[nz, ny, nx]`.
    labels: Array3<u32>,
    label_names: BTreeMap<u32, String>,
    geometry: VolumeGeometry,
}

impl LabelMaskVolume {
    /// Builds a mask volume, checking that every nonzero label value has a
    /// name and that names are unique.
    pub fn new(
        labels: Array3<u32>,
        label_names: BTreeMap<u32, String>,
        geometry: VolumeGeometry,
    ) -> Result<Self> {
        geometry.validate()?;
        let (nx, ny, nz) = geometry.dims;
        if labels.dim() != (nz, ny, nx) {
            return Err(Error::Dimension(format!(
                "label array shape {:?} does not match dims ({nx}, {ny}, {nz})",
                labels.dim()
            )));
        }
        let mut names_seen = BTreeMap::new();
        for (id, name) in &label_names {
            if *id == 0 {
                return Err(Error::Precondition(
                    "label id 0 is reserved for background".into(),
                ));
            }
            if let Some(previous) = names_seen.insert(name.as_str(), *id) {
                return Err(Error::Precondition(format!(
                    "label name {name:?} is mapped to both id {previous} and id {id}"
                )));
            }
        }
        for &label in labels.iter() {
            if label != 0 && !label_names.contains_key(&label) {
                return Err(Error::Format {
                    path: "<label volume>".into(),
                    reason: format!("label value {label} has no entry in the label map"),
                });
            }
        }
        Ok(LabelMaskVolume {
            labels,
            label_names,
            geometry,
        })
    }

    pub fn labels(&self) -> &Array3<u32> {
        &self.labels
    }

    pub fn label_names(&self) -> &BTreeMap<u32, String> {
        &self.label_names
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    /// (nx, ny, nz).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.geometry.dims
    }

    fn id_of(&self, name: &str) -> Option<u32> {
        self.label_names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(id, _)| *id)
    }

    /// Names with at least one voxel in this volume, sorted.
    fn present_names(&self) -> Vec<&str> {
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for &label in self.labels.iter() {
            if label != 0 {
                *counts.entry(label).or_default() += 1;
            }
        }
        let mut names: Vec<&str> = counts
            .keys()
            .filter_map(|id| self.label_names.get(id).map(String::as_str))
            .collect();
        names.sort_unstable();
        names
    }
}

/// Parses an `id<TAB>name` label-map file.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<BTreeMap<u32, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, name)) = line.split_once('\t') else {
            return Err(Error::format(
                path,
                format!("line {}: expected id<TAB>name", lineno + 1),
            ));
        };
        let id: u32 = id.trim().parse().map_err(|_| {
            Error::format(path, format!("line {}: bad label id {id:?}", lineno + 1))
        })?;
        if map.insert(id, name.trim().to_string()).is_some() {
            return Err(Error::format(path, format!("duplicate label id {id}")));
        }
    }
    Ok(map)
}

/// Loads a NIfTI mask volume plus its label map. Voxels must be small
/// nonnegative integers.
pub fn read_label_mask(
    mask_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabelMaskVolume> {
    let mask_path = mask_path.as_ref();
    let volume = read_nifti(mask_path)?;
    let mut labels = Array3::zeros(volume.voxels().dim());
    for (out, &v) in labels.iter_mut().zip(volume.voxels().iter()) {
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
            return Err(Error::format(
                mask_path,
                format!("mask voxel {v} is not a small nonnegative integer"),
            ));
        }
        *out = v as u32;
    }
    let names = read_label_map(labels_path)?;
    LabelMaskVolume::new(labels, names, volume.geometry().clone())
}

/// Sidecar label-map path for a mask file: strip `.nii` / `.nii.gz`,
/// append `.labels.tsv`.
pub fn label_map_path_for(mask_path: &Path) -> std::path::PathBuf {
    let name = mask_path
        .file_name()
        .map(|n| n.to_string_lossy())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    mask_path.with_file_name(format!("{stem}.labels.tsv"))
}

/// Deterministically selects `ceil(fraction·n)` patients for segmentation
/// evaluation. Output is sorted; the choice depends only on the id set,
/// the fraction and the seed, never on input order.
pub fn select_eval_subset(patients: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if patients.is_empty() {
        return Err(Error::DegenerateInput("no patients to select from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut ids: Vec<&String> = patients.iter().collect();
    ids.sort_unstable();
    ids.dedup();
    let take = (fraction * ids.len() as f64).ceil() as usize;
    SplitMix64::new(seed).shuffle(&mut ids);
    let mut selected: Vec<String> = ids
        .into_iter()
        .take(take.min(patients.len()))
        .cloned()
        .collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Mean IoU over labels plus the per-label breakdown.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LabelIou {
    pub mean: f64,
    pub per_label: BTreeMap<String, f64>,
}

/// Per-label binary IoU averaged over every label name present in either
/// volume (background excluded). A label missing entirely from one volume
/// counts as an empty mask there and scores 0.
pub fn mean_label_iou(gt: &LabelMaskVolume, syn: &LabelMaskVolume) -> Result<LabelIou> {
    if gt.dims() != syn.dims() {
        return Err(Error::Dimension(format!(
            "mask dims differ: {:?} vs {:?}",
            gt.dims(),
            syn.dims()
        )));
    }
    let mut names: Vec<&str> = gt.present_names();
    names.extend(syn.present_names());
    names.sort_unstable();
    names.dedup();
    if names.is_empty() {
        return Err(Error::DegenerateInput(
            "neither mask volume contains a nonzero label".into(),
        ));
    }

    let mut per_label = BTreeMap::new();
    for name in &names {
        let gt_mask = match gt.id_of(name) {
            Some(id) => gt.labels.mapv(|l| l == id),
            None => Array3::from_elem(gt.labels.dim(), false),
        };
        let syn_mask = match syn.id_of(name) {
            Some(id) => syn.labels.mapv(|l| l == id),
            None => Array3::from_elem(syn.labels.dim(), false),
        };
        per_label.insert(name.to_string(), iou(gt_mask.view(), syn_mask.view())?);
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(LabelIou { mean, per_label })
}

/// 2D variant: evaluates each transverse plane as an nz = 1 volume and
/// averages over the planes where either mask has a label. The per-label
/// breakdown averages each label over the planes where it appears.
pub fn slicewise_mean_label_iou(gt: &LabelMaskVolume, syn: &LabelMaskVolume) -> Result<LabelIou> {
    if gt.dims() != syn.dims() {
        return Err(Error::Dimension(format!(
            "mask dims differ: {:?} vs {:?}",
            gt.dims(),
            syn.dims()
        )));
    }
    let (nx, ny, nz) = gt.dims();
    let plane_geometry = VolumeGeometry {
        dims: (nx, ny, 1),
        spacing: gt.geometry.spacing,
        orientation: gt.geometry.orientation.clone(),
    };

    let mut plane_means = Vec::new();
    let mut label_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for z in 0..nz {
        let gt_plane = LabelMaskVolume::new(
            gt.labels
                .index_axis(Axis(0), z)
                .to_owned()
                .insert_axis(Axis(0)),
            gt.label_names.clone(),
            plane_geometry.clone(),
        )?;
        let syn_plane = LabelMaskVolume::new(
            syn.labels
                .index_axis(Axis(0), z)
                .to_owned()
                .insert_axis(Axis(0)),
            syn.label_names.clone(),
            plane_geometry.clone(),
        )?;
        match mean_label_iou(&gt_plane, &syn_plane) {
            Ok(result) => {
                plane_means.push(result.mean);
                for (name, value) in result.per_label {
                    let entry = label_sums.entry(name).or_insert((0.0, 0));
                    entry.0 += value;
                    entry.1 += 1;
                }
            }
            // Planes where both masks are all background carry no signal.
            Err(Error::DegenerateInput(_)) => continue,
            Err(other) => return Err(other),
        }
    }
    if plane_means.is_empty() {
        return Err(Error::DegenerateInput(
            "no transverse plane contains a nonzero label".into(),
        ));
    }
    Ok(LabelIou {
        mean: plane_means.iter().sum::<f64>() / plane_means.len() as f64,
        per_label: label_sums
            .into_iter()
            .map(|(name, (sum, n))| (name, sum / n as f64))
            .collect(),
    })
}
