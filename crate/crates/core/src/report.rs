//! Config-driven end-to-end evaluation and report rendering.
//!
//! An evaluation run loads the ground-truth CT of every test patient,
//! ingests the model's synthetic volumes (or slice stacks), computes the
//! full metric suite, and aggregates mean ± std over patients. Reports are
//! deterministic byte-for-byte: same config + same inputs = same output.
//!
//! Aggregation order is fixed: pixel metrics and SSIM are averaged per
//! slice, then per patient, then over the cohort (the slice-pooled
//! variants are also emitted since aggregation conventions vary across
//! evaluation setups).
//! The Fréchet distance is computed once per model over the pooled test
//! slices, not per patient. Segmentation IoU covers only the configured
//! fraction of the test set, selected deterministically from the seed.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{read_manifest_csv, read_split_csv, PatientRecord, SplitName};
use crate::error::{Error, Result};
use crate::kv::parse_kv_file;
use crate::metrics::{
    embed_slices, fit_gaussian, frechet_distance, pixel_metrics, read_embeddings, simos, ssim,
    BlockMeanEmbedder, EmbeddingSet, SsimParams,
};
use crate::nifti::read_nifti;
use crate::preprocess::{denormalize_ct, preprocess_ct, NormalizationParams};
use crate::seg::{
    label_map_path_for, mean_label_iou, read_label_mask, select_eval_subset,
    slicewise_mean_label_iou,
};
use crate::volume::{stack_slices, Slice, ValueKind, Volume};

/// Value scale metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricScale {
    /// `[0, 1]` data as the models see it. PSNR peak and SSIM range 1.
    Normalized,
    /// Hounsfield units after de-normalization. Peak/range = window width.
    Hu,
}

impl FromStr for MetricScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normalized" => Ok(MetricScale::Normalized),
            "hu" => Ok(MetricScale::Hu),
            other => Err(Error::Config(format!(
                "unknown scale {other:?} (expected normalized or hu)"
            ))),
        }
    }
}

impl std::fmt::Display for MetricScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricScale::Normalized => "normalized",
            MetricScale::Hu => "hu",
        })
    }
}

/// Feature source for the Fréchet distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidEmbedderChoice {
    /// Built-in deterministic block-mean downsampler.
    BlockMean,
    /// Precomputed vectors from `embeddings_dir` (`gt.emb`, `<model>.emb`).
    External,
}

/// A fully validated evaluation run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub split_csv: PathBuf,
    pub predictions_dir: PathBuf,
    pub models: Vec<String>,
    pub normalization: NormalizationParams,
    pub scale: MetricScale,
    pub ssim: SsimParams,
    pub fid_embedder: FidEmbedderChoice,
    pub embeddings_dir: Option<PathBuf>,
    pub seg_fraction: f64,
    pub seed: u64,
    pub jobs: usize,
    pub output_dir: PathBuf,
    /// SHA-256 of the config file bytes, for provenance.
    pub config_sha256: String,
}

impl RunConfig {
    /// Loads and validates a key=value config file. See the project README
    /// for the key reference.
    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let config_sha256 = hex_digest(&bytes);
        let map = parse_kv_file(path)?;

        let get = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Config(format!("missing required config key {key:?}")))
        };
        let parse_f64 = |key: &str, default: f64| -> Result<f64> {
            map.get(key).map_or(Ok(default), |v| {
                v.parse().map_err(|_| {
                    Error::Config(format!("config key {key:?} is not a number: {v:?}"))
                })
            })
        };
        let parse_u64 = |key: &str, default: u64| -> Result<u64> {
            map.get(key).map_or(Ok(default), |v| {
                v.parse().map_err(|_| {
                    Error::Config(format!("config key {key:?} is not an integer: {v:?}"))
                })
            })
        };

        let known_keys = [
            "dataset_root",
            "split_csv",
            "predictions_dir",
            "models",
            "scale",
            "ct_floor",
            "ct_cap",
            "mri_percentile",
            "ssim_window",
            "ssim_sigma",
            "ssim_k1",
            "ssim_k2",
            "fid_embedder",
            "embeddings_dir",
            "seg_fraction",
            "seed",
            "jobs",
            "output_dir",
        ];
        for key in map.keys() {
            if !known_keys.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }

        let dataset_root = PathBuf::from(get("dataset_root")?);
        let split_csv = PathBuf::from(get("split_csv")?);
        let predictions_dir = PathBuf::from(get("predictions_dir")?);
        let output_dir = PathBuf::from(get("output_dir")?);
        let models: Vec<String> = get("models")?
            .split(',')
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        if models.is_empty() {
            return Err(Error::Config(
                "config key \"models\" lists no models".into(),
            ));
        }

        let normalization = NormalizationParams {
            ct_floor: parse_f64("ct_floor", -1000.0)?,
            ct_cap: parse_f64("ct_cap", 2000.0)?,
            mri_percentile: parse_f64("mri_percentile", 0.98)?,
        };
        normalization.validate()?;

        let scale = map
            .get("scale")
            .map_or(Ok(MetricScale::Normalized), |v| MetricScale::from_str(v))?;
        let dynamic_range = match scale {
            MetricScale::Normalized => 1.0,
            MetricScale::Hu => normalization.hu_range(),
        };
        let ssim = SsimParams {
            window: parse_u64("ssim_window", 11)? as usize,
            sigma: parse_f64("ssim_sigma", 1.5)?,
            k1: parse_f64("ssim_k1", 0.01)?,
            k2: parse_f64("ssim_k2", 0.03)?,
            dynamic_range,
        };
        ssim.validate()?;

        let fid_embedder = match map.get("fid_embedder").map(String::as_str) {
            None | Some("block-mean") => FidEmbedderChoice::BlockMean,
            Some("external") => FidEmbedderChoice::External,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown fid_embedder {other:?} (expected block-mean or external)"
                )))
            }
        };
        let embeddings_dir = map.get("embeddings_dir").map(PathBuf::from);
        if fid_embedder == FidEmbedderChoice::External && embeddings_dir.is_none() {
            return Err(Error::Config(
                "fid_embedder=external requires embeddings_dir".into(),
            ));
        }

        let seg_fraction = parse_f64("seg_fraction", 0.5)?;
        if !(seg_fraction > 0.0 && seg_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "seg_fraction must lie in (0, 1], got {seg_fraction}"
            )));
        }

        let config = RunConfig {
            dataset_root,
            split_csv,
            predictions_dir,
            models,
            normalization,
            scale,
            ssim,
            fid_embedder,
            embeddings_dir,
            seg_fraction,
            seed: parse_u64("seed", 0)?,
            jobs: parse_u64("jobs", 0)? as usize,
            output_dir,
            config_sha256,
        };
        config.validate_paths()?;
        Ok(config)
    }

    fn validate_paths(&self) -> Result<()> {
        for (name, path) in [
            ("dataset_root", &self.dataset_root),
            ("split_csv", &self.split_csv),
            ("predictions_dir", &self.predictions_dir),
        ] {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(dir) = &self.embeddings_dir {
            if !dir.exists() {
                return Err(Error::Config(format!(
                    "embeddings_dir {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serde helpers that keep non-finite floats round-trippable in JSON:
/// finite values serialize as numbers, `inf` / `-inf` / `nan` as strings.
mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, serde::Deserialize)]
    #[serde(untagged)]
    pub enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Number(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub fn from_repr(r: Repr) -> Result<f64, String> {
        match r {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(format!("unknown float literal {other:?}")),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&to_repr(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?).map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            serde::Serialize::serialize(&v.map(to_repr), s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?
                .map(|r| from_repr(r).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

/// Mean and (sample) standard deviation of a metric over patients. `std`
/// is absent for values computed once per cohort (the Fréchet distance).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricCell {
    #[serde(with = "float_repr")]
    pub mean: f64,
    #[serde(with = "float_repr::opt")]
    pub std: Option<f64>,
}

fn aggregate(values: &[f64]) -> MetricCell {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricCell {
        mean,
        std: Some(std),
    }
}

/// Cohort means computed over all slices pooled (no per-patient step),
/// emitted alongside the primary per-patient aggregation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SlicePooledMetrics {
    #[serde(with = "float_repr")]
    pub ssim: f64,
    #[serde(with = "float_repr")]
    pub psnr: f64,
    #[serde(with = "float_repr")]
    pub mae: f64,
    #[serde(with = "float_repr")]
    pub mse: f64,
}

/// A patient that could not be evaluated for a model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatientExclusion {
    pub patient_id: String,
    pub reason: String,
}

/// One model's aggregated metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub ssim: MetricCell,
    pub psnr: MetricCell,
    pub mae: MetricCell,
    pub mse: MetricCell,
    pub fid: MetricCell,
    pub simos: MetricCell,
    /// Per-slice segmentation IoU over the segmentation subset, when masks
    /// are available. Mean ± std of the per-patient label means.
    pub iou_2d: Option<MetricCell>,
    /// Whole-volume segmentation IoU over the segmentation subset.
    pub iou_3d: Option<MetricCell>,
    /// Alternative aggregation: all per-label scores pooled across
    /// patients before averaging. Both orders are reported since
    /// conventions vary across evaluation setups.
    #[serde(with = "float_repr::opt")]
    pub iou_2d_label_pooled: Option<f64>,
    #[serde(with = "float_repr::opt")]
    pub iou_3d_label_pooled: Option<f64>,
    pub slice_pooled: SlicePooledMetrics,
    pub patients_evaluated: Vec<String>,
    pub exclusions: Vec<PatientExclusion>,
}

/// Where every number in the report came from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub scale: MetricScale,
    pub normalization: NormalizationParams,
    pub seg_fraction: f64,
    pub test_patients: Vec<String>,
    pub seg_patients: Vec<String>,
    pub fid_embedder_id: String,
}

/// The full multi-model report.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ModelRow>,
    pub provenance: Provenance,
}

struct PatientOutcome {
    patient_id: String,
    ssim: f64,
    psnr: f64,
    mae: f64,
    mse: f64,
    simos: f64,
    n_slices: usize,
    slice_sums: (f64, f64, f64, f64), // ssim, psnr, mae, mse
    iou_2d: Option<f64>,
    iou_3d: Option<f64>,
    /// Per-label scores feeding the pooled aggregation variant.
    iou_2d_labels: Vec<f64>,
    iou_3d_labels: Vec<f64>,
    gt_embeddings: Option<EmbeddingSet>,
    pred_embeddings: Option<EmbeddingSet>,
}

fn find_existing(candidates: &[PathBuf]) -> Option<PathBuf> {
    candidates.iter().find(|p| p.is_file()).cloned()
}

/// Loads a model prediction: either a single volume
/// `<predictions>/<model>/<patient>.nii[.gz]` or a slice-stack directory
/// `<predictions>/<model>/<patient>/` holding a `slices.txt` index
/// (`z<TAB>filename` lines) plus one nz = 1 NIfTI per line. Slice stacks
/// are restacked with the ground-truth geometry.
fn load_prediction(
    config: &RunConfig,
    model: &str,
    patient: &PatientRecord,
    gt: &Volume,
) -> Result<Volume> {
    let base = config.predictions_dir.join(model);
    if let Some(path) = find_existing(&[
        base.join(format!("{}.nii", patient.patient_id)),
        base.join(format!("{}.nii.gz", patient.patient_id)),
    ]) {
        return read_nifti(path);
    }

    let stack_dir = base.join(&patient.patient_id);
    let index_path = stack_dir.join("slices.txt");
    if !index_path.is_file() {
        return Err(Error::Config(format!(
            "no prediction for patient {} under {}",
            patient.patient_id,
            base.display()
        )));
    }
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((z, name)) = line.split_once('\t') else {
            return Err(Error::format(
                &index_path,
                format!("line {}: expected z<TAB>filename", lineno + 1),
            ));
        };
        let z: usize = z.trim().parse().map_err(|_| {
            Error::format(
                &index_path,
                format!("line {}: bad slice index {z:?}", lineno + 1),
            )
        })?;
        entries.push((z, name.trim().to_string()));
    }
    entries.sort();
    let nz = gt.dims().2;
    let expected: Vec<usize> = (0..nz).collect();
    let got: Vec<usize> = entries.iter().map(|(z, _)| *z).collect();
    if got != expected {
        return Err(Error::Dimension(format!(
            "slice index of {} covers z = {got:?}, ground truth needs 0..{nz}",
            stack_dir.display()
        )));
    }

    let mut slices: Vec<Slice> = Vec::with_capacity(nz);
    let (sx, sy, _) = gt.spacing();
    for (z, name) in entries {
        let volume = read_nifti(stack_dir.join(&name))?;
        if volume.dims().2 != 1 {
            return Err(Error::Dimension(format!(
                "slice file {name} holds {} planes, expected 1",
                volume.dims().2
            )));
        }
        slices.push(Slice {
            pixels: volume.plane(0).to_owned(),
            index: z,
            spacing: (sx, sy),
        });
    }
    stack_slices(&slices, gt.geometry())
}

fn evaluate_patient(
    config: &RunConfig,
    model: &str,
    patient: &PatientRecord,
    in_seg_subset: bool,
) -> Result<PatientOutcome> {
    let gt_raw = read_nifti(&patient.ct_path)?.reinterpret(ValueKind::Hu)?;
    let gt_norm = preprocess_ct(&gt_raw, &config.normalization)?;

    let pred_norm = load_prediction(config, model, patient, &gt_norm)?;
    if pred_norm.dims() != gt_norm.dims() {
        return Err(Error::Dimension(format!(
            "prediction dims {:?} do not match ground truth {:?}",
            pred_norm.dims(),
            gt_norm.dims()
        )));
    }
    let pred_norm = pred_norm.reinterpret(ValueKind::Normalized).map_err(|_| {
        Error::Precondition(format!(
            "prediction for {} contains values outside [0, 1]; synthetic volumes must be normalized",
            patient.patient_id
        ))
    })?;

    let (gt_eval, pred_eval, peak) = match config.scale {
        MetricScale::Normalized => (gt_norm, pred_norm, 1.0),
        MetricScale::Hu => (
            denormalize_ct(&gt_norm, &config.normalization)?,
            denormalize_ct(&pred_norm, &config.normalization)?,
            config.normalization.hu_range(),
        ),
    };

    let nz = gt_eval.dims().2;
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for z in 0..nz {
        let gt_plane = gt_eval.plane(z);
        let pred_plane = pred_eval.plane(z);
        let px = pixel_metrics(pred_plane, gt_plane, peak)?;
        let s = ssim(pred_plane, gt_plane, &config.ssim)?;
        sums.0 += s;
        sums.1 += px.psnr;
        sums.2 += px.mae;
        sums.3 += px.mse;
    }
    let n = nz as f64;
    let simos_value = simos(gt_eval.view(), pred_eval.view())?;

    let embeddings = if config.fid_embedder == FidEmbedderChoice::BlockMean {
        let embedder = BlockMeanEmbedder::default();
        let gt_set = embed_slices((0..nz).map(|z| gt_eval.plane(z)), &embedder)?;
        let pred_set = embed_slices((0..nz).map(|z| pred_eval.plane(z)), &embedder)?;
        Some((gt_set, pred_set))
    } else {
        None
    };

    let (iou_2d, iou_3d) = if in_seg_subset {
        segmentation_iou(config, model, patient)?
    } else {
        (None, None)
    };
    let label_values = |result: &Option<crate::seg::LabelIou>| -> Vec<f64> {
        result
            .as_ref()
            .map(|r| r.per_label.values().copied().collect())
            .unwrap_or_default()
    };

    Ok(PatientOutcome {
        patient_id: patient.patient_id.clone(),
        ssim: sums.0 / n,
        psnr: sums.1 / n,
        mae: sums.2 / n,
        mse: sums.3 / n,
        simos: simos_value,
        n_slices: nz,
        slice_sums: sums,
        iou_2d_labels: label_values(&iou_2d),
        iou_3d_labels: label_values(&iou_3d),
        iou_2d: iou_2d.map(|r| r.mean),
        iou_3d: iou_3d.map(|r| r.mean),
        gt_embeddings: embeddings.as_ref().map(|(g, _)| g.clone()),
        pred_embeddings: embeddings.map(|(_, p)| p),
    })
}

/// Computes segmentation IoU for one patient when mask files exist.
///
/// Ground-truth masks live in the dataset (`mask.nii[.gz]`, and optionally
/// `mask2d.nii[.gz]` for per-slice segmentor output); synthetic masks in
/// `<predictions>/<model>/<patient>.mask.nii[.gz]` (and
/// `<patient>.mask2d.nii[.gz]`). Without dedicated 2D files the 3D masks
/// are evaluated plane by plane.
fn segmentation_iou(
    config: &RunConfig,
    model: &str,
    patient: &PatientRecord,
) -> Result<(Option<crate::seg::LabelIou>, Option<crate::seg::LabelIou>)> {
    let Some(gt_mask_path) = &patient.mask_path else {
        return Ok((None, None));
    };
    let base = config.predictions_dir.join(model);
    let Some(syn_mask_path) = find_existing(&[
        base.join(format!("{}.mask.nii", patient.patient_id)),
        base.join(format!("{}.mask.nii.gz", patient.patient_id)),
    ]) else {
        return Ok((None, None));
    };

    let gt_mask = read_label_mask(gt_mask_path, label_map_path_for(gt_mask_path))?;
    let syn_mask = read_label_mask(&syn_mask_path, label_map_path_for(&syn_mask_path))?;
    let iou_3d = mean_label_iou(&gt_mask, &syn_mask)?;

    let patient_dir = gt_mask_path.parent().unwrap_or(Path::new("."));
    let gt_2d_path = find_existing(&[
        patient_dir.join("mask2d.nii"),
        patient_dir.join("mask2d.nii.gz"),
    ]);
    let syn_2d_path = find_existing(&[
        base.join(format!("{}.mask2d.nii", patient.patient_id)),
        base.join(format!("{}.mask2d.nii.gz", patient.patient_id)),
    ]);
    let iou_2d = match (gt_2d_path, syn_2d_path) {
        (Some(gt_path), Some(syn_path)) => {
            let gt_2d = read_label_mask(&gt_path, label_map_path_for(&gt_path))?;
            let syn_2d = read_label_mask(&syn_path, label_map_path_for(&syn_path))?;
            slicewise_mean_label_iou(&gt_2d, &syn_2d)?
        }
        _ => slicewise_mean_label_iou(&gt_mask, &syn_mask)?,
    };
    Ok((Some(iou_2d), Some(iou_3d)))
}

fn test_records(config: &RunConfig) -> Result<Vec<PatientRecord>> {
    let manifest_path = config.dataset_root.join("manifest.csv");
    let records = if manifest_path.is_file() {
        read_manifest_csv(&manifest_path)?
    } else {
        crate::dataset::build_manifest(&config.dataset_root)?.records
    };
    let split = read_split_csv(&config.split_csv)?;
    let mut test: Vec<PatientRecord> = records
        .into_iter()
        .filter(|r| split.get(&r.patient_id) == Some(&SplitName::Test))
        .collect();
    test.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if test.is_empty() {
        return Err(Error::Config(
            "no test patients: check the split CSV against the dataset".into(),
        ));
    }
    Ok(test)
}

/// Evaluates one model over the test set.
pub fn evaluate_model(config: &RunConfig, model: &str) -> Result<ModelRow> {
    let records = test_records(config)?;
    let test_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let seg_ids = select_eval_subset(&test_ids, config.seg_fraction, config.seed)?;
    evaluate_model_on(config, model, &records, &seg_ids)
}

fn evaluate_model_on(
    config: &RunConfig,
    model: &str,
    records: &[PatientRecord],
    seg_ids: &[String],
) -> Result<ModelRow> {
    use rayon::prelude::*;

    let run = |record: &PatientRecord| {
        let in_seg = seg_ids.binary_search(&record.patient_id).is_ok();
        (
            record.patient_id.clone(),
            evaluate_patient(config, model, record, in_seg),
        )
    };
    // Records are evaluated in parallel but reduced in sorted-id order, so
    // aggregates are bitwise reproducible for any worker count.
    let outcomes: Vec<(String, Result<PatientOutcome>)> = if config.jobs == 1 {
        records.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| records.par_iter().map(run).collect())
    };

    let mut evaluated: Vec<PatientOutcome> = Vec::new();
    let mut exclusions: Vec<PatientExclusion> = Vec::new();
    for (patient_id, outcome) in outcomes {
        match outcome {
            Ok(o) => evaluated.push(o),
            Err(e) => exclusions.push(PatientExclusion {
                patient_id,
                reason: e.to_string(),
            }),
        }
    }
    if evaluated.is_empty() {
        return Err(Error::InsufficientData(format!(
            "model {model}: every test patient failed ({} exclusions)",
            exclusions.len()
        )));
    }

    let collect = |f: fn(&PatientOutcome) -> f64| -> Vec<f64> { evaluated.iter().map(f).collect() };
    let ssim_cell = aggregate(&collect(|o| o.ssim));
    let psnr_cell = aggregate(&collect(|o| o.psnr));
    let mae_cell = aggregate(&collect(|o| o.mae));
    let mse_cell = aggregate(&collect(|o| o.mse));
    let simos_cell = aggregate(&collect(|o| o.simos));

    let total_slices: usize = evaluated.iter().map(|o| o.n_slices).sum();
    let pooled = SlicePooledMetrics {
        ssim: evaluated.iter().map(|o| o.slice_sums.0).sum::<f64>() / total_slices as f64,
        psnr: evaluated.iter().map(|o| o.slice_sums.1).sum::<f64>() / total_slices as f64,
        mae: evaluated.iter().map(|o| o.slice_sums.2).sum::<f64>() / total_slices as f64,
        mse: evaluated.iter().map(|o| o.slice_sums.3).sum::<f64>() / total_slices as f64,
    };

    let fid = match config.fid_embedder {
        FidEmbedderChoice::BlockMean => {
            let mut gt_pool: Option<EmbeddingSet> = None;
            let mut pred_pool: Option<EmbeddingSet> = None;
            for o in &evaluated {
                let (gt_set, pred_set) = (
                    o.gt_embeddings
                        .as_ref()
                        .expect("block-mean run embeds every patient"),
                    o.pred_embeddings
                        .as_ref()
                        .expect("block-mean run embeds every patient"),
                );
                gt_pool = Some(match gt_pool {
                    None => gt_set.clone(),
                    Some(pool) => pool.concat(gt_set)?,
                });
                pred_pool = Some(match pred_pool {
                    None => pred_set.clone(),
                    Some(pool) => pool.concat(pred_set)?,
                });
            }
            let gt_stats = fit_gaussian(&gt_pool.expect("nonempty evaluated set"))?;
            let pred_stats = fit_gaussian(&pred_pool.expect("nonempty evaluated set"))?;
            frechet_distance(&pred_stats, &gt_stats)?
        }
        FidEmbedderChoice::External => {
            let dir = config.embeddings_dir.as_ref().expect("validated at load");
            let gt_set = read_embeddings(dir.join("gt.emb"), "external")?;
            let model_set = read_embeddings(dir.join(format!("{model}.emb")), "external")?;
            frechet_distance(&fit_gaussian(&model_set)?, &fit_gaussian(&gt_set)?)?
        }
    };

    let iou_values = |f: fn(&PatientOutcome) -> Option<f64>| -> Vec<f64> {
        evaluated.iter().filter_map(f).collect()
    };
    let iou_2d_values = iou_values(|o| o.iou_2d);
    let iou_3d_values = iou_values(|o| o.iou_3d);
    let pooled_labels = |f: fn(&PatientOutcome) -> &[f64]| -> Option<f64> {
        let all: Vec<f64> = evaluated
            .iter()
            .flat_map(|o| f(o).iter().copied())
            .collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    };

    Ok(ModelRow {
        model: model.to_string(),
        ssim: ssim_cell,
        psnr: psnr_cell,
        mae: mae_cell,
        mse: mse_cell,
        fid: MetricCell {
            mean: fid,
            std: None,
        },
        simos: simos_cell,
        iou_2d: (!iou_2d_values.is_empty()).then(|| aggregate(&iou_2d_values)),
        iou_3d: (!iou_3d_values.is_empty()).then(|| aggregate(&iou_3d_values)),
        iou_2d_label_pooled: pooled_labels(|o| &o.iou_2d_labels),
        iou_3d_label_pooled: pooled_labels(|o| &o.iou_3d_labels),
        slice_pooled: pooled,
        patients_evaluated: evaluated.iter().map(|o| o.patient_id.clone()).collect(),
        exclusions,
    })
}

/// Evaluates every configured model and assembles the report.
pub fn evaluate_all(config: &RunConfig) -> Result<MetricReport> {
    let records = test_records(config)?;
    let test_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let seg_ids = select_eval_subset(&test_ids, config.seg_fraction, config.seed)?;

    let mut rows = Vec::new();
    for model in &config.models {
        rows.push(evaluate_model_on(config, model, &records, &seg_ids)?);
    }
    Ok(MetricReport {
        rows,
        provenance: Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config.config_sha256.clone(),
            seed: config.seed,
            scale: config.scale,
            normalization: config.normalization,
            seg_fraction: config.seg_fraction,
            test_patients: test_ids,
            seg_patients: seg_ids,
            fid_embedder_id: match config.fid_embedder {
                FidEmbedderChoice::BlockMean => {
                    crate::metrics::SliceEmbedder::id(&BlockMeanEmbedder::default())
                }
                FidEmbedderChoice::External => "external".to_string(),
            },
        },
    })
}

/// Output format for [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn fmt_full(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

fn fmt_fixed(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.4}")
    }
}

fn fmt_cell_markdown(cell: &MetricCell) -> String {
    match cell.std {
        Some(std) => format!("{} ± {}", fmt_fixed(cell.mean), fmt_fixed(std)),
        None => fmt_fixed(cell.mean),
    }
}

fn fmt_opt_cell_markdown(cell: &Option<MetricCell>) -> String {
    cell.as_ref().map_or_else(|| "-".into(), fmt_cell_markdown)
}

fn opt_fields(cell: &Option<MetricCell>) -> (String, String) {
    match cell {
        Some(c) => (fmt_full(c.mean), c.std.map(fmt_full).unwrap_or_default()),
        None => (String::new(), String::new()),
    }
}

/// Renders a report deterministically. Metric columns carry the direction
/// markers (↑ better / ↓ better) in the markdown table.
pub fn render_report(report: &MetricReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Precondition("report contains no model rows".into()));
    }
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Numeric(format!("report serialization failed: {e}"))),
        ReportFormat::Csv => {
            let mut out = String::from(
                "model,ssim_mean,ssim_std,psnr_mean,psnr_std,mae_mean,mae_std,mse_mean,mse_std,\
                 fid,simos_mean,simos_std,iou2d_mean,iou2d_std,iou3d_mean,iou3d_std,\
                 patients_evaluated,patients_excluded\n",
            );
            for row in &report.rows {
                let (iou2d_mean, iou2d_std) = opt_fields(&row.iou_2d);
                let (iou3d_mean, iou3d_std) = opt_fields(&row.iou_3d);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.model,
                    fmt_full(row.ssim.mean),
                    fmt_full(row.ssim.std.unwrap_or(0.0)),
                    fmt_full(row.psnr.mean),
                    fmt_full(row.psnr.std.unwrap_or(0.0)),
                    fmt_full(row.mae.mean),
                    fmt_full(row.mae.std.unwrap_or(0.0)),
                    fmt_full(row.mse.mean),
                    fmt_full(row.mse.std.unwrap_or(0.0)),
                    fmt_full(row.fid.mean),
                    fmt_full(row.simos.mean),
                    fmt_full(row.simos.std.unwrap_or(0.0)),
                    iou2d_mean,
                    iou2d_std,
                    iou3d_mean,
                    iou3d_std,
                    row.patients_evaluated.len(),
                    row.exclusions.len(),
                ));
            }
            Ok(out)
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Model | SSIM ↑ | PSNR ↑ | MAE ↓ | MSE ↓ | FID ↓ | SIMOS ↓ | 2D IoU ↑ | 3D IoU ↑ |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|\n");
            for row in &report.rows {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    row.model,
                    fmt_cell_markdown(&row.ssim),
                    fmt_cell_markdown(&row.psnr),
                    fmt_cell_markdown(&row.mae),
                    fmt_cell_markdown(&row.mse),
                    fmt_cell_markdown(&row.fid),
                    fmt_cell_markdown(&row.simos),
                    fmt_opt_cell_markdown(&row.iou_2d),
                    fmt_opt_cell_markdown(&row.iou_3d),
                ));
            }
            out.push_str(&format!(
                "\nScale: {} | seed: {} | config: {} | toolkit: {}\n",
                report.provenance.scale,
                report.provenance.seed,
                &report.provenance.config_sha256[..12.min(report.provenance.config_sha256.len())],
                report.provenance.toolkit_version,
            ));
            for row in &report.rows {
                if !row.exclusions.is_empty() {
                    out.push_str(&format!(
                        "\n{}: {} patient(s) excluded: {}\n",
                        row.model,
                        row.exclusions.len(),
                        row.exclusions
                            .iter()
                            .map(|e| e.patient_id.as_str())
                            .collect::<Vec<_>>()
                            .join(", "),
                    ));
                }
            }
            Ok(out)
        }
    }
}
