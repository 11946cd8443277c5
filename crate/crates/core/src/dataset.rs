//! Patient manifests, stratified per-patient splitting, and cross-modality
//! slice pairing.
//!
//! Expected dataset layout:
//!
//! ```text
//! root/
//!   <patient_id>/
//!     mri.nii.gz  (or mri.nii)
//!     ct.nii.gz   (or ct.nii)
//!     mask.nii.gz (optional, with mask.labels.tsv sidecar)
//!     meta.txt    (key=value: region=brain|pelvis, hospital=A|B|C)
//! ```
//!
//! Splitting is per patient, never per slice: within each
//! (region, hospital) stratum, patient ids are sorted, shuffled by a
//! SplitMix64 stream seeded from `seed XOR fnv1a64("<region>/<hospital>")`,
//! and apportioned to train/val/test by largest remainder. The result is a
//! pure function of the manifest contents, the ratios and the seed —
//! record order never matters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::parse_kv_file;
use crate::nifti::{read_nifti, read_nifti_header};
use crate::rng::{fnv1a64, SplitMix64};
use crate::volume::{extract_transverse_slices, Slice};

/// Scanned anatomy.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Brain,
    Pelvis,
}

impl FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brain" => Ok(Region::Brain),
            "pelvis" => Ok(Region::Pelvis),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Brain => "brain",
            Region::Pelvis => "pelvis",
        })
    }
}

/// Source hospital.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Hospital {
    A,
    B,
    C,
}

impl FromStr for Hospital {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Hospital::A),
            "B" => Ok(Hospital::B),
            "C" => Ok(Hospital::C),
            other => Err(Error::Config(format!("unknown hospital {other:?}"))),
        }
    }
}

impl fmt::Display for Hospital {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hospital::A => "A",
            Hospital::B => "B",
            Hospital::C => "C",
        })
    }
}

/// One patient with paired modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub region: Region,
    pub hospital: Hospital,
    pub mri_path: PathBuf,
    pub ct_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// A patient directory that could not be turned into a record.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestExclusion {
    pub patient_id: String,
    pub reason: String,
}

/// Usable patients plus the report of what was skipped.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<PatientRecord>,
    pub exclusions: Vec<ManifestExclusion>,
}

fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["nii.gz", "nii"] {
        let candidate = dir.join(format!("{stem}.{ext}"));
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

/// Scans `root` and builds one record per patient directory that carries
/// both modalities and a valid sidecar. Incomplete patients are excluded
/// and reported; paired volumes with mismatched dims are a hard error.
pub fn build_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            entry.path().is_dir().then(|| entry.path())
        })
        .collect();
    dirs.sort();

    let mut manifest = Manifest::default();
    for dir in dirs {
        let patient_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut exclude = |reason: String| {
            manifest.exclusions.push(ManifestExclusion {
                patient_id: patient_id.clone(),
                reason,
            })
        };

        if patient_id.contains([',', '\n', '\r']) {
            exclude("patient id contains characters unsupported in manifests".into());
            continue;
        }
        let Some(mri_path) = find_volume(&dir, "mri") else {
            exclude("missing MRI volume".into());
            continue;
        };
        let Some(ct_path) = find_volume(&dir, "ct") else {
            exclude("missing CT volume".into());
            continue;
        };
        let meta_path = dir.join("meta.txt");
        if !meta_path.is_file() {
            exclude("missing meta.txt sidecar".into());
            continue;
        }
        let meta = parse_kv_file(&meta_path)?;
        let (region, hospital) = match (meta.get("region"), meta.get("hospital")) {
            (Some(r), Some(h)) => (Region::from_str(r)?, Hospital::from_str(h)?),
            _ => {
                exclude("meta.txt must define region and hospital".into());
                continue;
            }
        };

        let mri_dims = read_nifti_header(&mri_path)?.dims;
        let ct_dims = read_nifti_header(&ct_path)?.dims;
        if mri_dims != ct_dims {
            return Err(Error::Pairing(format!(
                "patient {patient_id}: MRI dims {mri_dims:?} do not match CT dims {ct_dims:?}"
            )));
        }

        manifest.records.push(PatientRecord {
            patient_id,
            region,
            hospital,
            mri_path,
            ct_path,
            mask_path: find_volume(&dir, "mask"),
        });
    }
    Ok(manifest)
}

/// Dataset partition names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split name {other:?}"))),
        }
    }
}

/// Train/val/test fractions. Must be nonnegative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Precondition(format!(
                "split ratios must be nonnegative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "split ratios must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Deterministic per-patient split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, SplitName>,
    pub seed: u64,
    pub ratios: SplitRatios,
    /// Strata too small to receive every split, reported but not fatal.
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn patients_in(&self, split: SplitName) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Renders the `patient_id,split` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,split\n");
        for (id, split) in &self.assignments {
            out.push_str(id);
            out.push(',');
            out.push_str(&split.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a `patient_id,split` CSV produced by [`SplitAssignment::to_csv`].
pub fn read_split_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, SplitName>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line == "patient_id,split" {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let Some((id, split)) = line.split_once(',') else {
            return Err(Error::format(
                path,
                format!("line {}: expected patient_id,split", lineno + 1),
            ));
        };
        if map
            .insert(id.to_string(), SplitName::from_str(split)?)
            .is_some()
        {
            return Err(Error::format(path, format!("duplicate patient id {id:?}")));
        }
    }
    Ok(map)
}

/// Largest-remainder apportionment of `total` items over the ratios.
/// Ties in the fractional remainders break toward the earlier split.
fn apportion(ratios: [f64; 3], total: usize) -> [usize; 3] {
    let quotas = ratios.map(|r| r * total as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % 3]] += 1;
    }
    counts
}

/// Splits patients into train/val/test, stratifying by (region, hospital)
/// so each split sees an even mix of anatomies and hospitals.
pub fn stratified_split(
    records: &[PatientRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;

    let mut strata: BTreeMap<(Region, Hospital), Vec<&str>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for record in records {
        if !seen.insert(record.patient_id.as_str()) {
            return Err(Error::Precondition(format!(
                "duplicate patient id {:?} in manifest",
                record.patient_id
            )));
        }
        strata
            .entry((record.region, record.hospital))
            .or_default()
            .push(&record.patient_id);
    }

    let nonzero_splits = ratios.as_array().iter().filter(|r| **r > 0.0).count();
    let mut assignment = SplitAssignment {
        assignments: BTreeMap::new(),
        seed,
        ratios,
        warnings: Vec::new(),
    };

    for ((region, hospital), mut ids) in strata {
        ids.sort_unstable();
        let stratum_seed = seed ^ fnv1a64(format!("{region}/{hospital}").as_bytes());
        SplitMix64::new(stratum_seed).shuffle(&mut ids);

        if ids.len() < nonzero_splits {
            assignment.warnings.push(format!(
                "stratum {region}/{hospital} has {} patient(s) for {nonzero_splits} nonzero splits",
                ids.len()
            ));
        }

        let counts = apportion(ratios.as_array(), ids.len());
        let mut cursor = ids.into_iter();
        for (split, count) in [
            (SplitName::Train, counts[0]),
            (SplitName::Val, counts[1]),
            (SplitName::Test, counts[2]),
        ] {
            for id in cursor.by_ref().take(count) {
                assignment.assignments.insert(id.to_string(), split);
            }
        }
    }
    Ok(assignment)
}

/// An aligned pair of transverse slices at the same z index.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub mri: Slice,
    pub ct: Slice,
}

/// Loads both modalities of a patient and pairs their slices index by
/// index.
pub fn pair_slices(record: &PatientRecord) -> Result<Vec<SlicePair>> {
    let mri = read_nifti(&record.mri_path)?;
    let ct = read_nifti(&record.ct_path)?;
    if mri.dims() != ct.dims() {
        return Err(Error::Pairing(format!(
            "patient {}: MRI dims {:?} do not match CT dims {:?}",
            record.patient_id,
            mri.dims(),
            ct.dims()
        )));
    }
    let pairs = extract_transverse_slices(&mri)
        .into_iter()
        .zip(extract_transverse_slices(&ct))
        .map(|(mri, ct)| SlicePair { mri, ct })
        .collect();
    Ok(pairs)
}

/// Renders the manifest CSV (`patient_id,region,hospital,mri_path,ct_path,mask_path`).
pub fn manifest_to_csv(records: &[PatientRecord]) -> String {
    let mut out = String::from("patient_id,region,hospital,mri_path,ct_path,mask_path\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.patient_id,
            r.region,
            r.hospital,
            r.mri_path.display(),
            r.ct_path.display(),
            r.mask_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        ));
    }
    out
}

/// Parses a manifest CSV produced by [`manifest_to_csv`].
pub fn read_manifest_csv(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        records.push(PatientRecord {
            patient_id: fields[0].to_string(),
            region: Region::from_str(fields[1])?,
            hospital: Hospital::from_str(fields[2])?,
            mri_path: PathBuf::from(fields[3]),
            ct_path: PathBuf::from(fields[4]),
            mask_path: (!fields[5].is_empty()).then(|| PathBuf::from(fields[5])),
        });
    }
    Ok(records)
}
