//! Shared fixture builders for the integration and acceptance suites.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::Array3;

use sct_eval::nifti::write_nifti;
use sct_eval::preprocess::{preprocess_ct, NormalizationParams};
use sct_eval::volume::{ValueKind, Volume, VolumeGeometry};

pub const IDENTITY_DIMS: (usize, usize, usize) = (32, 32, 8);

/// CT voxel pattern whose normalized values are exactly representable in
/// float32: HU = -1000 + 3000 * (i / 256) with an integer i in [0, 256],
/// so a preprocess -> write(float32) -> read cycle reproduces the
/// normalized values bit for bit.
pub fn ct_pattern(dims: (usize, usize, usize), patient: usize) -> Volume {
    let (nx, ny, nz) = dims;
    let voxels = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let i = (7 * x + 3 * y + 11 * z + 5 * patient) % 257;
        -1000.0 + 3000.0 * (i as f64 / 256.0)
    });
    let geometry = VolumeGeometry::new(dims, (1.0, 1.0, 2.5)).unwrap();
    Volume::new(voxels, geometry, ValueKind::Hu).unwrap()
}

/// Two-label box mask covering a handful of planes.
pub fn mask_pattern(dims: (usize, usize, usize)) -> Volume {
    let (nx, ny, nz) = dims;
    let voxels = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let in_box = |lo: (usize, usize, usize), hi: (usize, usize, usize)| {
            (lo.0..hi.0).contains(&x) && (lo.1..hi.1).contains(&y) && (lo.2..hi.2).contains(&z)
        };
        if in_box((2, 2, 1), (nx / 2, ny / 2, nz / 2)) {
            1.0
        } else if in_box((nx / 2, ny / 3, nz / 3), (nx - 2, ny - 4, nz - 1)) {
            2.0
        } else {
            0.0
        }
    });
    let geometry = VolumeGeometry::new(dims, (1.0, 1.0, 2.5)).unwrap();
    Volume::new(voxels, geometry, ValueKind::Raw).unwrap()
}

pub const LABEL_MAP: &str = "1\tfemur\n2\tbladder\n";

pub struct Fixture {
    pub root: PathBuf,
    pub split_csv: PathBuf,
    pub predictions: PathBuf,
    pub config: PathBuf,
    pub output_dir: PathBuf,
    pub patients: Vec<String>,
}

/// Builds a 3-patient test-split dataset where the model "toy" predicts
/// the ground truth exactly (normalized CT copies plus identical masks).
pub fn identity_fixture(base: &Path) -> Fixture {
    build_fixture(base, IDENTITY_DIMS, 3, |gt_norm, _| gt_norm.clone())
}

/// Adds another model to an existing fixture, deriving its predictions
/// from the normalized ground truth (masks are identical copies).
pub fn write_model(
    fixture: &Fixture,
    dims: (usize, usize, usize),
    model: &str,
    predict: impl Fn(&Volume, usize) -> Volume,
) {
    let params = NormalizationParams::default();
    let model_dir = fixture.predictions.join(model);
    std::fs::create_dir_all(&model_dir).unwrap();
    for (p, id) in fixture.patients.iter().enumerate() {
        let gt_norm = preprocess_ct(&ct_pattern(dims, p), &params).unwrap();
        write_nifti(&predict(&gt_norm, p), model_dir.join(format!("{id}.nii"))).unwrap();
        write_nifti(
            &mask_pattern(dims),
            model_dir.join(format!("{id}.mask.nii")),
        )
        .unwrap();
        std::fs::write(model_dir.join(format!("{id}.mask.labels.tsv")), LABEL_MAP).unwrap();
    }
}

/// Rewrites the fixture's config with a different model list and extra
/// key=value lines.
pub fn write_config(fixture: &Fixture, models: &str, extra: &str) {
    std::fs::write(
        &fixture.config,
        format!(
            "dataset_root={}\nsplit_csv={}\npredictions_dir={}\nmodels={models}\nseed=17\n\
             output_dir={}\n{extra}",
            fixture.root.display(),
            fixture.split_csv.display(),
            fixture.predictions.display(),
            fixture.output_dir.display(),
        ),
    )
    .unwrap();
}

/// Builds a dataset plus predictions derived from the normalized ground
/// truth by `predict`.
pub fn build_fixture(
    base: &Path,
    dims: (usize, usize, usize),
    n_patients: usize,
    predict: impl Fn(&Volume, usize) -> Volume,
) -> Fixture {
    let params = NormalizationParams::default();
    let root = base.join("dataset");
    let predictions = base.join("predictions");
    let model_dir = predictions.join("toy");
    let output_dir = base.join("out");
    std::fs::create_dir_all(&model_dir).unwrap();

    let mut split_lines = String::from("patient_id,split\n");
    let mut patients = Vec::new();
    for p in 0..n_patients {
        let id = format!("p{:02}", p + 1);
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).unwrap();

        let gt = ct_pattern(dims, p);
        write_nifti(&gt, dir.join("ct.nii")).unwrap();
        // The MRI volume only matters structurally for the manifest.
        write_nifti(&gt, dir.join("mri.nii")).unwrap();

        let mask = mask_pattern(dims);
        write_nifti(&mask, dir.join("mask.nii")).unwrap();
        std::fs::write(dir.join("mask.labels.tsv"), LABEL_MAP).unwrap();

        let (region, hospital) = match p % 3 {
            0 => ("brain", "A"),
            1 => ("pelvis", "B"),
            _ => ("brain", "C"),
        };
        std::fs::write(
            dir.join("meta.txt"),
            format!("region={region}\nhospital={hospital}\n"),
        )
        .unwrap();

        let gt_norm = preprocess_ct(&gt, &params).unwrap();
        write_nifti(&predict(&gt_norm, p), model_dir.join(format!("{id}.nii"))).unwrap();
        write_nifti(&mask, model_dir.join(format!("{id}.mask.nii"))).unwrap();
        std::fs::write(model_dir.join(format!("{id}.mask.labels.tsv")), LABEL_MAP).unwrap();

        split_lines.push_str(&format!("{id},test\n"));
        patients.push(id);
    }

    let split_csv = base.join("split.csv");
    std::fs::write(&split_csv, split_lines).unwrap();

    let config = base.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "dataset_root={}\nsplit_csv={}\npredictions_dir={}\nmodels=toy\nseed=17\n\
             scale=normalized\noutput_dir={}\n",
            root.display(),
            split_csv.display(),
            predictions.display(),
            output_dir.display(),
        ),
    )
    .unwrap();

    Fixture {
        root,
        split_csv,
        predictions,
        config,
        output_dir,
        patients,
    }
}
