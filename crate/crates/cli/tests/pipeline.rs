//! End-to-end pipeline behavior through the library API: prediction
//! ingestion variants, exclusions, scale switching, and noise ordering.

mod common;

use common::IDENTITY_DIMS;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sct_eval::metrics::{embed_slices, write_embeddings, BlockMeanEmbedder};
use sct_eval::nifti::write_nifti;
use sct_eval::report::{evaluate_all, evaluate_model, RunConfig};
use sct_eval::volume::{extract_transverse_slices, ValueKind, Volume, VolumeGeometry};

fn noisy(gt_norm: &Volume, sigma: f64, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    gt_norm
        .map(ValueKind::Normalized, |v| {
            (v + normal.sample(&mut rng)).clamp(0.0, 1.0)
        })
        .unwrap()
}

#[test]
fn lower_noise_dominates_on_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    common::write_model(&fixture, IDENTITY_DIMS, "low", |gt, p| {
        noisy(gt, 0.05, 100 + p as u64)
    });
    common::write_model(&fixture, IDENTITY_DIMS, "high", |gt, p| {
        noisy(gt, 0.10, 200 + p as u64)
    });
    common::write_config(&fixture, "low,high", "");

    let config = RunConfig::from_file(&fixture.config).unwrap();
    let report = evaluate_all(&config).unwrap();
    let low = &report.rows[0];
    let high = &report.rows[1];
    assert_eq!(low.model, "low");
    assert_eq!(high.model, "high");

    assert!(low.ssim.mean > high.ssim.mean);
    assert!(low.psnr.mean > high.psnr.mean);
    assert!(low.mae.mean < high.mae.mean);
    assert!(low.mse.mean < high.mse.mean);
    assert!(low.fid.mean < high.fid.mean);
    assert!(low.simos.mean < high.simos.mean);
    // Masks are identical external inputs for both models, so IoU ties.
    assert_eq!(low.iou_3d.unwrap().mean, high.iou_3d.unwrap().mean);
}

#[test]
fn missing_prediction_is_excluded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    std::fs::remove_file(fixture.predictions.join("toy").join("p02.nii")).unwrap();

    let config = RunConfig::from_file(&fixture.config).unwrap();
    let row = evaluate_model(&config, "toy").unwrap();
    assert_eq!(row.exclusions.len(), 1);
    assert_eq!(row.exclusions[0].patient_id, "p02");
    assert_eq!(
        row.patients_evaluated,
        vec!["p01".to_string(), "p03".to_string()]
    );
    // The survivors still reach the identity fixed point.
    assert_eq!(row.ssim.mean, 1.0);
    assert_eq!(row.mae.mean, 0.0);
}

#[test]
fn out_of_range_prediction_is_excluded_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    common::write_model(&fixture, IDENTITY_DIMS, "hot", |gt, _| {
        gt.map(ValueKind::Raw, |v| v * 2.0).unwrap()
    });
    common::write_config(&fixture, "hot", "");

    let config = RunConfig::from_file(&fixture.config).unwrap();
    let err = evaluate_model(&config, "hot").unwrap_err();
    // Every patient fails range validation, so the whole model errors out.
    assert!(err.to_string().contains("every test patient failed"));
}

#[test]
fn hu_scale_reaches_the_same_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    common::write_config(&fixture, "toy", "scale=hu\n");

    let config = RunConfig::from_file(&fixture.config).unwrap();
    assert_eq!(config.ssim.dynamic_range, 3000.0);
    let report = evaluate_all(&config).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.ssim.mean, 1.0);
    assert_eq!(row.mae.mean, 0.0);
    assert_eq!(row.mse.mean, 0.0);
    assert_eq!(row.simos.mean, 0.0);
    // Identity FID at HU scale: the eigensolve runs on covariances ~1e5,
    // so the numeric floor is larger than on normalized data.
    assert!(
        row.fid.mean <= 1e-3,
        "HU-scale identity FID {}",
        row.fid.mean
    );
}

#[test]
fn slice_stack_predictions_restack_on_gt_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());

    // Replace the volume predictions with per-slice stacks.
    let params = sct_eval::preprocess::NormalizationParams::default();
    let model_dir = fixture.predictions.join("stacked");
    for (p, id) in fixture.patients.iter().enumerate() {
        let gt_norm =
            sct_eval::preprocess::preprocess_ct(&common::ct_pattern(IDENTITY_DIMS, p), &params)
                .unwrap();
        let stack_dir = model_dir.join(id);
        std::fs::create_dir_all(&stack_dir).unwrap();
        let mut index = String::new();
        for slice in extract_transverse_slices(&gt_norm) {
            let name = format!("slice_{:04}.nii", slice.index);
            let (nx, ny) = slice.dims();
            let plane = Volume::new(
                slice.pixels.clone().insert_axis(Axis(0)),
                VolumeGeometry::new((nx, ny, 1), (1.0, 1.0, 1.0)).unwrap(),
                ValueKind::Raw,
            )
            .unwrap();
            write_nifti(&plane, stack_dir.join(&name)).unwrap();
            index.push_str(&format!("{}\t{}\n", slice.index, name));
        }
        std::fs::write(stack_dir.join("slices.txt"), index).unwrap();
        // Masks for the segmentation columns.
        write_nifti(
            &common::mask_pattern(IDENTITY_DIMS),
            model_dir.join(format!("{id}.mask.nii")),
        )
        .unwrap();
        std::fs::write(
            model_dir.join(format!("{id}.mask.labels.tsv")),
            common::LABEL_MAP,
        )
        .unwrap();
    }
    common::write_config(&fixture, "stacked", "");

    let config = RunConfig::from_file(&fixture.config).unwrap();
    let row = evaluate_model(&config, "stacked").unwrap();
    assert!(row.exclusions.is_empty());
    assert_eq!(row.ssim.mean, 1.0);
    assert_eq!(row.mae.mean, 0.0);
    assert_eq!(row.simos.mean, 0.0);
}

#[test]
fn external_embeddings_feed_the_frechet_distance() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    let emb_dir = dir.path().join("embeddings");
    std::fs::create_dir_all(&emb_dir).unwrap();

    // Identical external features -> near-zero distance.
    let params = sct_eval::preprocess::NormalizationParams::default();
    let gt_norm =
        sct_eval::preprocess::preprocess_ct(&common::ct_pattern(IDENTITY_DIMS, 0), &params)
            .unwrap();
    let slices: Vec<_> = (0..gt_norm.dims().2).map(|z| gt_norm.plane(z)).collect();
    let set = embed_slices(
        slices.iter().map(|s| s.reborrow()),
        &BlockMeanEmbedder::default(),
    )
    .unwrap();
    let external = sct_eval::metrics::EmbeddingSet::new(set.vectors.clone(), "external").unwrap();
    write_embeddings(&external, emb_dir.join("gt.emb")).unwrap();
    write_embeddings(&external, emb_dir.join("toy.emb")).unwrap();

    common::write_config(
        &fixture,
        "toy",
        &format!(
            "fid_embedder=external\nembeddings_dir={}\n",
            emb_dir.display()
        ),
    );
    let config = RunConfig::from_file(&fixture.config).unwrap();
    let row = evaluate_model(&config, "toy").unwrap();
    assert!(
        row.fid.mean <= 1e-6,
        "external identity FID {}",
        row.fid.mean
    );

    // Shifted features -> positive distance.
    let shifted =
        sct_eval::metrics::EmbeddingSet::new(external.vectors.mapv(|v| v + 0.25), "external")
            .unwrap();
    write_embeddings(&shifted, emb_dir.join("toy.emb")).unwrap();
    let row = evaluate_model(&config, "toy").unwrap();
    assert!(row.fid.mean > 0.01, "shifted external FID {}", row.fid.mean);
}

#[test]
fn seg_subset_covers_half_the_test_set_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = common::identity_fixture(dir.path());
    let config = RunConfig::from_file(&fixture.config).unwrap();
    let report = evaluate_all(&config).unwrap();

    // ceil(0.5 * 3) = 2 of 3 patients carry segmentation scores.
    assert_eq!(report.provenance.seg_patients.len(), 2);
    assert_eq!(report.provenance.test_patients.len(), 3);
    assert!(report
        .provenance
        .seg_patients
        .iter()
        .all(|p| report.provenance.test_patients.contains(p)));
    assert_eq!(report.provenance.seg_fraction, 0.5);
    assert_eq!(report.provenance.fid_embedder_id, "block-mean-8x8");
}
