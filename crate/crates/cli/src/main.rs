//! Command-line driver for the sct-eval toolkit.
//!
//! Every pipeline stage is a subcommand; see the project README for the
//! formats each one reads and writes. On failure the process exits
//! nonzero (2 for usage errors, 1 otherwise) after printing a single
//! machine-readable JSON error line to stderr:
//! {"error":{"kind":"...","message":"..."}}.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use sct_eval::dataset::{
    build_manifest, manifest_to_csv, read_manifest_csv, stratified_split, SplitRatios,
};
use sct_eval::error::{Error, Result};
use sct_eval::nifti::{read_nifti, write_nifti};
use sct_eval::preprocess::{
    build_multichannel, preprocess_ct, preprocess_mri, NormalizationParams,
};
use sct_eval::report::{
    evaluate_all, render_report, MetricReport, MetricScale, ReportFormat, RunConfig,
};
use sct_eval::seg::{
    label_map_path_for, mean_label_iou, read_label_mask, slicewise_mean_label_iou,
};
use sct_eval::volume::{
    extract_transverse_slices, stack_slices, Slice, ValueKind, Volume, VolumeGeometry,
};

#[derive(Parser)]
#[command(
    name = "sct-eval",
    version,
    about = "Evaluation toolkit for slice-based MRI-to-CT translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset directory into a patient manifest CSV.
    Ingest {
        /// Dataset root (one directory per patient).
        #[arg(long)]
        root: PathBuf,
        /// Manifest CSV to write.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Normalize a CT or MRI volume into [0, 1].
    Preprocess {
        /// ct (window normalization) or mri (percentile normalization).
        #[arg(long)]
        modality: String,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = -1000.0)]
        ct_floor: f64,
        #[arg(long, default_value_t = 2000.0)]
        ct_cap: f64,
        #[arg(long, default_value_t = 0.98)]
        mri_percentile: f64,
    },
    /// Assign patients to train/val/test, stratified by region and hospital.
    Split {
        /// Manifest CSV from `ingest`.
        #[arg(long)]
        manifest: PathBuf,
        /// Split CSV to write (patient_id,split).
        #[arg(long, short)]
        output: PathBuf,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decompose a volume into per-slice NIfTI files plus an index.
    Slices {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output_dir: PathBuf,
    },
    /// Restack per-slice NIfTI files into a volume using a template's geometry.
    Stack {
        /// Directory holding slices.txt and the slice files.
        #[arg(long)]
        input_dir: PathBuf,
        /// Volume whose geometry the stack should adopt.
        #[arg(long)]
        like: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Build multi-channel conditioning stacks from preprocessed volumes.
    Multichannel {
        #[arg(long)]
        mri: PathBuf,
        #[arg(long)]
        ct: PathBuf,
        /// Odd number of MRI channels per item.
        #[arg(long, short = 'k', default_value_t = 3)]
        channels: usize,
        #[arg(long, short)]
        output_dir: PathBuf,
    },
    /// Run the full evaluation described by a config file.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the metric scale (normalized or hu).
        #[arg(long)]
        scale: Option<String>,
        /// Override the worker count (0 = one per core).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score one pair of segmentation masks.
    SegEval {
        #[arg(long)]
        gt_mask: PathBuf,
        #[arg(long)]
        syn_mask: PathBuf,
        /// Label map for the ground-truth mask (default: sidecar .labels.tsv).
        #[arg(long)]
        gt_labels: Option<PathBuf>,
        /// Label map for the synthetic mask (default: sidecar .labels.tsv).
        #[arg(long)]
        syn_labels: Option<PathBuf>,
        /// 3d (whole volume) or 2d (per transverse plane).
        #[arg(long, default_value = "3d")]
        mode: String,
    },
    /// Render an evaluation report (written by `eval`) as csv/json/markdown.
    Report {
        /// report.json produced by `eval`.
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short, default_value = "markdown")]
        format: String,
        /// Output file (stdout when absent).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "ratios must be three comma-separated numbers, got {text:?}"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Config(format!("bad ratio {s:?}")))
    };
    Ok(SplitRatios {
        train: parse(parts[0])?,
        val: parse(parts[1])?,
        test: parse(parts[2])?,
    })
}

fn slice_to_volume(slice: &Slice, like: &VolumeGeometry) -> Result<Volume> {
    let (nx, ny) = slice.dims();
    let geometry = VolumeGeometry {
        dims: (nx, ny, 1),
        spacing: like.spacing,
        orientation: like.orientation.clone(),
    };
    Volume::new(
        slice.pixels.clone().insert_axis(ndarray::Axis(0)),
        geometry,
        ValueKind::Raw,
    )
}

fn read_slice_stack(dir: &Path) -> Result<Vec<Slice>> {
    let index_path = dir.join("slices.txt");
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
    let mut slices = Vec::with_capacity(entries.len());
    for (z, name) in entries {
        let volume = read_nifti(dir.join(&name))?;
        if volume.dims().2 != 1 {
            return Err(Error::Dimension(format!(
                "slice file {name} holds {} planes, expected 1",
                volume.dims().2
            )));
        }
        let (sx, sy, _) = volume.spacing();
        slices.push(Slice {
            pixels: volume.plane(0).to_owned(),
            index: z,
            spacing: (sx, sy),
        });
    }
    Ok(slices)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { root, output } => {
            let manifest = build_manifest(&root)?;
            std::fs::write(&output, manifest_to_csv(&manifest.records))
                .map_err(|e| Error::io(&output, e))?;
            for exclusion in &manifest.exclusions {
                eprintln!("excluded: {}: {}", exclusion.patient_id, exclusion.reason);
            }
            println!(
                "{} patient(s) ingested, {} excluded -> {}",
                manifest.records.len(),
                manifest.exclusions.len(),
                output.display()
            );
        }
        Command::Preprocess {
            modality,
            input,
            output,
            ct_floor,
            ct_cap,
            mri_percentile,
        } => {
            let params = NormalizationParams {
                ct_floor,
                ct_cap,
                mri_percentile,
            };
            let volume = read_nifti(&input)?;
            let normalized = match modality.as_str() {
                "ct" => preprocess_ct(&volume.reinterpret(ValueKind::Hu)?, &params)?,
                "mri" => preprocess_mri(&volume.reinterpret(ValueKind::RawMri)?, &params)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality {other:?} (expected ct or mri)"
                    )))
                }
            };
            write_nifti(&normalized, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Split {
            manifest,
            output,
            ratios,
            seed,
        } => {
            let records = read_manifest_csv(&manifest)?;
            let split = stratified_split(&records, parse_ratios(&ratios)?, seed)?;
            for warning in &split.warnings {
                eprintln!("warning: {warning}");
            }
            split.write_csv(&output)?;
            println!(
                "assigned {} patient(s) -> {}",
                split.assignments.len(),
                output.display()
            );
        }
        Command::Slices { input, output_dir } => {
            let volume = read_nifti(&input)?;
            std::fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
            let slices = extract_transverse_slices(&volume);
            let mut index = String::new();
            for slice in &slices {
                let name = format!("slice_{:04}.nii", slice.index);
                write_nifti(
                    &slice_to_volume(slice, volume.geometry())?,
                    output_dir.join(&name),
                )?;
                index.push_str(&format!("{}\t{}\n", slice.index, name));
            }
            let index_path = output_dir.join("slices.txt");
            std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
            println!(
                "wrote {} slice(s) under {}",
                slices.len(),
                output_dir.display()
            );
        }
        Command::Stack {
            input_dir,
            like,
            output,
        } => {
            let template = read_nifti(&like)?;
            let slices = read_slice_stack(&input_dir)?;
            let volume = stack_slices(&slices, template.geometry())?;
            write_nifti(&volume, &output)?;
            println!("stacked {} slice(s) -> {}", slices.len(), output.display());
        }
        Command::Multichannel {
            mri,
            ct,
            channels,
            output_dir,
        } => {
            let mri_volume = read_nifti(&mri)?;
            let ct_volume = read_nifti(&ct)?;
            let items = build_multichannel(
                &extract_transverse_slices(&mri_volume),
                &extract_transverse_slices(&ct_volume),
                channels,
            )?;
            std::fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
            let mut index = String::new();
            for item in &items {
                // Channels become the z axis of a (nx, ny, k) volume.
                let (nx, ny) = item.target.dims();
                let mut voxels = ndarray::Array3::zeros((channels, ny, nx));
                for (c, channel) in item.channels.iter().enumerate() {
                    voxels
                        .index_axis_mut(ndarray::Axis(0), c)
                        .assign(&channel.pixels);
                }
                let geometry = VolumeGeometry {
                    dims: (nx, ny, channels),
                    spacing: mri_volume.spacing(),
                    orientation: mri_volume.geometry().orientation.clone(),
                };
                let input_name = format!("mc_{:04}.nii", item.center_index);
                let target_name = format!("target_{:04}.nii", item.center_index);
                write_nifti(
                    &Volume::new(voxels, geometry, ValueKind::Raw)?,
                    output_dir.join(&input_name),
                )?;
                write_nifti(
                    &slice_to_volume(&item.target, ct_volume.geometry())?,
                    output_dir.join(&target_name),
                )?;
                index.push_str(&format!(
                    "{}\t{}\t{}\n",
                    item.center_index, input_name, target_name
                ));
            }
            let index_path = output_dir.join("index.txt");
            std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
            println!(
                "wrote {} item(s) under {}",
                items.len(),
                output_dir.display()
            );
        }
        Command::Eval {
            config,
            seed,
            scale,
            jobs,
        } => {
            let mut run_config = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                run_config.seed = seed;
            }
            if let Some(scale) = scale {
                run_config.scale = MetricScale::from_str(&scale)?;
                run_config.ssim.dynamic_range = match run_config.scale {
                    MetricScale::Normalized => 1.0,
                    MetricScale::Hu => run_config.normalization.hu_range(),
                };
            }
            if let Some(jobs) = jobs {
                run_config.jobs = jobs;
            }
            let report = evaluate_all(&run_config)?;
            std::fs::create_dir_all(&run_config.output_dir)
                .map_err(|e| Error::io(&run_config.output_dir, e))?;
            let report_path = run_config.output_dir.join("report.json");
            std::fs::write(&report_path, render_report(&report, ReportFormat::Json)?)
                .map_err(|e| Error::io(&report_path, e))?;
            for row in &report.rows {
                for exclusion in &row.exclusions {
                    eprintln!(
                        "excluded: {} / {}: {}",
                        row.model, exclusion.patient_id, exclusion.reason
                    );
                }
            }
            println!("wrote {}", report_path.display());
        }
        Command::SegEval {
            gt_mask,
            syn_mask,
            gt_labels,
            syn_labels,
            mode,
        } => {
            let gt_labels = gt_labels.unwrap_or_else(|| label_map_path_for(&gt_mask));
            let syn_labels = syn_labels.unwrap_or_else(|| label_map_path_for(&syn_mask));
            let gt = read_label_mask(&gt_mask, &gt_labels)?;
            let syn = read_label_mask(&syn_mask, &syn_labels)?;
            let result = match mode.as_str() {
                "3d" => mean_label_iou(&gt, &syn)?,
                "2d" => slicewise_mean_label_iou(&gt, &syn)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown mode {other:?} (expected 2d or 3d)"
                    )))
                }
            };
            println!(
                "{}",
                serde_json::to_string(&result)
                    .map_err(|e| Error::Numeric(format!("result serialization failed: {e}")))?
            );
        }
        Command::Report {
            input,
            format,
            output,
        } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let report: MetricReport = serde_json::from_str(&text)
                .map_err(|e| Error::format(&input, format!("not a report file: {e}")))?;
            let rendered = render_report(&report, ReportFormat::from_str(&format)?)?;
            match output {
                Some(path) => {
                    std::fs::write(&path, rendered).map_err(|e| Error::io(&path, e))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: String) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return;
        }
        Err(e) => {
            error_line("usage", e.to_string());
            std::process::exit(2);
        }
    };
    if let Err(error) = run(cli) {
        error_line(error.kind(), error.to_string());
        std::process::exit(1);
    }
}
