//! `gleason` — command-line front end for the segmentation and grading toolkit.

use clap::{Parser, Subcommand};
use gleason_core::config::AppConfig;
use gleason_core::grading::{grade_scan, DEFAULT_THRESHOLD_WITH_POSTPROCESS};
use gleason_core::loss::LossKind;
use gleason_core::metrics::classification_report;
use gleason_core::model::SegmentationModel;
use gleason_core::synth::{generate_dataset, DatasetManifest, Split};
use gleason_core::{raster, report, tiling, train};
use gleason_core::{ClassMap, Error, Result};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Tissue segmentation and prostate cancer grading toolkit.
#[derive(Parser)]
#[command(name = "gleason", version, about)]
struct Cli {
    /// JSON configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the data, model and training seeds at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth {
        /// Output directory for patches, masks and the manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Cut a scan image into fixed-size patches.
    Tile {
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Scan identifier used in patch file names.
        #[arg(long, default_value = "scan")]
        scan_id: String,
        /// Patch edge length in pixels; defaults to the model patch size.
        #[arg(long)]
        patch_size: Option<u32>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a segmentation model on a dataset manifest.
    Train {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory for checkpoints.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Emit machine-readable JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Segment a scan image and grade it.
    Infer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Scan identifier for output file names; defaults to the image stem.
        #[arg(long)]
        scan_id: Option<String>,
        /// Skip morphological cleanup of the predicted mask.
        #[arg(long)]
        no_postprocess: bool,
        /// Minimum pixel count for a grade to count as present.
        #[arg(long)]
        threshold: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Emit the grading report as JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Grade a scan from already-predicted mask images.
    Grade {
        /// Mask PNG files or directories of them.
        #[arg(required = true, value_name = "PATH")]
        masks: Vec<PathBuf>,
        #[arg(long, default_value = "scan")]
        scan_id: String,
        /// Minimum pixel count for a grade to count as present.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_WITH_POSTPROCESS)]
        threshold: u64,
        /// Emit the grading report as JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Train once per loss selector and compare evaluation scores.
    Ablate {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Comma-separated loss selectors, e.g. l_c,l_h.
        #[arg(long, value_delimiter = ',', default_value = "l_c,l_h")]
        losses: Vec<LossKind>,
        /// Directory for per-run checkpoints.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Emit the comparison as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Blend a class mask over its source image.
    Overlay {
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[arg(long, value_name = "FILE")]
        mask: PathBuf,
        /// Mask opacity between 0 and 1.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload =
                serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.texture_seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    match &cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Tile {
            image,
            scan_id,
            patch_size,
            out,
        } => cmd_tile(&cfg, image, scan_id, *patch_size, out),
        Command::Train { manifest, out } => cmd_train(&cfg, manifest, out),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            json,
        } => cmd_evaluate(&cfg, checkpoint, manifest, *split, *json),
        Command::Infer {
            checkpoint,
            image,
            scan_id,
            no_postprocess,
            threshold,
            out,
            json,
        } => cmd_infer(
            &cfg,
            checkpoint,
            image,
            scan_id.as_deref(),
            *no_postprocess,
            *threshold,
            out,
            *json,
        ),
        Command::Grade {
            masks,
            scan_id,
            threshold,
            json,
        } => cmd_grade(masks, scan_id, *threshold, *json),
        Command::Ablate {
            manifest,
            losses,
            out,
            json,
        } => cmd_ablate(&cfg, manifest, losses, out, *json),
        Command::Overlay {
            image,
            mask,
            alpha,
            out,
        } => cmd_overlay(image, mask, *alpha, out),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_synth(cfg: &AppConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(&cfg.data, out)?;
    let scans: BTreeSet<&str> = manifest
        .entries()
        .iter()
        .map(|e| e.scan_id.as_str())
        .collect();
    println!(
        "generated {} patches across {} scans under {}",
        manifest.entries().len(),
        scans.len(),
        out.display()
    );
    println!("manifest: {}", out.join("manifest.jsonl").display());
    Ok(())
}

fn cmd_tile(
    cfg: &AppConfig,
    image: &Path,
    scan_id: &str,
    patch_size: Option<u32>,
    out: &Path,
) -> Result<()> {
    let pixels = raster::read_rgb(image)?;
    let patch = patch_size.unwrap_or(cfg.model.patch_size as u32);
    let plan = tiling::plan_grid(pixels.width() as u32, pixels.height() as u32, patch)?;
    let records = tiling::extract_patches(scan_id, &pixels, &plan, tiling::IMAGE_FILL)?;
    create_dir(out)?;
    for record in &records {
        let name = tiling::patch_file_name(&record.scan_id, record.row, record.col);
        raster::write_rgb(&out.join(name), &record.pixels)?;
    }
    write_text(
        &out.join("grid.json"),
        &serde_json::to_string_pretty(&plan)?,
    )?;
    println!(
        "wrote {} patches ({} rows x {} cols at {} px) to {}",
        records.len(),
        plan.rows,
        plan.cols,
        patch,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &AppConfig, manifest: &Path, out: &Path) -> Result<()> {
    let mut tcfg = cfg.train_config();
    tcfg.manifest_path = manifest.to_path_buf();
    tcfg.checkpoint_dir = out.to_path_buf();
    let outcome = train::train(&cfg.model, &tcfg)?;
    println!("{}", report::training_log_table(&outcome.log));
    if let Some(dice) = outcome.best_val_dice {
        println!("best validation mean DC: {dice:.4}");
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("best checkpoint:  {}", outcome.best_checkpoint.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &AppConfig,
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    json: bool,
) -> Result<()> {
    let model = SegmentationModel::<f32>::load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(manifest)?;
    let segmentation = train::evaluate(&model, &manifest, split)?;
    let (scans, tally) = train::evaluate_scan_grading(&model, &manifest, split, &cfg.postprocess)?;
    let classification = classification_report(&tally);
    if json {
        let payload = serde_json::json!({
            "segmentation": segmentation,
            "scans": scans,
            "classification": classification,
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        println!("{}", report::evaluation_table(&segmentation));
        println!();
        for scan in &scans {
            println!("{}", report::grading_summary(scan));
        }
        println!();
        println!("{}", report::classification_table(&classification));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &AppConfig,
    checkpoint: &Path,
    image: &Path,
    scan_id: Option<&str>,
    no_postprocess: bool,
    threshold: Option<u64>,
    out: &Path,
    json: bool,
) -> Result<()> {
    let model = SegmentationModel::<f32>::load_checkpoint(checkpoint)?;
    let pixels = raster::read_rgb(image)?;
    let scan_id = match scan_id {
        Some(id) => id.to_string(),
        None => image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scan".into()),
    };
    let mut opts = cfg.postprocess.clone();
    if no_postprocess {
        opts.postprocess = false;
    }
    if threshold.is_some() {
        opts.presence_threshold = threshold;
    }
    let inference = train::infer_scan(&model, &scan_id, &pixels, &opts)?;
    create_dir(out)?;
    let map = ClassMap::default();
    let mask_path = out.join(format!("{scan_id}_mask.png"));
    raster::write_mask(&mask_path, &inference.mask, &map)?;
    let overlay_path = out.join(format!("{scan_id}_overlay.png"));
    raster::write_rgb(
        &overlay_path,
        &raster::overlay(&pixels, &inference.mask, &map, 0.5)?,
    )?;
    let report_json = serde_json::to_string_pretty(&inference.report)?;
    let report_path = out.join(format!("{scan_id}_report.json"));
    write_text(&report_path, &report_json)?;
    if json {
        println!("{report_json}");
    } else {
        println!("{}", report::grading_summary(&inference.report));
        println!("mask:    {}", mask_path.display());
        println!("overlay: {}", overlay_path.display());
        println!("report:  {}", report_path.display());
    }
    Ok(())
}

fn cmd_grade(masks: &[PathBuf], scan_id: &str, threshold: u64, json: bool) -> Result<()> {
    let mut files = Vec::new();
    for path in masks {
        if path.is_dir() {
            let dir =
                std::fs::read_dir(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for entry in dir {
                let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
                let p = entry.path();
                if p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
                {
                    files.push(p);
                }
            }
        } else {
            files.push(path.clone());
        }
    }
    files.sort();
    let map = ClassMap::default();
    let rasters: Vec<_> = files
        .iter()
        .map(|p| raster::read_mask(p, &map))
        .collect::<Result<_>>()?;
    let graded = grade_scan(scan_id, &rasters, threshold)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&graded)?);
    } else {
        println!("{}", report::grading_summary(&graded));
    }
    Ok(())
}

fn cmd_ablate(
    cfg: &AppConfig,
    manifest: &Path,
    losses: &[LossKind],
    out: &Path,
    json: bool,
) -> Result<()> {
    let mut tcfg = cfg.train_config();
    tcfg.manifest_path = manifest.to_path_buf();
    tcfg.checkpoint_dir = out.to_path_buf();
    let table = train::run_loss_ablation(&cfg.model, &tcfg, losses)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        println!("{}", report::ablation_table(&table));
    }
    Ok(())
}

fn cmd_overlay(image: &Path, mask: &Path, alpha: f64, out: &Path) -> Result<()> {
    let map = ClassMap::default();
    let blended = raster::overlay(
        &raster::read_rgb(image)?,
        &raster::read_mask(mask, &map)?,
        &map,
        alpha,
    )?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    raster::write_rgb(out, &blended)?;
    println!("wrote {}", out.display());
    Ok(())
}
