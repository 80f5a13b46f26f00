//! End-to-end tests that drive the `gleason` binary as a subprocess.

use gleason_core::raster::{self, Raster};

use std::path::Path;
use std::process::{Command, Output};

fn gleason(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gleason"))
        .args(args)
        .output()
        .expect("failed to launch gleason binary")
}

fn run_ok(args: &[&str]) -> String {
    let out = gleason(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is not utf-8")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

/// Small dataset + tiny model so the full chain runs in seconds.
const TINY_CONFIG: &str = r#"{
    "data": {
        "num_scans": 4,
        "patches_per_scan": 2,
        "patch_size": 32,
        "texture_seed": 9,
        "test_fraction": 0.25,
        "val_fraction": 0.0
    },
    "model": {
        "in_channels": 3,
        "num_classes": 6,
        "patch_size": 32,
        "stage_widths": [8, 16],
        "blocks_per_stage": 1,
        "base_dilations": [1, 2],
        "hd_scales": [1, 2],
        "seed": 3
    },
    "train": {
        "loss": "hybrid",
        "batch_size": 4,
        "epochs": 2,
        "seed": 1
    }
}"#;

#[test]
fn synth_writes_a_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let stdout = run_ok(&[
        "synth",
        "--config",
        &config,
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(stdout.contains("8 patches across 4 scans"), "{stdout}");
    run_ok(&[
        "synth",
        "--config",
        &config,
        "--out",
        out_b.to_str().unwrap(),
    ]);

    let manifest_a = std::fs::read(out_a.join("manifest.jsonl")).unwrap();
    let manifest_b = std::fs::read(out_b.join("manifest.jsonl")).unwrap();
    assert_eq!(
        manifest_a, manifest_b,
        "same config must give identical manifests"
    );
    assert!(!manifest_a.is_empty());
}

#[test]
fn seed_flag_changes_the_generated_textures() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&[
        "synth",
        "--config",
        &config,
        "--seed",
        "100",
        "--out",
        out_a.to_str().unwrap(),
    ]);
    run_ok(&[
        "synth",
        "--config",
        &config,
        "--seed",
        "200",
        "--out",
        out_b.to_str().unwrap(),
    ]);

    let first_patch = |root: &Path| {
        let mut names: Vec<_> = std::fs::read_dir(root.join("patches"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        std::fs::read(&names[0]).unwrap()
    };
    assert_ne!(
        first_patch(&out_a),
        first_patch(&out_b),
        "seeds must change patch pixels"
    );
}

#[test]
fn tile_writes_patches_and_a_grid_plan() {
    let dir = tempfile::tempdir().unwrap();
    let image_path = dir.path().join("scan.png");
    let mut image = Raster::filled(70, 45, [200, 180, 210]);
    for y in 0..45 {
        for x in 0..70 {
            image.set(x, y, [(x * 3) as u8, (y * 5) as u8, 120]);
        }
    }
    raster::write_rgb(&image_path, &image).unwrap();

    let out = dir.path().join("tiles");
    let stdout = run_ok(&[
        "tile",
        "--image",
        image_path.to_str().unwrap(),
        "--scan-id",
        "s7",
        "--patch-size",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("6 patches"), "{stdout}");

    let grid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["rows"], 2);
    assert_eq!(grid["cols"], 3);
    assert_eq!(grid["patch_size"], 32);
    for row in 0..2 {
        for col in 0..3 {
            let name = format!("s7_r{row}_c{col}.png");
            assert!(out.join(&name).exists(), "missing {name}");
        }
    }
}

#[test]
fn train_evaluate_infer_grade_and_ablate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let data = dir.path().join("data");
    run_ok(&[
        "synth",
        "--config",
        &config,
        "--out",
        data.to_str().unwrap(),
    ]);
    let manifest = data.join("manifest.jsonl");
    let manifest = manifest.to_str().unwrap();

    // train
    let ckpt_dir = dir.path().join("ckpt");
    let stdout = run_ok(&[
        "train",
        "--config",
        &config,
        "--manifest",
        manifest,
        "--out",
        ckpt_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("final checkpoint:"), "{stdout}");
    let checkpoint = ckpt_dir.join("final.ckpt");
    assert!(checkpoint.exists());
    let checkpoint = checkpoint.to_str().unwrap();

    // evaluate the held-out split as JSON
    let stdout = run_ok(&[
        "evaluate",
        "--config",
        &config,
        "--checkpoint",
        checkpoint,
        "--manifest",
        manifest,
        "--split",
        "test",
        "--json",
    ]);
    let payload: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(payload["segmentation"]["split"], "test");
    assert_eq!(payload["segmentation"]["patches"], 2);
    assert!(payload["scans"].as_array().is_some_and(|s| s.len() == 1));
    assert!(payload["classification"]
        .as_array()
        .is_some_and(|c| !c.is_empty()));

    // the same command renders tables without --json
    let stdout = run_ok(&[
        "evaluate",
        "--config",
        &config,
        "--checkpoint",
        checkpoint,
        "--manifest",
        manifest,
        "--split",
        "test",
    ]);
    assert!(stdout.contains("split: test"), "{stdout}");
    assert!(stdout.contains("grade"), "{stdout}");

    // infer on one generated patch image
    let patch: Vec<_> = std::fs::read_dir(data.join("patches"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let image = patch.iter().min().unwrap().to_str().unwrap().to_string();
    let infer_dir = dir.path().join("infer");
    let stdout = run_ok(&[
        "infer",
        "--config",
        &config,
        "--checkpoint",
        checkpoint,
        "--image",
        &image,
        "--scan-id",
        "probe",
        "--out",
        infer_dir.to_str().unwrap(),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["scan_id"], "probe");
    assert!(report["assigned_grade"].is_string());
    assert!(infer_dir.join("probe_mask.png").exists());
    assert!(infer_dir.join("probe_overlay.png").exists());
    assert!(infer_dir.join("probe_report.json").exists());

    // the written mask PNG uses registered class colors, so grade accepts it
    let stdout = run_ok(&[
        "grade",
        infer_dir.join("probe_mask.png").to_str().unwrap(),
        "--scan-id",
        "probe",
        "--threshold",
        "1",
        "--json",
    ]);
    let graded: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(graded["scan_id"], "probe");
    assert_eq!(graded["threshold_used"], 1);

    // grading the dataset's own mask directory exercises directory expansion
    let stdout = run_ok(&["grade", data.join("masks").to_str().unwrap(), "--json"]);
    let graded: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(graded["grades_present"]
        .as_object()
        .is_some_and(|m| !m.is_empty()));

    // overlay a truth mask over its patch
    let mask: Vec<_> = std::fs::read_dir(data.join("masks"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let mask = mask.iter().min().unwrap().to_str().unwrap().to_string();
    let blended = dir.path().join("blend.png");
    run_ok(&[
        "overlay",
        "--image",
        &image,
        "--mask",
        &mask,
        "--alpha",
        "0.4",
        "--out",
        blended.to_str().unwrap(),
    ]);
    let blended_img = raster::read_rgb(&blended).unwrap();
    assert_eq!((blended_img.width(), blended_img.height()), (32, 32));

    // ablation over two loss selectors reuses the same manifest
    let ablate_dir = dir.path().join("ablate");
    let stdout = run_ok(&[
        "ablate",
        "--config",
        &config,
        "--manifest",
        manifest,
        "--losses",
        "l_c,l_h",
        "--out",
        ablate_dir.to_str().unwrap(),
        "--json",
    ]);
    let table: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["loss"], "cross_entropy");
    assert_eq!(rows[1]["loss"], "hybrid");
}

#[test]
fn errors_are_reported_as_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = gleason(&[
        "evaluate",
        "--config",
        &config,
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--manifest",
        "/nonexistent/manifest.jsonl",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let payload: serde_json::Value = serde_json::from_str(stderr.trim())
        .unwrap_or_else(|e| panic!("stderr not JSON ({e}): {stderr}"));
    assert_eq!(payload["error"]["kind"], "io");
    assert!(payload["error"]["message"]
        .as_str()
        .unwrap()
        .contains("model.ckpt"));
}

#[test]
fn invalid_loss_selector_is_rejected_at_parse_time() {
    let out = gleason(&[
        "ablate",
        "--manifest",
        "m.jsonl",
        "--losses",
        "l_c,bogus",
        "--out",
        "x",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "{stderr}");
}

#[test]
fn grade_handles_an_unregistered_mask_color_with_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.png");
    raster::write_rgb(&bad, &Raster::filled(4, 4, [7, 7, 7])).unwrap();
    let out = gleason(&["grade", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let payload: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(payload["error"]["kind"], "unregistered_color");
}
