//! End-to-end CLI pipeline: synth -> mask -> train -> eval -> predict,
//! exercised through the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cloudfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_micro_config(path: &Path) {
    fs::write(
        path,
        r#"{
  "steps": 2,
  "batch_size": 1,
  "learning_rate": 0.001,
  "use_split": false,
  "val_interval": 0,
  "log_interval": 0,
  "reformat_scale": 2,
  "channels": 8,
  "rdb_count": 2,
  "stage_count": 1,
  "rdb_layers": 2,
  "rdb_growth": 8,
  "window": 4,
  "heads": 2,
  "mlp_ratio": 2,
  "ssim_window": 5
}"#,
    )
    .unwrap();
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    // synth
    let out = cloudfuse(&[
        "synth", "--seed", "11", "--size", "16", "--fraction", "0.5", "--out-dir", data_s,
        "--count", "2",
    ]);
    ok(&out);
    let ids: Vec<_> = fs::read_dir(&data).unwrap().collect();
    assert_eq!(ids.len(), 6, "three files per triplet");

    // mask
    let cloudy = data.join("s0000000bf050.cloudy.bin");
    assert!(cloudy.exists());
    let mask_path = dir.path().join("mask.bin");
    let weights_path = dir.path().join("weights.bin");
    let out = cloudfuse(&[
        "mask",
        "--in",
        cloudy.to_str().unwrap(),
        "--out",
        mask_path.to_str().unwrap(),
        "--alpha",
        "0.8",
        "--threshold",
        "0.2",
        "--weight-out",
        weights_path.to_str().unwrap(),
    ]);
    ok(&out);
    let mask = cloudfuse_core::raster::load_raw(&mask_path).unwrap();
    assert_eq!(mask.channels, 1);
    assert!(mask.data.iter().all(|&v| v == 0.0f32 || v == 1.0f32));
    let weights = cloudfuse_core::raster::load_raw(&weights_path).unwrap();
    assert!(weights.data.iter().all(|&v| v == 0.8f32 || v == 0.2f32));

    // train
    let cfg_path = dir.path().join("config.json");
    write_micro_config(&cfg_path);
    let ckpt_path = dir.path().join("model.bin");
    let out = cloudfuse(&[
        "train",
        "--data",
        data_s,
        "--out",
        ckpt_path.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    ok(&out);
    assert!(ckpt_path.exists());

    // eval
    let report_path = dir.path().join("report.json");
    let out = cloudfuse(&[
        "eval",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--data",
        data_s,
        "--report",
        report_path.to_str().unwrap(),
    ]);
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n_patches"], 2);
    assert!(report["aggregate"]["psnr_db"].is_number() || report["aggregate"]["psnr_db"] == "inf");

    // predict with a grid
    let sar = data.join("s0000000bf050.sar.bin");
    let clear = data.join("s0000000bf050.clear.bin");
    let pred_path = dir.path().join("pred.bin");
    let grid_path = dir.path().join("grid.png");
    let out = cloudfuse(&[
        "predict",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--opt",
        cloudy.to_str().unwrap(),
        "--sar",
        sar.to_str().unwrap(),
        "--out",
        pred_path.to_str().unwrap(),
        "--grid",
        grid_path.to_str().unwrap(),
        "--gt",
        clear.to_str().unwrap(),
    ]);
    ok(&out);
    let pred = cloudfuse_core::raster::load_optical(&pred_path).unwrap();
    assert!(pred.values_in_unit_range());
    let png = fs::read(&grid_path).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn validation_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    // Missing input file.
    let out = cloudfuse(&[
        "mask",
        "--in",
        dir.path().join("absent.bin").to_str().unwrap(),
        "--out",
        dir.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Empty data directory.
    let cfg_path = dir.path().join("config.json");
    write_micro_config(&cfg_path);
    let out = cloudfuse(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("m.bin").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Bad fraction.
    let out = cloudfuse(&[
        "synth", "--seed", "1", "--size", "16", "--fraction", "1.5", "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&cloudfuse(&[
        "synth", "--seed", "30", "--size", "16", "--fraction", "0.5", "--out-dir",
        data.to_str().unwrap(), "--count", "2",
    ]));
    let cfg_path = dir.path().join("config.json");
    write_micro_config(&cfg_path);
    let report_path = dir.path().join("ablation.json");
    let out = cloudfuse(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--seeds",
        "1,2,3",
        "--steps",
        "1",
        "--config",
        cfg_path.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}
