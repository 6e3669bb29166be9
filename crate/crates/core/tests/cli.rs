mod common;

use std::path::Path;
use std::process::Command;

use stereoinr::cli::{run, RunConfig, EXIT_ARTIFACT, EXIT_OK, EXIT_TRAINING, EXIT_USAGE};
use stereoinr::imaging::{load_png, save_png, synth_stereo_dataset, Manifest};
use stereoinr::metrics::MetricsReport;
use stereoinr::model::ModelConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereoinr"))
}

fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("stereoinr").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_run_config(dir: &Path, dataset: &Path, extra_train: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "dataset": "{}",
  "output_dir": "{}",
  "seed": 3,
  "model": {{
    "encoder": {{ "channels": 6, "n_blocks": 1, "adapter_bottleneck": 3, "scale_embed_dim": 4 }},
    "upsampler": {{ "posenc_freqs": 2, "hidden": 8, "mlp_layers": 2 }},
    "disparity": {{ "max_disparity": 4, "window": 5 }}
  }},
  "train": {{
    "total_steps": 3,
    "eval_every": 3,
    "checkpoint_every": 3,
    "n_holdout": 1,
    "val_scales": [2.0],
    "batch": {{ "lr_height": 12, "lr_width": 16, "n_queries": 64 }}{extra_train}
  }}
}}"#,
        p(dataset),
        p(&dir.join("run"))
    );
    let path = dir.join("run.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn help_exits_zero_for_every_command() {
    for cmd in [&[][..], &["synth"], &["train"], &["sr"], &["eval"], &["baseline"]] {
        let out = bin().args(cmd).arg("--help").output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("Usage"), "{cmd:?}");
    }
    let out = bin().args(["sr", "--help"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--checkpoint", "--left", "--right", "--scale", "--out-dir"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn config_errors_exit_two_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_args(&["train", "--config", p(&dir.path().join("missing.json"))]), EXIT_USAGE);

    let data = dir.path().join("data");
    synth_stereo_dataset(2, (64, 64), 1, &data).unwrap();
    let cfg = write_run_config(dir.path(), &data, ",\n    \"surprise\": 1");
    let out = bin().args(["train", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("run.json:") && err.contains("surprise"), "{err}");
    assert!(err.contains(":17:"), "{err}");

    let cfg = write_run_config(dir.path(), &dir.path().join("nowhere"), "");
    let out = bin().args(["train", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8(out.stderr).unwrap().contains("run.json:2:"));
}

#[test]
fn training_is_seeded_and_sr_writes_scaled_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_stereo_dataset(3, (64, 64), 2, &data).unwrap();
    let cfg = write_run_config(dir.path(), &data, "");
    let run_dir = dir.path().join("run");

    assert_eq!(run_args(&["train", "--config", p(&cfg), "--seed", "7"]), EXIT_OK);
    let first = std::fs::read(run_dir.join("last.ckpt")).unwrap();
    assert!(run_dir.join("best.ckpt").exists());
    assert!(run_dir.join("train_log.ndjson").exists());
    let reports: Vec<MetricsReport> =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval_report.json")).unwrap()).unwrap();
    assert!(reports[0].config_hash.is_some());
    assert_eq!(run_args(&["train", "--config", p(&cfg), "--seed", "7"]), EXIT_OK);
    assert_eq!(first, std::fs::read(run_dir.join("last.ckpt")).unwrap());

    let ckpt = run_dir.join("last.ckpt");
    let left = dir.path().join("in_L.png");
    let right = dir.path().join("in_R.png");
    let src = load_png(data.join("synth_0000_L.png")).unwrap().crop(0, 0, 32, 48).unwrap();
    save_png(&src, &left).unwrap();
    save_png(&src, &right).unwrap();
    let out = dir.path().join("sr");
    let sr = |scale: &str| run_args(&["sr", "--checkpoint", p(&ckpt), "--left", p(&left), "--right", p(&right), "--scale", scale, "--out-dir", p(&out)]);
    assert_eq!(sr("2.0"), EXIT_OK);
    assert_eq!(load_png(out.join("in_L_x2.png")).unwrap().dims(), (64, 96));
    assert_eq!(load_png(out.join("in_R_x2.png")).unwrap().dims(), (64, 96));
    assert_eq!(sr("3.7"), EXIT_OK);
    assert_eq!(load_png(out.join("in_L_x3.7.png")).unwrap().dims(), (118, 178));
    assert_eq!(sr("6"), EXIT_OK);
    assert_eq!(sr("0"), EXIT_USAGE);
    assert_eq!(sr("-1"), EXIT_USAGE);

    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let code = run_args(&["sr", "--checkpoint", p(&dir.path().join("bad.ckpt")), "--left", p(&left), "--right", p(&right), "--scale", "2", "--out-dir", p(&out)]);
    assert_eq!(code, EXIT_ARTIFACT);

    let report = dir.path().join("eval.json");
    assert_eq!(run_args(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--scales", "2,4", "--report", p(&report)]), EXIT_OK);
    let reports: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1].scale, 4.0);
    assert_eq!(reports[0].pairs.len(), 3);
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_stereo_dataset(2, (64, 64), 3, &data).unwrap();
    let cfg = write_run_config(dir.path(), &data, ",\n    \"lr0\": 1e300");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"total_steps\": 3", "\"total_steps\": 20");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(run_args(&["train", "--config", p(&cfg)]), EXIT_TRAINING);
}

#[test]
fn baseline_on_identity_fixture_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_stereo_dataset(2, (64, 96), 4, &data).unwrap();
    let report = dir.path().join("base.json");
    assert_eq!(run_args(&["baseline", "--dataset", p(&data), "--scales", "1", "--report", p(&report)]), EXIT_OK);
    let text = std::fs::read_to_string(&report).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/metrics_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for item in value.as_array().unwrap() {
        assert!(validator.is_valid(item));
    }
    let reports: Vec<MetricsReport> = serde_json::from_str(&text).unwrap();
    assert_eq!(reports[0].aggregate.psnr, 100.0);
    assert_eq!(reports[0].aggregate.score, 1.0);

    assert_eq!(run_args(&["baseline", "--dataset", p(&data), "--scales", "2,3", "--report", p(&report)]), EXIT_OK);
    let reports: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(reports.iter().all(|r| r.aggregate.psnr < 100.0 && r.method == "bicubic"));
}

#[test]
fn empty_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest {
        format: "stereoinr-dataset".into(),
        version: 1,
        seed: None,
        pairs: vec![],
    };
    std::fs::write(dir.path().join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let report = dir.path().join("r.json");
    assert_eq!(run_args(&["baseline", "--dataset", p(dir.path()), "--scales", "2", "--report", p(&report)]), EXIT_USAGE);
    assert!(!report.exists());
}

#[test]
fn shipped_toy_config_matches_compact_model() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json");
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg.model, ModelConfig::compact());
    assert_eq!(cfg.train.total_steps, 2000);
    cfg.train.validate().unwrap();
}
