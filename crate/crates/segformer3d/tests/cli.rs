//! End-to-end tests of the `segformer3d` binary: exit-code contract, config
//! override precedence, and the gen-data -> train -> eval pipeline.

use std::path::Path;
use std::process::{Command, Output};

use segformer3d::config::OUT_DIR_ENV;
use segformer3d::model::ModelConfig;
use segformer3d::profiler;
use segformer3d::trainer::MetricsRecord;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segformer3d"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// --set arguments shrinking the model to the tiny test architecture.
const TINY_MODEL: &[&str] = &[
    "--set",
    "model.in_channels=2",
    "--set",
    "model.num_classes=3",
    "--set",
    "model.widths=[4,6,8,10]",
    "--set",
    "model.depths=[1,1,1,1]",
    "--set",
    "model.heads=[1,2,2,2]",
    "--set",
    "model.expansion=2",
    "--set",
    "model.decoder_width=8",
];
const TINY_DATA: &[&str] =
    &["--set", "data.modalities=2", "--set", "data.num_classes=3", "--set", "data.seed=77"];

#[test]
fn no_arguments_prints_help_and_exits_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out) + &stderr(&out);
    assert!(text.contains("Usage:"), "help text missing: {text}");
    assert!(text.contains("bench-attn"), "subcommand list missing: {text}");
}

#[test]
fn usage_errors_exit_2_and_validation_errors_exit_1() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["profile", "--no-such-flag"]).status.code(), Some(2));

    // Indivisible extent is caught by validation, not argument parsing.
    let out = run(&["profile", "--input", "1x4x48x48x48"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "diagnostic is not one line: {err}");
    assert!(err.starts_with("error:"), "unexpected diagnostic: {err}");

    // Wrong channel count in the input shape.
    let out = run(&["profile", "--input", "1x3x64x64x64"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected_before_any_work() {
    let out = run(&["--set", "train.epoch=5", "profile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown field"), "diagnostic: {}", stderr(&out));

    let out = run(&["--set", "mdoel.expansion=2", "profile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown field"), "diagnostic: {}", stderr(&out));
}

#[test]
fn profile_reports_the_reference_budget() {
    let out = run(&["profile", "--json"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let params = v["total_params"].as_u64().unwrap();
    assert_eq!(params, 4_367_364);
    assert!((4_300_000..=4_700_000).contains(&params));

    let out = run(&["profile", "--input", "1x4x128x128x128", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["total_flops"].as_u64().unwrap(), 103_151_616_000);

    // Table mode carries the counting convention and a total row.
    let out = run(&["profile"]);
    let table = stdout(&out);
    assert!(table.contains("total") && table.contains("multiply-add = 2 FLOPs"), "{table}");
}

#[test]
fn profile_matches_the_library_for_overridden_configs() {
    let out = run(&[
        "--set",
        "model.widths=[16,32,64,128]",
        "--set",
        "model.heads=[1,2,4,8]",
        "profile",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();

    let cfg = ModelConfig {
        widths: vec![16, 32, 64, 128],
        heads: vec![1, 2, 4, 8],
        ..ModelConfig::reference()
    };
    let want = profiler::count_params(&cfg).unwrap();
    assert_eq!(v["total_params"].as_u64().unwrap(), want.total_params);
}

#[test]
fn config_file_loads_and_cli_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, r#"{ "model": { "widths": [8, 12, 16, 20], "heads": [1, 2, 2, 2], "expansion": 2 } }"#)
        .unwrap();

    let out = run(&["--config", cfg_path.to_str().unwrap(), "profile", "--json"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let from_file: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let file_cfg = ModelConfig {
        widths: vec![8, 12, 16, 20],
        heads: vec![1, 2, 2, 2],
        expansion: 2,
        ..ModelConfig::reference()
    };
    assert_eq!(
        from_file["total_params"].as_u64().unwrap(),
        profiler::count_params(&file_cfg).unwrap().total_params
    );

    // The override replaces the file's widths but keeps its other fields.
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "model.widths=[8,12,16,24]",
        "profile",
        "--json",
    ]);
    let overridden: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let cli_cfg = ModelConfig { widths: vec![8, 12, 16, 24], ..file_cfg };
    assert_eq!(
        overridden["total_params"].as_u64().unwrap(),
        profiler::count_params(&cli_cfg).unwrap().total_params
    );
}

#[test]
fn bench_attn_flop_ratios_are_exactly_one_half_and_quarter() {
    let out = run(&["bench-attn", "--n", "512", "--r", "1,2,4", "--iters", "1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,r,heads,head_dim,score_flops,score_flop_ratio,wall_ms");
    assert_eq!(lines.len(), 4);

    let mut flops = Vec::new();
    let mut ratios = Vec::new();
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "512");
        flops.push(cols[4].parse::<u64>().unwrap());
        ratios.push(cols[5].parse::<f64>().unwrap());
    }
    assert_eq!(flops[0], 2 * 512 * 512 * 32);
    assert_eq!(flops[1] * 2, flops[0]);
    assert_eq!(flops[2] * 4, flops[0]);
    assert_eq!(ratios, vec![1.0, 0.5, 0.25]);
}

#[test]
fn bench_attn_rejects_ratios_that_do_not_divide_n() {
    let out = run(&["bench-attn", "--n", "100", "--r", "3", "--iters", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn gen_data_is_seed_reproducible_and_env_var_supplies_the_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for target in [&a, &b] {
        let out = run(&["gen-data", "--out", target.to_str().unwrap(), "--count", "2", "--seed", "5"]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let bytes_a = std::fs::read(a.join("sample_00000.vseg")).unwrap();
    let bytes_b = std::fs::read(b.join("sample_00000.vseg")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed produced different bytes");

    let out = run(&["gen-data", "--out", c.to_str().unwrap(), "--count", "2", "--seed", "6"]);
    assert_eq!(out.status.code(), Some(0));
    let bytes_c = std::fs::read(c.join("sample_00000.vseg")).unwrap();
    assert_ne!(bytes_a, bytes_c, "different seeds produced identical bytes");

    // No --out: the environment variable names the destination.
    let env_dir = dir.path().join("from_env");
    let out = bin()
        .args(["gen-data", "--count", "1"])
        .env(OUT_DIR_ENV, &env_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(env_dir.join("manifest.json").is_file());

    // Neither --out nor the env var: validation error.
    let out = bin().args(["gen-data", "--count", "1"]).env_remove(OUT_DIR_ENV).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_train_eval_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let eval_dir = dir.path().join("eval");
    let run_dir = dir.path().join("run");

    let gen = |target: &Path, count: &str, start: &str| {
        let mut args = TINY_DATA.to_vec();
        args.extend(["gen-data", "--out", target.to_str().unwrap(), "--count", count]);
        args.extend(["--start-index", start]);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    };
    gen(&train_dir, "4", "0");
    gen(&eval_dir, "2", "100");

    let mut args: Vec<&str> = TINY_MODEL.to_vec();
    let (t, e, r) =
        (train_dir.to_str().unwrap(), eval_dir.to_str().unwrap(), run_dir.to_str().unwrap());
    args.extend([
        "train", "--train-dir", t, "--eval-dir", e, "--out", r, "--epochs", "2", "--batch-size",
        "2", "--seed", "9",
    ]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("finished 4 steps"), "summary: {}", stdout(&out));
    assert!(run_dir.join("metrics.jsonl").is_file());
    assert!(run_dir.join("checkpoint_final").is_dir());

    let ckpt = run_dir.join("checkpoint_final");
    let mut args: Vec<&str> = TINY_MODEL.to_vec();
    args.extend([
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        eval_dir.to_str().unwrap(),
    ]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    // stdout is exactly one metrics-log record (machine-diffable schema).
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1, "eval stdout: {text}");
    let rec: MetricsRecord = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(rec.step, 4);
    let dice = rec.dice_per_class.expect("eval record carries dice");
    assert_eq!(dice.len(), 2);
    assert!(rec.mean_dice.is_some());
    assert!(rec.loss.is_finite());

    // The same seed trains to the same weights: re-run and compare blobs.
    let run_dir2 = dir.path().join("run2");
    let mut args: Vec<&str> = TINY_MODEL.to_vec();
    let r2 = run_dir2.to_str().unwrap();
    args.extend([
        "train", "--train-dir", t, "--eval-dir", e, "--out", r2, "--epochs", "2", "--batch-size",
        "2", "--seed", "9",
    ]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let blob1 = std::fs::read(run_dir.join("checkpoint_final/weights.bin")).unwrap();
    let blob2 = std::fs::read(run_dir2.join("checkpoint_final/weights.bin")).unwrap();
    assert_eq!(blob1, blob2, "seeded training is not reproducible across runs");
}

#[test]
fn train_without_required_directories_exits_1() {
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train-dir"), "diagnostic: {}", stderr(&out));
}
