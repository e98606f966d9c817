//! End-to-end tests of the `hivit` binary: output contracts and the
//! 0/1/2 exit-code convention (ok, check failure, usage).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hivit"));
    // A recipe without --out must fail as a usage error even when the
    // environment supplies a default.
    c.env_remove("HIVIT_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn profile_reports_reference_budget_and_exits_zero() {
    let out = run(&["profile", "--config", "hivit-t"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("total"), "{text}");
    assert!(text.contains("19197124"), "{text}");
    assert!(text.contains("reference hivit-t"), "{text}");
    assert!(text.contains("within the published budget"), "{text}");
}

#[test]
fn profile_json_is_versioned_and_machine_readable() {
    let out = run(&["profile", "--config", "hivit-t", "--json"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["schema"], "hivit.profile.v1");
    assert_eq!(doc["report"]["total_params"].as_u64(), Some(19197124));
    assert_eq!(doc["reference"]["params_ok"].as_bool(), Some(true));
    assert_eq!(doc["report"]["mim"]["per_token_ratio"].as_f64(), Some(4.0));
}

#[test]
fn profile_accepts_a_config_file_path() {
    let preset = repo_file("presets/hivit-s");
    let out = run(&["profile", "--config", preset.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("reference hivit-s"));
}

#[test]
fn profile_rejects_an_unknown_config() {
    let out = run(&["profile", "--config", "no-such-model"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("presets:"));
}

#[test]
fn verify_passes_on_the_toy_config() {
    let out = run(&["verify", "--config", "toy", "--trials", "1", "--probes", "2"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS  oracle-pre-main-f32"), "{text}");
    assert!(text.contains("all checks passed"), "{text}");
}

#[test]
fn verify_at_zero_tolerance_names_the_approximate_check() {
    let out = run(&[
        "verify", "--config", "toy", "--trials", "1", "--probes", "2", "--tol", "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL  gradient-check"));
    assert!(stderr(&out).contains("gradient-check"));
}

#[test]
fn verify_json_lists_every_check() {
    let out = run(&[
        "verify", "--config", "toy", "--trials", "1", "--probes", "2", "--json",
    ]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["schema"], "hivit.verify.v1");
    assert_eq!(doc["all_passed"].as_bool(), Some(true));
    assert_eq!(doc["checks"].as_array().unwrap().len(), 8);
}

#[test]
fn bench_prints_wall_and_analytic_ratios() {
    let out = run(&[
        "bench", "--config", "toy", "--batch", "1", "--warmups", "0", "--repeats", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("sparse step"), "{text}");
    assert!(text.contains("wall ratio sparse/dense"), "{text}");
    assert!(text.contains("analytic:"), "{text}");
}

#[test]
fn synth_rejects_an_unknown_kind() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("x.hvc");
    let out = run(&["synth", "--kind", "mandelbrot", "--count", "4", "--out", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mandelbrot"));
}

#[test]
fn train_pipeline_runs_and_mode_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("shapes.hvc");
    let out = run(&[
        "synth", "--kind", "labeled-shapes", "--count", "16", "--img-size", "32",
        "--out", corpus.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("4 classes"));

    let recipe = dir.path().join("ft.recipe");
    std::fs::write(&recipe, "mode = finetune\nepochs = 1\nbatch_size = 8\nbase_lr = 1e-3\n")
        .unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "finetune", "--config", "toy",
        "--recipe", recipe.to_str().unwrap(),
        "--corpus", corpus.to_str().unwrap(),
        "--val", corpus.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--threads", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("finetune: 2 steps"), "{text}");
    assert!(text.contains("accuracy"), "{text}");
    assert!(run_dir.join("checkpoint-ep1.hvck").exists());
    assert!(run_dir.join("metrics.jsonl").exists());

    // The same recipe under the wrong subcommand is a check failure.
    let out = run(&[
        "pretrain", "--config", "toy",
        "--recipe", recipe.to_str().unwrap(),
        "--corpus", corpus.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("recipe mode is finetune"));
}

#[test]
fn out_dir_defaults_to_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("blobs.hvc");
    let out = run(&["synth", "--kind", "gaussian-blobs", "--count", "8", "--out", corpus.to_str().unwrap()]);
    assert!(out.status.success());

    let recipe = dir.path().join("pre.recipe");
    std::fs::write(&recipe, "mode = pretrain\nepochs = 1\nbatch_size = 8\nbase_lr = 1e-3\n")
        .unwrap();
    let env_dir = dir.path().join("from-env");
    let out = bin()
        .env("HIVIT_OUT", &env_dir)
        .args([
            "pretrain", "--config", "toy",
            "--recipe", recipe.to_str().unwrap(),
            "--corpus", corpus.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(env_dir.join("checkpoint-ep1.hvck").exists());

    // Without the variable the same invocation is a usage error.
    let out = run(&[
        "pretrain", "--config", "toy",
        "--recipe", recipe.to_str().unwrap(),
        "--corpus", corpus.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["profile"]);
    assert_eq!(out.status.code(), Some(2));
}
