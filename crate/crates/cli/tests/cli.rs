//! End-to-end tests against the compiled binary: exit codes, report
//! files, determinism, sweeps, gradient checking, and stream tooling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvqa_core::config::ExperimentConfig;
use cvqa_core::datagen::DatagenConfig;

fn cvqa() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cvqa"));
    // Keep the ambient environment from leaking into determinism tests.
    cmd.env_remove("CVQA_OUT_DIR");
    cmd.env_remove("CVQA_SEED");
    cmd
}

fn tiny_config(seeds: Vec<u64>, out_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = DatagenConfig {
        d: 6,
        n: 3,
        l: 2,
        t: 1,
        vocab: 8,
        tasks: 2,
        visual_clusters: 3,
        query_clusters: 3,
        held_out_per_task: 1,
        train_per_task: 8,
        test_per_task: 4,
        region_noise: 0.05,
        query_noise: 0.05,
    };
    cfg.model.d_e = 6;
    cfg.model.d_att = 6;
    cfg.memory.capacity = 10;
    cfg.memory.k = 2;
    cfg.replay.capacity = 8;
    cfg.train.epochs = 1;
    cfg.run.seeds = seeds;
    cfg.run.out_dir = out_dir.display().to_string();
    cfg
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited by signal")
}

#[test]
fn run_writes_reports_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0], &out_dir);
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains(&format!("config {}", cfg.hash())));
    assert!(text.contains("standard: ap"));

    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("config_hash,seed,paradigm,task,ap,af,recognition,"));
    assert_eq!(csv.lines().count(), 3, "header plus one row per paradigm");

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let matrix = &json["per_seed"][0]["accuracy_matrix_standard"];
    assert_eq!(matrix[0].as_array().unwrap().len(), 1);
    assert_eq!(matrix[1].as_array().unwrap().len(), 2);
}

#[test]
fn rerun_reproduces_identical_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0, 1], &out_dir);
    let path = write_config(&cfg, dir.path());

    let first = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&first), 0);
    let kept = fs::read(out_dir.join("report.csv")).unwrap();

    // Fresh process, same resolved config, same output path.
    let second = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&second), 0);
    assert_eq!(kept, fs::read(out_dir.join("report.csv")).unwrap());
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0, 1, 2], &out_dir);
    let path = write_config(&cfg, dir.path());

    let serial = cvqa()
        .args(["run", "--jobs", "1", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&serial), 0);
    let kept = fs::read(out_dir.join("report.csv")).unwrap();

    let parallel = cvqa()
        .args(["run", "--jobs", "4", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&parallel), 0);
    assert_eq!(kept, fs::read(out_dir.join("report.csv")).unwrap());
}

#[test]
fn simplex_violation_exits_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(vec![0], dir.path());
    cfg.loss.phi = [0.5, 0.6, 0.1];
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    let lines: Vec<&str> = err.trim_end().lines().collect();
    assert_eq!(lines.len(), 1, "one machine-parsable line, got: {err}");
    assert!(lines[0].starts_with("error: config: "));
    assert!(lines[0].contains("loss.phi"));
}

#[test]
fn missing_config_file_exits_two() {
    let out = cvqa()
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).starts_with("error: config: "));
}

#[test]
fn theta1_outside_band_warns_but_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut cfg = tiny_config(vec![0], &out_dir);
    cfg.loss.theta1 = 0.7;
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 0);
    assert!(stderr(&out).contains("warning: loss.theta1"));
    assert!(out_dir.join("report.csv").exists());
}

#[test]
fn environment_overrides_seed_and_out_dir_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_dir = dir.path().join("from-config");
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let cfg = tiny_config(vec![0, 1], &cfg_dir);
    let path = write_config(&cfg, dir.path());

    // Environment redirects output and pins one seed.
    let out = cvqa()
        .args(["run", "--config"])
        .arg(&path)
        .env("CVQA_OUT_DIR", &env_dir)
        .env("CVQA_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(!cfg_dir.exists());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["run"]["seeds"], serde_json::json!([7]));

    // Explicit flags beat the environment.
    let out = cvqa()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--seed")
        .arg("3")
        .arg("--out-dir")
        .arg(&flag_dir)
        .env("CVQA_OUT_DIR", &env_dir)
        .env("CVQA_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(flag_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["run"]["seeds"], serde_json::json!([3]));
}

#[test]
fn bad_seed_environment_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(vec![0], dir.path());
    let path = write_config(&cfg, dir.path());
    let out = cvqa()
        .args(["run", "--config"])
        .arg(&path)
        .env("CVQA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("CVQA_SEED"));
}

#[test]
fn strategy_sweep_writes_two_reports_and_a_merged_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0], &out_dir);
    let path = write_config(&cfg, dir.path());

    let out = cvqa()
        .args(["sweep", "--axis", "strategy", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(out_dir.join("strategy_max_similarity.json").exists());
    assert!(out_dir.join("strategy_random.json").exists());

    let merged = fs::read_to_string(out_dir.join("sweep_strategy.csv")).unwrap();
    // Header plus 2 points x 1 seed x 2 paradigms.
    assert_eq!(merged.lines().count(), 5);
}

#[test]
fn memory_sweep_covers_the_scaled_capacities() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0], &out_dir);
    let path = write_config(&cfg, dir.path());

    let out = cvqa()
        .args(["sweep", "--axis", "memory_size", "--format", "csv", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    for capacity in [2, 4, 20, 40, 200] {
        assert!(out_dir.join(format!("memory_size_{capacity}.csv")).exists());
        assert!(!out_dir.join(format!("memory_size_{capacity}.json")).exists());
    }
    let merged = fs::read_to_string(out_dir.join("sweep_memory_size.csv")).unwrap();
    assert_eq!(merged.lines().count(), 11);
}

#[test]
fn alpha_beta_sweep_covers_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut cfg = tiny_config(vec![0], &out_dir);
    // Shrink further: the grid runs 25 experiments.
    cfg.data.train_per_task = 4;
    cfg.data.test_per_task = 2;
    let path = write_config(&cfg, dir.path());

    let out = cvqa()
        .args(["sweep", "--axis", "alpha_beta", "--format", "json", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let points: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("alpha_beta_") && n.ends_with(".json"))
        .collect();
    assert_eq!(points.len(), 25);

    let merged = fs::read_to_string(out_dir.join("sweep_alpha_beta.csv")).unwrap();
    // Header plus 25 points x 1 seed x 2 paradigms.
    assert_eq!(merged.lines().count(), 51);

    let one: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_dir.join("alpha_beta_0.6_0.2.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(one["config"]["ablation"]["alpha"], serde_json::json!(0.6));
    assert_eq!(one["config"]["ablation"]["beta"], serde_json::json!(0.2));
}

#[test]
fn gradcheck_passes_and_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(vec![0], dir.path());
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["gradcheck", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for group in ["gonf.scorer_w", "ama.w_gate", "dec.w_out"] {
        assert!(text.contains(group), "missing {group} in:\n{text}");
    }
    assert!(text.contains("all 23 parameter groups within tolerance"));
}

#[test]
fn gradcheck_corrupt_hook_fails_naming_the_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(vec![0], dir.path());
    let path = write_config(&cfg, dir.path());

    let out = cvqa()
        .args(["gradcheck", "--corrupt-group", "ama.w_vis", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(stdout(&out).contains("ama.w_vis"));
    let err = stderr(&out);
    assert!(err.starts_with("error: runtime: "));
    assert!(err.contains("ama.w_vis"));
}

#[test]
fn gradcheck_rejects_wide_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(vec![0], dir.path());
    cfg.data.d = 32;
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["gradcheck", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("data.d"));
}

#[test]
fn gradcheck_empty_filter_is_a_vacuous_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(vec![0], dir.path());
    let path = write_config(&cfg, dir.path());

    let out = cvqa()
        .args(["gradcheck", "--groups", "nosuch", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    assert!(stdout(&out).contains("vacuously passing"));
}

#[test]
fn gen_data_and_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![5], &out_dir);
    let path = write_config(&cfg, dir.path());

    let out = cvqa().args(["gen-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let stream = out_dir.join("stream_5.ndjson");
    assert!(stream.exists());

    let out = cvqa().arg("ingest").arg(&stream).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("version 1 d 6 n 3 L 2 T 1 vocab 8"));
    assert!(text.contains("task 0 (recognition): 8 train, 4 standard, 4 novel"));
    assert!(text.contains("ok: 2 tasks"));

    // A truncated record must fail cleanly with one error line.
    let content = fs::read_to_string(&stream).unwrap();
    let cut = content.len() - 40;
    fs::write(&stream, &content[..cut]).unwrap();
    let out = cvqa().arg("ingest").arg(&stream).output().unwrap();
    assert_eq!(exit_code(&out), 1);
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("error: runtime: "));
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let shipped = ExperimentConfig::from_toml(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
}

#[test]
fn shipped_smoke_config_runs_clean() {
    let dir = tempfile::tempdir().unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let out = cvqa()
        .args(["run", "--config", path, "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stderr(&out).is_empty(), "smoke config should not warn");
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn no_temp_files_survive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = tiny_config(vec![0], &out_dir);
    let path = write_config(&cfg, dir.path());

    let run = cvqa().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(exit_code(&run), 0);
    let sweep = cvqa()
        .args(["sweep", "--axis", "strategy", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&sweep), 0);

    let leftovers: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "temp files left behind: {leftovers:?}");
}
