use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lms_fd_cli::{BudgetOutput, Summary};

fn lmsfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmsfd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, strategy: &str, fd: bool) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{"embed_dim": 8, "ffn_dim": 16, "n_layers": 1, "n_heads": 2, "ffn_strategy": "{strategy}", "lms_rank": 2, "seed": 3}},
  "train": {{"steps": 12, "batch_size": 4, "warmup": 4, "seed": 3, "fd_enabled": {fd}, "eval_interval": 6}},
  "data": {{"cipher": {{"languages": 3, "latent_vocab": 10, "min_len": 2, "max_len": 4, "train_sizes": [20, 8], "valid_per_pair": 4}}}}
}}"#
    );
    let path = dir.join(format!("{strategy}.json"));
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "lms", false);
    let mut summaries = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        let o = lmsfd(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        summaries.push(fs::read(out.join("summary.json")).unwrap());
        assert!(out.join("checkpoint.json").is_file());
        assert!(out.join("vocab.json").is_file());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn run_writes_metrics_and_both_routes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "lms_fd", true);
    let out = dir.path().join("out");
    let o = lmsfd(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let s = Summary::load(&out.join("summary.json")).unwrap();
    assert!(s.census_matches_budget);
    let ls = s.route("ls").unwrap();
    let shared = s.route("shared").unwrap();
    // hub-centric over 3 languages
    assert_eq!(ls.pairs.len(), 4);
    assert_eq!(
        ls.pairs.keys().collect::<Vec<_>>(),
        shared.pairs.keys().collect::<Vec<_>>()
    );

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let steps = records.iter().filter(|r| r["kind"] == "step").count();
    let evals = records.iter().filter(|r| r["kind"] == "eval").count();
    assert_eq!(steps, 12);
    assert_eq!(evals, 2);
    assert!(records
        .iter()
        .filter(|r| r["kind"] == "step")
        .all(|r| r["fd_loss"].is_number()));
}

#[test]
fn missing_config_exits_with_usage_code() {
    let o = lmsfd(&["run", "--config", "/nonexistent/run.json", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read config"));
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"model": {"ffn_strategy": "dense"}, "train": {"fd_enabled": true}}"#,
    )
    .unwrap();
    let o = lmsfd(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_without_arguments_prints_usage() {
    let o = lmsfd(&["budget"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn budget_json_roundtrips() {
    let o = lmsfd(&[
        "budget", "-L", "15", "-r", "4096", "-c", "1024", "-d", "32", "-E", "8", "--json",
    ]);
    assert!(o.status.success());
    let out: BudgetOutput = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(out.report.ls.train_extra_params, 62_914_560);
    assert_eq!(out.report.moe.train_extra_params, 33_554_432);
    assert_eq!(out.report.lms.train_extra_params, 2_457_600);
    assert_eq!(out.report.lms_fd.inference_extra_params, 163_840);
    let again = serde_json::to_string_pretty(&out).unwrap();
    assert_eq!(again.trim_end(), String::from_utf8_lossy(&o.stdout).trim_end());
}

#[test]
fn budget_rejects_zero_rank() {
    let o = lmsfd(&["budget", "-L", "2", "-r", "4", "-c", "4", "-d", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let dense = tiny_config(dir.path(), "dense", false);
    let lms = tiny_config(dir.path(), "lms", false);
    for (cfg, out) in [(&dense, "dense"), (&lms, "lms")] {
        let o = lmsfd(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let b = dir.path().join("dense/summary.json");
    let c = dir.path().join("lms/summary.json");
    let o = lmsfd(&["compare", b.to_str().unwrap(), c.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["baseline_route"], "ls");
    assert_eq!(report["pairs"].as_object().unwrap().len(), 4);

    let o = lmsfd(&["compare", b.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("win ratio:  0.0%"));

    let o = lmsfd(&[
        "compare",
        b.to_str().unwrap(),
        c.to_str().unwrap(),
        "--candidate-route",
        "shared",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_tsv_that_runs_accept() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("task.json");
    fs::write(&task, r#"{"languages": 3, "latent_vocab": 10, "min_len": 2, "max_len": 4, "train_sizes": [20, 8], "valid_per_pair": 4}"#).unwrap();
    let data = dir.path().join("data");
    let o = lmsfd(&[
        "gen-data",
        "--config",
        task.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = fs::read_to_string(data.join("train.tsv")).unwrap();
    // both directions per hub pair
    assert_eq!(train.lines().count(), 2 * (20 + 8));
    assert!(train.lines().all(|l| l.split('\t').count() == 4));

    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"model": {"embed_dim": 8, "ffn_dim": 16, "n_layers": 1, "n_heads": 2},
            "train": {"steps": 4, "batch_size": 4, "warmup": 2},
            "data": {"tsv": {"train": "data/train.tsv", "valid": "data/valid.tsv"}},
            "output_dir": "out"}"#,
    )
    .unwrap();
    let o = lmsfd(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = Summary::load(&dir.path().join("out/summary.json")).unwrap();
    assert_eq!(s.languages.len(), 3);
}
