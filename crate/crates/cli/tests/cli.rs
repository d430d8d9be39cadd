use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqcomm_cli::checkpoint;
use seqcomm_cli::config;
use seqcomm_cli::runner::{parse_seeds, train_seed};
use seqcomm_core::trainer::{Ablation, TrainConfig, Trainer};

const TINY: &str = r#"{
  "hidden": 8, "msg_dim": 2, "batch_size": 8, "k_inner": 2, "k_cg": 3,
  "mc_samples": 2, "mc_horizon": 3, "warmup": 4, "iterations": 4,
  "checkpoint_every": 2, "env": {"patients": 12, "horizon": 6}
}"#;

fn seqcomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcomm"))
        .args(args)
        .env("SEQCOMM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = seqcomm(&["--config", &cfg, "--mode", "train", "--seeds", "0,1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [0, 1] {
        let run = out.join("full").join(format!("seed_{}", seed));
        for f in ["effective_config.json", "metrics.jsonl", "summary.json", "final.ckpt"] {
            assert!(run.join(f).is_file(), "missing {}", f);
        }
        assert!(run.join("checkpoints/iter_000002.ckpt").is_file());
        assert!(run.join("checkpoints/iter_000004.ckpt").is_file());
        let rows = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
        assert_eq!(rows.lines().count(), 4);
    }
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config::parse(TINY).unwrap();
    let first = train_seed(&cfg, Some(dir.path())).unwrap();
    let saved = dir.path().join("full/seed_0/effective_config.json");
    let reloaded = config::load(Some(&saved)).unwrap();
    assert_eq!(reloaded, cfg);
    let second = train_seed(&reloaded, None).unwrap();
    assert_eq!(first.metrics.len(), second.metrics.len());
    for (a, b) in first.metrics.iter().zip(&second.metrics) {
        assert_eq!(a.episode_reward.to_bits(), b.episode_reward.to_bits());
        assert_eq!(a.hypergradient_norm.to_bits(), b.hypergradient_norm.to_bits());
    }
}

#[test]
fn checkpoint_restores_parameters_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config::parse(TINY).unwrap();
    train_seed(&cfg, Some(dir.path())).unwrap();
    let run = dir.path().join("full/seed_0");
    let restored = seqcomm_cli::load_run(&run).unwrap();
    let tensors = checkpoint::load(&run.join("final.ckpt")).unwrap();
    let fresh = Trainer::new(cfg).unwrap();
    let params = checkpoint::tensors_to_params(&fresh, &tensors).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&restored.params().theta), bits(&params.theta));
    assert_eq!(bits(&restored.params().w), bits(&params.w));
    assert_eq!(bits(&restored.params().target), bits(&params.target));
    let again = checkpoint::params_to_tensors(&restored, restored.params());
    assert_eq!(again, tensors);
}

#[test]
fn eval_reads_a_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let out = out.to_str().unwrap();
    assert!(seqcomm(&["--config", &cfg, "--mode", "train", "--out", out]).status.success());
    let o = seqcomm(&["--config", &cfg, "--mode", "eval", "--out", out, "--episodes", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/full/seed_0/eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 3);
    assert!(report["mean_reward"].as_f64().unwrap().is_finite());
}

#[test]
fn compare_writes_series_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = seqcomm(&["--config", &cfg, "--mode", "compare", "--iters", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let series = fs::read_to_string(out.join("compare_series.csv")).unwrap();
    let mut lines = series.lines();
    assert_eq!(lines.next().unwrap(), "iteration,method,seed,episode_reward,severity_improvement");
    assert_eq!(lines.count(), 6);
    let summary = fs::read_to_string(out.join("compare_summary.csv")).unwrap();
    let methods: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["full", "no_comm", "random"]);
}

#[test]
fn ablate_reports_five_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = seqcomm(&["--config", &cfg, "--mode", "ablate", "--iters", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let expected: Vec<&str> = Ablation::GRID.iter().map(|a| a.name()).collect();
    assert_eq!(names, expected);
    assert!(table.lines().nth(1).unwrap().contains(",0,0"), "full row has zero delta");
}

#[test]
fn ablation_flag_selects_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = seqcomm(&[
        "--config", &cfg, "--mode", "train", "--ablation", "no_comm", "--iters", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = config::load(Some(&out.join("no_comm/seed_0/effective_config.json"))).unwrap();
    assert_eq!(saved.ablation, Ablation::NoComm);
    assert_eq!(saved.iterations, 1);
}

#[test]
fn bad_config_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"k_inner": -3}"#).unwrap();
    let o = seqcomm(&["--config", path.to_str().unwrap(), "--mode", "train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("accepted keys"), "{}", err);
    assert!(err.contains("k_inner = "), "{}", err);
}

#[test]
fn unknown_ablation_and_bad_seeds_are_rejected() {
    assert_eq!(seqcomm(&["--ablation", "nope"]).status.code(), Some(2));
    assert_eq!(seqcomm(&["--seeds", "4..1"]).status.code(), Some(2));
    assert_eq!(seqcomm(&["--seeds", "1,1"]).status.code(), Some(2));
}

#[test]
fn mid_run_failure_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr_theta: 1e300, lr_w: 1e300, ..config::parse(TINY).unwrap() };
    let cfg = TrainConfig { iterations: 6, ..cfg };
    let record = train_seed(&cfg, Some(dir.path())).unwrap();
    let run = dir.path().join("full/seed_0");
    if let Some(err) = &record.summary.error {
        assert!(run.join("error.txt").is_file());
        assert!(!run.join("final.ckpt").exists());
        let rows = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
        assert_eq!(rows.lines().count(), record.metrics.len());
        assert!(record.metrics.len() < 6, "{}", err);
    } else {
        panic!("huge learning rates should overflow");
    }
}

#[test]
fn seed_lists_parse() {
    assert_eq!(parse_seeds("3").unwrap(), [3]);
    assert_eq!(parse_seeds("0..4").unwrap(), [0, 1, 2, 3, 4]);
    assert_eq!(parse_seeds("0..=1, 7").unwrap(), [0, 1, 7]);
    assert!(parse_seeds("").is_err());
    assert!(parse_seeds("x").is_err());
}
