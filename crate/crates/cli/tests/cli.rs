use std::path::Path;
use std::process::{Command, Output};

fn ladmim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladmim"))
        .args(args)
        .env("LADMIM_THREADS", "2")
        .output()
        .expect("spawn ladmim")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
    "train_normal": 10, "test_normal": 2, "test_logical": 2, "test_structural": 2,
    "pool": 2, "feature_dim": 8,
    "hvq_dim": 8, "hvq_depth": 2, "hvq_heads": 2, "hvq_mlp_dim": 8,
    "codebook_size": 4, "code_dim": 4, "hvq_epochs": 2,
    "lavit_dim": 8, "lavit_depth": 1, "lavit_heads": 2, "lavit_mlp_dim": 8, "lavit_epochs": 2,
    "n_masks": 3
}"#;

fn tiny_config(dir: &Path, extra: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let e: serde_json::Value = serde_json::from_str(extra).unwrap();
    for (k, x) in e.as_object().unwrap() {
        v[k] = x.clone();
    }
    let p = dir.join("config.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn show_config_applies_flags_over_defaults() {
    let o = ladmim(&["show-config", "--seed", "5", "--target", "codes", "--n-masks", "7", "--out", "x"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["seed_data", "seed_init", "seed_mask", "seed_eval"] {
        assert_eq!(v[k], 5, "{k}");
    }
    assert_eq!(v["target"], "codes");
    assert_eq!(v["n_masks"], 7);
    assert_eq!(v["data_dir"], "x/data");
    assert_eq!(v["hvq_epochs"], 40);
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&ladmim(&["no-such-command"])), 1);
    assert_eq!(code(&ladmim(&["show-config", "--mask-ratio", "1.5"])), 1);
    assert_eq!(code(&ladmim(&["show-config", "--target", "colors"])), 1);
    assert_eq!(code(&ladmim(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"hvq_dimension": 3}"#).unwrap();
    assert_eq!(code(&ladmim(&["show-config", "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn stages_run_in_order_and_missing_ones_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny_config(dir.path(), "{}");
    let run = |cmd: &str| ladmim(&[cmd, "--config", &cfg, "--out", out, "-q"]);
    for cmd in ["train-hvq", "train-lavit", "eval", "diagnose"] {
        let o = run(cmd);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("missing prerequisite"));
    }
    assert_eq!(code(&run("gen-data")), 0);
    assert_eq!(code(&run("eval")), 2);
    assert_eq!(code(&run("train-hvq")), 0);
    assert_eq!(code(&run("eval")), 2);
    assert_eq!(code(&run("train-lavit")), 0);
    let o = run("eval");
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("fused"), "{table}");
    for f in ["hvq.ckpt", "lavit-histogram.ckpt", "report.json", "scores.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(code(&run("diagnose")), 0);
    assert!(dir.path().join("diagnostics.json").exists());
    let o = ladmim(&["ablate", "--modes", "codes,pixels", "--config", &cfg, "--out", out, "-q"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("ablation.json").exists());
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"hvq_lr": 1e30, "warmup_steps": 0}"#);
    assert_eq!(code(&ladmim(&["gen-data", "--config", &cfg, "--out", out])), 0);
    let o = ladmim(&["train-hvq", "--config", &cfg, "--out", out, "-q"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(!dir.path().join("hvq.ckpt").exists());
}

#[test]
fn run_matches_the_staged_commands() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config(a.path(), "{}");
    let (pa, pb) = (a.path().to_str().unwrap(), b.path().to_str().unwrap());
    assert_eq!(code(&ladmim(&["run", "--config", &cfg, "--out", pa, "-q"])), 0);
    for cmd in ["gen-data", "train-hvq", "train-lavit", "eval"] {
        assert_eq!(code(&ladmim(&[cmd, "--config", &cfg, "--out", pb, "-q"])), 0);
    }
    let csv = |d: &Path| std::fs::read(d.join("scores.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
}
