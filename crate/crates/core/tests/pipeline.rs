use std::path::Path;

use ladmim::checkpoint::{Checkpoint, Stage};
use ladmim::eval;
use ladmim::lavit::TargetMode;
use ladmim::pipeline::{self, Dataset, PipelineError};
use ladmim::RunConfig;

fn tiny(dir: &Path) -> RunConfig {
    RunConfig {
        train_normal: 20,
        test_normal: 4,
        test_logical: 4,
        test_structural: 4,
        pool: 2,
        feature_dim: 16,
        hvq_dim: 16,
        hvq_depth: 2,
        hvq_heads: 2,
        hvq_mlp_dim: 16,
        codebook_size: 8,
        code_dim: 4,
        hvq_epochs: 2,
        hvq_batch_size: 4,
        lavit_dim: 16,
        lavit_depth: 2,
        lavit_heads: 2,
        lavit_mlp_dim: 16,
        lavit_epochs: 2,
        lavit_batch_size: 4,
        n_masks: 4,
        data_dir: dir.join("data"),
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn full_run_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline::run_all(&tiny(a.path()), &pipeline::quiet).unwrap();
    pipeline::run_all(&tiny(b.path()), &pipeline::quiet).unwrap();
    let csv = |d: &Path| std::fs::read(d.join("scores.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
    // The stored configs differ in their directories; the weights must not.
    let weights = |d: &Path| Checkpoint::load(&d.join("hvq.ckpt")).unwrap().payload_hash();
    assert_eq!(weights(a.path()), weights(b.path()));
    let text = String::from_utf8(csv(a.path())).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(eval::CSV_HEADER));
    assert_eq!(lines.count(), 12);
    assert_eq!(ra.images.len(), 12);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    assert!(json["detectors"].is_array());
}

#[test]
fn checkpoints_reproduce_in_memory_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::cmd_gen_data(&cfg).unwrap();
    let data = Dataset::load(&cfg.data_dir).unwrap();
    let hvq = pipeline::train_hvq_in_memory(&cfg, &data, &pipeline::quiet).unwrap();
    let lavit = pipeline::train_lavit_in_memory(&cfg, &data, &hvq, cfg.target, &pipeline::quiet).unwrap();
    let direct = pipeline::evaluate(&cfg, &data, &hvq, &lavit.model).unwrap();

    pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).unwrap();
    pipeline::cmd_train_lavit(&cfg, cfg.target, &pipeline::quiet).unwrap();
    let loaded = pipeline::cmd_eval(&cfg).unwrap();
    assert_eq!(eval::scores_csv(&direct.images), eval::scores_csv(&loaded.images));

    let ck = Checkpoint::load(&pipeline::hvq_checkpoint_path(&cfg)).unwrap();
    assert_eq!(ck.meta.stage, Stage::Hvq);
    assert_eq!(ck.meta.config, cfg);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.payload_hash(), ck.payload_hash());
}

#[test]
fn lavit_training_leaves_the_tokenizer_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).unwrap();
    let path = pipeline::hvq_checkpoint_path(&cfg);
    let before = std::fs::read(&path).unwrap();
    for mode in TargetMode::ALL {
        pipeline::cmd_train_lavit(&cfg, mode, &pipeline::quiet).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), before, "{mode}");
        assert!(pipeline::lavit_checkpoint_path(&cfg, mode).exists());
    }
}

#[test]
fn missing_prerequisites_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let stage = |e: PipelineError| match e {
        PipelineError::Missing { stage, .. } => {
            assert_eq!(PipelineError::Missing { stage, path: "x".into() }.exit_code(), 2);
            stage
        }
        e => panic!("unexpected {e}"),
    };
    assert_eq!(stage(pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).err().unwrap()), "gen-data");
    assert_eq!(stage(pipeline::cmd_train_lavit(&cfg, cfg.target, &pipeline::quiet).err().unwrap()), "train-hvq");
    assert_eq!(stage(pipeline::cmd_eval(&cfg).err().unwrap()), "train-hvq");
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).unwrap();
    assert_eq!(stage(pipeline::cmd_eval(&cfg).err().unwrap()), "train-lavit");
    assert_eq!(stage(pipeline::cmd_diagnose(&tiny(&dir.path().join("empty"))).err().unwrap()), "train-hvq");
}

#[test]
fn a_checkpoint_of_the_wrong_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).unwrap();
    std::fs::copy(
        pipeline::hvq_checkpoint_path(&cfg),
        pipeline::lavit_checkpoint_path(&cfg, cfg.target),
    )
    .unwrap();
    let e = pipeline::cmd_eval(&cfg).err().unwrap();
    assert!(matches!(e, PipelineError::Checkpoint { .. }), "{e}");
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn ablation_and_diagnostics_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_hvq(&cfg, &pipeline::quiet).unwrap();
    let modes = [TargetMode::Histogram, TargetMode::Codes];
    let r = pipeline::cmd_ablate(&cfg, &modes, &pipeline::quiet).unwrap();
    assert_eq!(r.targets.len(), 2);
    for m in modes {
        assert!(dir.path().join(format!("report-{m}.json")).exists());
        assert!(dir.path().join(format!("scores-{m}.csv")).exists());
    }
    assert!(dir.path().join("ablation.json").exists());
    let d = pipeline::cmd_diagnose(&cfg).unwrap();
    assert_eq!(d.layers.len(), cfg.hvq_depth);
    for l in &d.layers {
        let kinds: usize = l.contingency.iter().map(|row| row.iter().sum::<usize>()).sum();
        assert_eq!(kinds, l.counts.iter().sum::<usize>());
    }
}

#[test]
fn invalid_configs_are_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mask_ratio = 1.5;
    assert!(matches!(pipeline::cmd_gen_data(&cfg), Err(PipelineError::Config(_))));
    assert!(!cfg.data_dir.exists());
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"hvq_dim": 16, "no_such_field": 1}"#).unwrap();
    assert!(RunConfig::from_file(&path).is_err());
}
