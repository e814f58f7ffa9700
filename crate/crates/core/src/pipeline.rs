//! The two-stage training pipeline, evaluation, ablation and diagnostics,
//! operating on a dataset directory and an output directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneError};
use crate::checkpoint::{Checkpoint, CheckpointError, Stage};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, Detector, EvalError, ImageScore, ScoreReport, TargetResult};
use crate::hvq::{self, CodebookReport, HvqError, HvqModel};
use crate::lavit::{self, LavitError, LavitModel, LavitSample, TargetMode};
use crate::rng::{Rng, Stream};
use crate::synthgen::{self, Manifest, RgbImage, SceneSpec, Split, SynthError};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing prerequisite: run `{stage}` first ({} not found)", path.display())]
    Missing { stage: &'static str, path: PathBuf },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("HVQ checkpoint {} changed during LAViT training", .0.display())]
    HvqMutated(PathBuf),
    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Hvq(HvqError),
    #[error(transparent)]
    Lavit(LavitError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<HvqError> for PipelineError {
    fn from(e: HvqError) -> Self {
        match e {
            HvqError::Divergence { epoch, reason } => Self::Divergence(format!("HVQ epoch {epoch}: {reason}")),
            e => Self::Hvq(e),
        }
    }
}

impl From<LavitError> for PipelineError {
    fn from(e: LavitError) -> Self {
        match e {
            LavitError::Divergence { epoch, reason } => Self::Divergence(format!("LAViT epoch {epoch}: {reason}")),
            e => Self::Lavit(e),
        }
    }
}

impl PipelineError {
    /// Process exit status: 2 for a missing stage, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Missing { .. } => 2,
            Self::Divergence(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Progress sink for long-running stages.
pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::io::write_atomic(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

fn load_checkpoint(path: &Path, stage: Stage, producer: &'static str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(PipelineError::Missing {
            stage: producer,
            path: path.to_path_buf(),
        });
    }
    let ck = Checkpoint::load(path).map_err(|source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    ck.expect_stage(stage).map_err(|source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ck)
}

pub fn hvq_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("hvq.ckpt")
}

pub fn lavit_checkpoint_path(cfg: &RunConfig, mode: TargetMode) -> PathBuf {
    cfg.out_dir.join(format!("lavit-{mode}.ckpt"))
}

/// Worker pool sized by `LADMIM_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("LADMIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Manifest plus decoded images, in manifest order.
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(PipelineError::Missing {
                stage: "gen-data",
                path: mpath,
            });
        }
        let manifest = synthgen::read_manifest(dir)?;
        let images = manifest
            .images
            .iter()
            .map(|e| synthgen::read_image(dir, e))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { manifest, images })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.manifest.images[i].split == split)
            .collect()
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    Ok(synthgen::write_dataset(
        &SceneSpec::default(),
        &cfg.dataset_counts(),
        cfg.seed_data,
        &cfg.data_dir,
    )?)
}

/// Stage-one output held in memory.
pub struct TrainedHvq {
    pub backbone: Backbone,
    pub model: HvqModel<f32>,
    pub log: hvq::HvqTrainLog,
    /// Token grid `(h, w)`.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HvqMetrics {
    log: hvq::HvqTrainLog,
    grid: (usize, usize),
    backbone_hash: String,
    param_hash: String,
}

const BACKBONE_PREFIX: &str = "backbone.";

fn hvq_checkpoint(cfg: &RunConfig, t: &TrainedHvq) -> Result<Checkpoint> {
    let metrics = HvqMetrics {
        log: t.log.clone(),
        grid: t.grid,
        backbone_hash: t.backbone.hash_hex(),
        param_hash: t.model.params.hash_hex(),
    };
    let mut ck = Checkpoint::new(Stage::Hvq, cfg.clone(), t.log.epoch_loss.len(), serde_json::to_value(metrics)?);
    let (w, mean, std) = t.backbone.parts();
    let d = cfg.feature_dim;
    ck.push(format!("{BACKBONE_PREFIX}weight"), vec![w.len() / d, d], w.to_vec());
    ck.push(format!("{BACKBONE_PREFIX}mean"), vec![d], mean.to_vec());
    ck.push(format!("{BACKBONE_PREFIX}std"), vec![d], std.to_vec());
    ck.push_store(&t.model.params);
    Ok(ck)
}

/// Rebuilds the backbone and tokenizer from an HVQ checkpoint, using the
/// configuration recorded in it.
pub fn hvq_from_checkpoint(ck: &Checkpoint) -> Result<TrainedHvq> {
    let c = &ck.meta.config;
    let ckerr = |source| PipelineError::Checkpoint {
        path: PathBuf::from("<hvq>"),
        source,
    };
    let backbone = Backbone::from_parts(
        c.backbone(),
        ck.tensor(&format!("{BACKBONE_PREFIX}weight")).map_err(ckerr)?.to_vec(),
        ck.tensor(&format!("{BACKBONE_PREFIX}mean")).map_err(ckerr)?.to_vec(),
        ck.tensor(&format!("{BACKBONE_PREFIX}std")).map_err(ckerr)?.to_vec(),
    )?;
    let metrics: HvqMetrics = serde_json::from_value(ck.meta.metrics.clone())?;
    let (gh, gw) = metrics.grid;
    let mut model = HvqModel::<f32>::new(c.hvq(gh * gw), c.seed_init)?;
    ck.fill_store(&mut model.params).map_err(ckerr)?;
    Ok(TrainedHvq {
        backbone,
        model,
        log: metrics.log,
        grid: metrics.grid,
    })
}

fn features(backbone: &Backbone, img: &RgbImage) -> Result<Tensor<f32>> {
    Ok(backbone.extract(img)?.to_tensor())
}

/// Fits the backbone statistics and trains the tokenizer on the train split.
pub fn train_hvq_in_memory(cfg: &RunConfig, data: &Dataset, log: Log) -> Result<TrainedHvq> {
    cfg.validate()?;
    let train = data.indices(Split::Train);
    let mut backbone = Backbone::new(cfg.backbone(), cfg.seed_init);
    let imgs: Vec<&RgbImage> = train.iter().map(|&i| &data.images[i]).collect();
    backbone.fit_standardization(&imgs)?;
    let feats: Vec<Tensor<f32>> = imgs
        .iter()
        .map(|im| features(&backbone, im))
        .collect::<Result<_>>()?;
    let first = &data.images[0];
    let (gh, gw) = backbone.grid(first.width, first.height)?;
    let mut model = HvqModel::<f32>::new(cfg.hvq(gh * gw), cfg.seed_init)?;
    let hlog = hvq::train_hvq(&mut model, &feats, &cfg.hvq_train(), |e, loss, recon| {
        log(&format!("hvq epoch {:>4}  loss {loss:.5}  recon {recon:.5}", e + 1))
    })?;
    Ok(TrainedHvq {
        backbone,
        model,
        log: hlog,
        grid: (gh, gw),
    })
}

/// Writes `hvq.ckpt` for a trained tokenizer.
pub fn save_hvq(cfg: &RunConfig, trained: &TrainedHvq) -> Result<()> {
    let path = hvq_checkpoint_path(cfg);
    hvq_checkpoint(cfg, trained)?
        .save(&path)
        .map_err(|source| PipelineError::Checkpoint { path, source })
}

pub fn cmd_train_hvq(cfg: &RunConfig, log: Log) -> Result<TrainedHvq> {
    let data = Dataset::load(&cfg.data_dir)?;
    let trained = train_hvq_in_memory(cfg, &data, log)?;
    save_hvq(cfg, &trained)?;
    Ok(trained)
}

/// Tokenized view of one image for LAViT.
pub fn lavit_sample(cfg: &RunConfig, hvq: &TrainedHvq, img: &RgbImage, mode: TargetMode) -> Result<LavitSample<f32>> {
    let features = features(&hvq.backbone, img)?;
    let codes = hvq.model.codes(&features)?;
    let pixels = match mode {
        TargetMode::Pixels => Some(lavit::pixel_targets(img, cfg.cell())?),
        _ => None,
    };
    Ok(LavitSample {
        features,
        codes,
        pixels,
    })
}

pub struct TrainedLavit {
    pub model: LavitModel<f32>,
    pub log: lavit::LavitTrainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LavitMetrics {
    log: lavit::LavitTrainLog,
    hvq_param_hash: String,
    param_hash: String,
}

pub fn train_lavit_in_memory(
    cfg: &RunConfig,
    data: &Dataset,
    hvq: &TrainedHvq,
    mode: TargetMode,
    log: Log,
) -> Result<TrainedLavit> {
    cfg.validate()?;
    let train = data.indices(Split::Train);
    let samples: Vec<LavitSample<f32>> = train
        .iter()
        .map(|&i| lavit_sample(cfg, hvq, &data.images[i], mode))
        .collect::<Result<_>>()?;
    let (gh, gw) = hvq.grid;
    let mut model = LavitModel::<f32>::new(cfg.lavit(gh, gw, mode), cfg.seed_init)?;
    let llog = lavit::train_lavit(&mut model, &samples, &cfg.lavit_train(), cfg.mask_ratio, cfg.seed_mask, |e, l| {
        log(&format!("lavit[{mode}] epoch {:>4}  loss {l:.5}", e + 1))
    })?;
    Ok(TrainedLavit { model, log: llog })
}

/// Trains LAViT against the frozen tokenizer in `hvq.ckpt` and writes
/// `lavit-<mode>.ckpt`. The HVQ checkpoint file must be byte-identical
/// afterwards.
pub fn cmd_train_lavit(cfg: &RunConfig, mode: TargetMode, log: Log) -> Result<TrainedLavit> {
    let hpath = hvq_checkpoint_path(cfg);
    let hck = load_checkpoint(&hpath, Stage::Hvq, "train-hvq")?;
    let before = std::fs::read(&hpath).map_err(io_err("reading HVQ checkpoint"))?;
    let data = Dataset::load(&cfg.data_dir)?;
    let hvq = hvq_from_checkpoint(&hck)?;
    let hvq_hash = hvq.model.params.hash_hex();
    let trained = train_lavit_in_memory(cfg, &data, &hvq, mode, log)?;
    if hvq.model.params.hash_hex() != hvq_hash
        || std::fs::read(&hpath).map_err(io_err("reading HVQ checkpoint"))? != before
    {
        return Err(PipelineError::HvqMutated(hpath));
    }
    save_lavit(cfg, &hvq, &trained)?;
    Ok(trained)
}

/// Writes `lavit-<mode>.ckpt` for a model trained against `hvq`.
pub fn save_lavit(cfg: &RunConfig, hvq: &TrainedHvq, trained: &TrainedLavit) -> Result<()> {
    let mode = trained.model.cfg.mode;
    let mut run = cfg.clone();
    run.target = mode;
    let metrics = LavitMetrics {
        log: trained.log.clone(),
        hvq_param_hash: hvq.model.params.hash_hex(),
        param_hash: trained.model.params.hash_hex(),
    };
    let mut ck = Checkpoint::new(Stage::Lavit, run, trained.log.epoch_loss.len(), serde_json::to_value(metrics)?);
    ck.push_store(&trained.model.params);
    let path = lavit_checkpoint_path(cfg, mode);
    ck.save(&path)
        .map_err(|source| PipelineError::Checkpoint { path, source })
}

pub fn lavit_from_checkpoint(ck: &Checkpoint, hvq: &TrainedHvq) -> Result<LavitModel<f32>> {
    let c = &ck.meta.config;
    let (gh, gw) = hvq.grid;
    let mut model = LavitModel::<f32>::new(c.lavit(gh, gw, c.target), c.seed_init)?;
    ck.fill_store(&mut model.params)
        .map_err(|source| PipelineError::Checkpoint {
            path: PathBuf::from("<lavit>"),
            source,
        })?;
    Ok(model)
}

/// Raw scores of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScore {
    pub s_hvq: f64,
    pub s_lavit: f64,
    pub mask_std: f64,
}

/// Scores every image of the dataset. Image `i` draws its masks from
/// `(seed_eval, i)`, so results do not depend on thread count or order.
pub fn score_dataset(
    cfg: &RunConfig,
    data: &Dataset,
    hvq: &TrainedHvq,
    lavit: &LavitModel<f32>,
) -> Result<Vec<RawScore>> {
    let mode = lavit.cfg.mode;
    let score = |i: usize| -> Result<RawScore> {
        let s = lavit_sample(cfg, hvq, &data.images[i], mode)?;
        let s_hvq = hvq.model.structural_score(&s.features)?;
        let mut rng = Rng::derive(cfg.seed_eval, Stream::Eval, i as u64);
        let m = lavit.logical_score(&s, cfg.n_masks, cfg.mask_ratio, &mut rng)?;
        Ok(RawScore {
            s_hvq,
            s_lavit: m.mean,
            mask_std: m.std(),
        })
    };
    thread_pool().install(|| (0..data.images.len()).into_par_iter().map(score).collect())
}

/// Calibrates on the validation split and assembles scores of the test split.
pub fn assemble(
    data: &Dataset,
    raw: &[RawScore],
) -> Result<(eval::ScoreStats, Vec<ImageScore>)> {
    let val = data.indices(Split::Val);
    let stats = eval::calibrate(
        &val.iter().map(|&i| raw[i].s_hvq).collect::<Vec<_>>(),
        &val.iter().map(|&i| raw[i].s_lavit).collect::<Vec<_>>(),
    )?;
    let images = data
        .indices(Split::Test)
        .into_iter()
        .map(|i| {
            let e = &data.manifest.images[i];
            ImageScore::new(
                e.id.clone(),
                e.label,
                e.kind,
                raw[i].s_hvq,
                raw[i].s_lavit,
                raw[i].mask_std,
                &stats,
            )
        })
        .collect();
    Ok((stats, images))
}

fn report_config(cfg: &RunConfig, mode: TargetMode) -> Result<serde_json::Value> {
    let mut run = cfg.clone();
    run.target = mode;
    Ok(serde_json::to_value(run)?)
}

/// Evaluates in-memory models; the same code path backs `cmd_eval`.
pub fn evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    hvq: &TrainedHvq,
    lavit: &LavitModel<f32>,
) -> Result<ScoreReport> {
    let raw = score_dataset(cfg, data, hvq, lavit)?;
    let (stats, images) = assemble(data, &raw)?;
    Ok(eval::build_report(report_config(cfg, lavit.cfg.mode)?, stats, images, &[])?)
}

pub fn report_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("report.json")
}

pub fn scores_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("scores.csv")
}

pub fn write_report(dir: &Path, stem: &str, report: &ScoreReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(report)?)?;
    let csv_name = if stem == "report" {
        "scores.csv".to_string()
    } else {
        format!("scores-{}.csv", stem.trim_start_matches("report-"))
    };
    write_file(&dir.join(csv_name), eval::scores_csv(&report.images).as_bytes())
}

/// Loads both checkpoints for `cfg.target` and writes `report.json` and
/// `scores.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let hck = load_checkpoint(&hvq_checkpoint_path(cfg), Stage::Hvq, "train-hvq")?;
    let lck = load_checkpoint(&lavit_checkpoint_path(cfg, cfg.target), Stage::Lavit, "train-lavit")?;
    let data = Dataset::load(&cfg.data_dir)?;
    let hvq = hvq_from_checkpoint(&hck)?;
    let lavit = lavit_from_checkpoint(&lck, &hvq)?;
    let report = evaluate(cfg, &data, &hvq, &lavit)?;
    write_report(&cfg.out_dir, "report", &report)?;
    Ok(report)
}

/// Trains and evaluates one LAViT per target mode against the existing
/// tokenizer, then writes `ablation.json` with the per-target table and one
/// `report-<mode>.json` / `scores-<mode>.csv` pair per mode.
pub fn cmd_ablate(cfg: &RunConfig, modes: &[TargetMode], log: Log) -> Result<ScoreReport> {
    cfg.validate()?;
    let hck = load_checkpoint(&hvq_checkpoint_path(cfg), Stage::Hvq, "train-hvq")?;
    let data = Dataset::load(&cfg.data_dir)?;
    let hvq = hvq_from_checkpoint(&hck)?;
    let mut results = Vec::new();
    let mut main: Option<ScoreReport> = None;
    for &mode in modes {
        let trained = train_lavit_in_memory(cfg, &data, &hvq, mode, log)?;
        let report = evaluate(cfg, &data, &hvq, &trained.model)?;
        log(&format!(
            "target {mode}: fused SA {:.3} LA {:.3}",
            report.detectors[2].aurocs.sa, report.detectors[2].aurocs.la
        ));
        write_report(&cfg.out_dir, &format!("report-{mode}"), &report)?;
        results.push(TargetResult {
            mode,
            detectors: Detector::ALL
                .iter()
                .zip(&report.detectors)
                .map(|(d, row)| (d.as_str().to_string(), row.aurocs))
                .collect(),
        });
        if mode == cfg.target || main.is_none() {
            main = Some(report);
        }
    }
    let base = main.ok_or_else(|| PipelineError::Eval(EvalError::MissingConfig("no target modes".into())))?;
    let report = eval::build_report(base.config.clone(), base.stats, base.images, &results)?;
    write_file(&cfg.out_dir.join("ablation.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Per-object-kind code usage on the training split.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<CodebookReport> {
    let hck = load_checkpoint(&hvq_checkpoint_path(cfg), Stage::Hvq, "train-hvq")?;
    let data = Dataset::load(&cfg.data_dir)?;
    let hvq = hvq_from_checkpoint(&hck)?;
    let report = diagnose(&hvq, &data, hck.meta.config.cell())?;
    write_file(&cfg.out_dir.join("diagnostics.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

pub fn diagnose(hvq: &TrainedHvq, data: &Dataset, cell: usize) -> Result<CodebookReport> {
    let spec = data.spec();
    let train = data.indices(Split::Train);
    let feats: Vec<Tensor<f32>> = train
        .iter()
        .map(|&i| features(&hvq.backbone, &data.images[i]))
        .collect::<Result<_>>()?;
    let kinds: Vec<Vec<usize>> = train
        .iter()
        .map(|&i| synthgen::token_kinds(spec, &data.manifest.images[i].objects, cell))
        .collect();
    let mut names = vec!["background".to_string()];
    names.extend(spec.vocabulary.iter().map(|k| {
        format!(
            "{}_{:02x}{:02x}{:02x}",
            serde_json::to_value(k.shape).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            k.color[0],
            k.color[1],
            k.color[2]
        )
    }));
    Ok(hvq::codebook_diagnostics(&hvq.model, &feats, &kinds, names)?)
}

/// `gen-data`, `train-hvq`, `train-lavit` and `eval` in sequence.
pub fn run_all(cfg: &RunConfig, log: Log) -> Result<ScoreReport> {
    cmd_gen_data(cfg)?;
    cmd_train_hvq(cfg, log)?;
    cmd_train_lavit(cfg, cfg.target, log)?;
    cmd_eval(cfg)
}
