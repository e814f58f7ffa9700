//! Masked transformer for logical anomalies. Block-shaped regions of the
//! token grid are replaced with a learned mask embedding, and a single
//! prediction token is trained to output, per tokenizer layer, the histogram
//! of codes hidden under the mask. At test time the histogram error averaged
//! over several random masks is the logical anomaly score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gradcheck::{finite_difference_check, FdReport, Probe};
use crate::graph::{Graph, NodeId};
use crate::hvq::TrainConfig;
use crate::nn::{embedding, LayerNorm, Linear, TransformerBlock};
use crate::params::{AdamW, GradAccum, ParamId, ParamStore};
use crate::rng::{Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LavitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation requires target mode {expected}, model uses {actual}")]
    WrongMode { expected: TargetMode, actual: TargetMode },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// What the masked tokens are trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Pixels,
    Features,
    Codes,
    Histogram,
}

impl TargetMode {
    pub const ALL: [TargetMode; 4] = [
        TargetMode::Pixels,
        TargetMode::Features,
        TargetMode::Codes,
        TargetMode::Histogram,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::Pixels => "pixels",
            TargetMode::Features => "features",
            TargetMode::Codes => "codes",
            TargetMode::Histogram => "histogram",
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TargetMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown target mode '{s}' (expected pixels|features|codes|histogram)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A set of masked token positions on an `grid_h x grid_w` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ratio: f64,
    /// Sorted, unique.
    pub indices: Vec<usize>,
    /// Rectangles in the order they were sampled.
    pub blocks: Vec<Block>,
}

pub const MIN_BLOCK_AREA: usize = 4;
pub const MIN_ASPECT: f64 = 0.3;
pub const MAX_ASPECT: f64 = 1.0 / MIN_ASPECT;
const MAX_DRAWS: usize = 100_000;

impl MaskSpec {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.tokens()];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }

    /// Mask from an explicit index set (no block structure).
    pub fn from_indices(grid_h: usize, grid_w: usize, mut indices: Vec<usize>) -> Result<Self, LavitError> {
        let n = grid_h * grid_w;
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(LavitError::Mask("empty mask".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= n) {
            return Err(LavitError::Mask(format!("index {i} out of range for {n} tokens")));
        }
        Ok(Self {
            grid_h,
            grid_w,
            ratio: indices.len() as f64 / n as f64,
            indices,
            blocks: Vec::new(),
        })
    }
}

/// Number of cells a ratio masks on `n` tokens; errors if none or all.
pub fn mask_target(n: usize, ratio: f64) -> Result<usize, LavitError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(LavitError::Mask(format!("ratio {ratio} outside (0, 1)")));
    }
    let target = (ratio * n as f64).round() as usize;
    if target == 0 || target >= n {
        return Err(LavitError::Mask(format!(
            "ratio {ratio} masks {target} of {n} tokens"
        )));
    }
    Ok(target)
}

/// Samples rectangles (area >= 4 cells, aspect in [0.3, 1/0.3]) until at
/// least `round(ratio * N)` cells are covered, then drops the most recently
/// added cells to hit the target exactly.
pub fn make_block_mask(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec, LavitError> {
    let n = grid_h * grid_w;
    let target = mask_target(n, ratio)?;
    let mut masked = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut blocks = Vec::new();
    let mut draws = 0;
    while order.len() < target {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(LavitError::Mask(format!(
                "no block of area >= {MIN_BLOCK_AREA} fits a {grid_h}x{grid_w} grid"
            )));
        }
        let remaining = (target - order.len()) as f64;
        let area = rng.uniform(MIN_BLOCK_AREA as f64, remaining.max(MIN_BLOCK_AREA as f64) + 1e-9);
        let aspect = rng.uniform(MIN_ASPECT.ln(), MAX_ASPECT.ln()).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
        // Rounding and clamping can leave the allowed shape range.
        let realized = h as f64 / w as f64;
        if h * w < MIN_BLOCK_AREA || !(MIN_ASPECT..=MAX_ASPECT).contains(&realized) {
            continue;
        }
        let top = rng.below(grid_h - h + 1);
        let left = rng.below(grid_w - w + 1);
        blocks.push(Block {
            top,
            left,
            height: h,
            width: w,
        });
        for r in top..top + h {
            for c in left..left + w {
                let i = r * grid_w + c;
                if !masked[i] {
                    masked[i] = true;
                    order.push(i);
                }
            }
        }
    }
    order.truncate(target);
    order.sort_unstable();
    Ok(MaskSpec {
        grid_h,
        grid_w,
        ratio,
        indices: order,
        blocks,
    })
}

/// Normalized histogram of the codes at the masked positions.
pub fn compute_target_histogram(codes: &[usize], mask: &[usize], k: usize) -> Result<Vec<f64>, LavitError> {
    if mask.is_empty() {
        return Err(LavitError::Mask("empty mask".into()));
    }
    let mut h = vec![0.0; k];
    for &i in mask {
        let c = *codes
            .get(i)
            .ok_or_else(|| LavitError::Mask(format!("index {i} out of range")))?;
        if c >= k {
            return Err(LavitError::Shape(format!("code {c} >= K = {k}")));
        }
        h[c] += 1.0;
    }
    let n = mask.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// `sum_l sum_n |P_ln - Q_ln|`.
pub fn lavit_loss(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64, LavitError> {
    if p.len() != q.len() {
        return Err(LavitError::Shape(format!("{} predicted vs {} target layers", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        if a.len() != b.len() {
            return Err(LavitError::Shape(format!("histogram length {} vs {}", a.len(), b.len())));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total)
}

/// Raw RGB patches in token order, scaled to [0, 1]: `N x (3 * cell^2)`.
pub fn pixel_targets<T: Scalar>(img: &crate::synthgen::RgbImage, cell: usize) -> Result<Tensor<T>, LavitError> {
    if cell == 0 || img.width % cell != 0 || img.height % cell != 0 {
        return Err(LavitError::Shape(format!(
            "{}x{} image not divisible by cell {cell}",
            img.width, img.height
        )));
    }
    let (gh, gw) = (img.height / cell, img.width / cell);
    let width = 3 * cell * cell;
    let mut data = Vec::with_capacity(gh * gw * width);
    for ty in 0..gh {
        for tx in 0..gw {
            for dy in 0..cell {
                for dx in 0..cell {
                    let c = img.get(tx * cell + dx, ty * cell + dy);
                    data.extend(c.iter().map(|&v| T::of(v as f64 / 255.0)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, width], data)?)
}

/// Everything LAViT needs about one training or test image.
#[derive(Debug, Clone)]
pub struct LavitSample<T> {
    /// Backbone features `N x d0`.
    pub features: Tensor<T>,
    /// Tokenizer codes, `L x N`.
    pub codes: Vec<Vec<usize>>,
    /// Raw patches, only needed in pixels mode.
    pub pixels: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LavitConfig {
    pub in_dim: usize,
    pub dim: usize,
    /// Transformer depth `L'`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Tokenizer codebook size `K`.
    pub codebook_size: usize,
    /// Tokenizer depth `L` (one histogram head per layer).
    pub hvq_depth: usize,
    /// Width of a raw pixel patch (pixels mode).
    pub pixel_dim: usize,
    pub mode: TargetMode,
}

impl LavitConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<(), LavitError> {
        let bad = |m: &str| Err(LavitError::Config(m.into()));
        if self.depth == 0 || self.hvq_depth == 0 {
            return bad("depths must be >= 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if [self.in_dim, self.dim, self.mlp_dim, self.grid_h, self.grid_w, self.pixel_dim].contains(&0) {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LavitModel<T> {
    pub cfg: LavitConfig,
    pub params: ParamStore<T>,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pred_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    /// Histogram and codes modes: one head per tokenizer layer. Pixels and
    /// features modes: a single regression head.
    pub out_heads: Vec<Linear>,
}

/// Per-mask scores of one image and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub mean: f64,
    pub values: Vec<f64>,
}

impl MaskScores {
    /// Sample standard deviation across masks (0 for a single mask).
    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let var = self.values.iter().map(|v| (v - self.mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    }
}

impl<T: Scalar> LavitModel<T> {
    pub fn new(cfg: LavitConfig, seed: u64) -> Result<Self, LavitError> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, Stream::Init, 3);
        let mut s = ParamStore::new();
        let embed = Linear::new(&mut s, "lavit.embed", cfg.in_dim, cfg.dim, true, &mut rng);
        let mask_token = embedding(&mut s, "lavit.mask_token", &[1, cfg.dim], &mut rng);
        let pred_token = embedding(&mut s, "lavit.pred_token", &[1, cfg.dim], &mut rng);
        let pos = embedding(&mut s, "lavit.pos", &[cfg.tokens(), cfg.dim], &mut rng);
        let blocks = (0..cfg.depth)
            .map(|l| TransformerBlock::new(&mut s, &format!("lavit.blk{l}"), cfg.dim, cfg.heads, cfg.mlp_dim, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut s, "lavit.norm", cfg.dim);
        let out_heads = match cfg.mode {
            TargetMode::Histogram | TargetMode::Codes => (0..cfg.hvq_depth)
                .map(|l| {
                    Linear::new(
                        &mut s,
                        &format!("lavit.{}_head{l}", cfg.mode),
                        cfg.dim,
                        cfg.codebook_size,
                        true,
                        &mut rng,
                    )
                })
                .collect(),
            TargetMode::Pixels => vec![Linear::new(&mut s, "lavit.pixel_head", cfg.dim, cfg.pixel_dim, true, &mut rng)],
            TargetMode::Features => vec![Linear::new(&mut s, "lavit.feature_head", cfg.dim, cfg.in_dim, true, &mut rng)],
        };
        Ok(Self {
            cfg,
            params: s,
            embed,
            mask_token,
            pred_token,
            pos,
            blocks,
            norm,
            out_heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LavitModel<U> {
        LavitModel {
            cfg: self.cfg,
            params: self.params.cast(),
            embed: self.embed.clone(),
            mask_token: self.mask_token,
            pred_token: self.pred_token,
            pos: self.pos,
            blocks: self.blocks.clone(),
            norm: self.norm.clone(),
            out_heads: self.out_heads.clone(),
        }
    }

    fn check(&self, sample: &LavitSample<T>, mask: &MaskSpec) -> Result<(), LavitError> {
        let n = self.cfg.tokens();
        if sample.features.shape() != [n, self.cfg.in_dim] {
            return Err(LavitError::Shape(format!(
                "features {:?}, expected [{n}, {}]",
                sample.features.shape(),
                self.cfg.in_dim
            )));
        }
        if mask.tokens() != n {
            return Err(LavitError::Mask(format!("mask over {} tokens, model has {n}", mask.tokens())));
        }
        if mask.indices.is_empty() {
            return Err(LavitError::Mask("empty mask".into()));
        }
        if let Some(&i) = mask.indices.iter().find(|&&i| i >= n) {
            return Err(LavitError::Mask(format!("index {i} out of range")));
        }
        Ok(())
    }

    /// Input sequence `[v_1 .. v_N, p]`: visible tokens keep their embedding,
    /// masked ones become the mask embedding, positions are added to all `N`.
    pub fn apply_mask(&self, g: &mut Graph<'_, T>, embedded: NodeId, mask: &MaskSpec) -> Result<NodeId, LavitError> {
        let e = g.param(self.mask_token);
        let v = g.mask_rows(embedded, e, &mask.flags())?;
        let pos = g.param(self.pos);
        let v = g.add(v, pos)?;
        let p = g.param(self.pred_token);
        Ok(g.concat_rows(v, p)?)
    }

    /// Final normalized states of all `N + 1` tokens.
    pub fn encode(&self, g: &mut Graph<'_, T>, features: &Tensor<T>, mask: &MaskSpec) -> Result<NodeId, LavitError> {
        let x = g.input(features.clone())?;
        let h = self.embed.forward(g, x)?;
        let mut h = self.apply_mask(g, h, mask)?;
        for blk in &self.blocks {
            h = blk.forward(g, h)?;
        }
        Ok(self.norm.forward(g, h)?)
    }

    fn require(&self, mode: TargetMode) -> Result<(), LavitError> {
        if self.cfg.mode != mode {
            return Err(LavitError::WrongMode {
                expected: mode,
                actual: self.cfg.mode,
            });
        }
        Ok(())
    }

    /// One probability vector per tokenizer layer, read from the prediction token.
    pub fn predict_histogram(&self, g: &mut Graph<'_, T>, states: NodeId) -> Result<Vec<NodeId>, LavitError> {
        self.require(TargetMode::Histogram)?;
        let p = g.gather_rows(states, &[self.cfg.tokens()])?;
        self.out_heads
            .iter()
            .map(|head| {
                let logits = head.forward(g, p)?;
                Ok(g.softmax(logits)?)
            })
            .collect()
    }

    /// Training loss of the configured mode for one masked image.
    pub fn loss(&self, g: &mut Graph<'_, T>, sample: &LavitSample<T>, mask: &MaskSpec) -> Result<NodeId, LavitError> {
        self.check(sample, mask)?;
        let states = self.encode(g, &sample.features, mask)?;
        let k = self.cfg.codebook_size;
        match self.cfg.mode {
            TargetMode::Histogram => {
                if sample.codes.len() != self.cfg.hvq_depth {
                    return Err(LavitError::Shape(format!(
                        "{} code layers, expected {}",
                        sample.codes.len(),
                        self.cfg.hvq_depth
                    )));
                }
                let preds = self.predict_histogram(g, states)?;
                let mut terms = Vec::with_capacity(preds.len());
                for (p, codes) in preds.into_iter().zip(&sample.codes) {
                    let q = compute_target_histogram(codes, &mask.indices, k)?;
                    let q = g.input(Tensor::from_f64(&[1, k], &q)?)?;
                    terms.push(g.l1(p, q)?);
                }
                Ok(g.add_all(&terms)?)
            }
            TargetMode::Codes => {
                if sample.codes.len() != self.cfg.hvq_depth {
                    return Err(LavitError::Shape("code layer count".into()));
                }
                let rows = g.gather_rows(states, &mask.indices)?;
                let mut terms = Vec::with_capacity(self.out_heads.len());
                for (head, codes) in self.out_heads.iter().zip(&sample.codes) {
                    let logits = head.forward(g, rows)?;
                    let targets: Vec<usize> = mask.indices.iter().map(|&i| codes[i]).collect();
                    terms.push(g.cross_entropy(logits, &targets)?);
                }
                Ok(g.add_all(&terms)?)
            }
            TargetMode::Features | TargetMode::Pixels => {
                let full = match self.cfg.mode {
                    TargetMode::Features => &sample.features,
                    _ => sample
                        .pixels
                        .as_ref()
                        .ok_or_else(|| LavitError::Shape("pixels mode needs pixel targets".into()))?,
                };
                let width = full.dims2().1;
                let mut rows = Vec::with_capacity(mask.indices.len() * width);
                for &i in &mask.indices {
                    rows.extend_from_slice(full.row(i));
                }
                let target = g.input(Tensor::new(vec![mask.indices.len(), width], rows)?)?;
                let masked = g.gather_rows(states, &mask.indices)?;
                let pred = self.out_heads[0].forward(g, masked)?;
                Ok(g.mean_sq_diff(pred, target)?)
            }
        }
    }

    /// Loss value without recording gradients.
    pub fn eval_loss(&self, sample: &LavitSample<T>, mask: &MaskSpec) -> Result<f64, LavitError> {
        let mut g = Graph::inference(&self.params);
        let l = self.loss(&mut g, sample, mask)?;
        Ok(g.value(l).item().as_f64())
    }

    /// Mode loss averaged over `n_masks` fresh block masks drawn from `rng`;
    /// summed in mask order.
    pub fn logical_score(
        &self,
        sample: &LavitSample<T>,
        n_masks: usize,
        ratio: f64,
        rng: &mut Rng,
    ) -> Result<MaskScores, LavitError> {
        if n_masks == 0 {
            return Err(LavitError::Config("n_masks must be >= 1".into()));
        }
        let mut values = Vec::with_capacity(n_masks);
        for _ in 0..n_masks {
            let mask = make_block_mask(self.cfg.grid_h, self.cfg.grid_w, ratio, rng)?;
            values.push(self.eval_loss(sample, &mask)?);
        }
        let mean = values.iter().sum::<f64>() / n_masks as f64;
        Ok(MaskScores { mean, values })
    }

    pub fn loss_and_grads(
        &self,
        sample: &LavitSample<T>,
        mask: &MaskSpec,
    ) -> Result<(f64, Vec<(ParamId, Tensor<T>)>), LavitError> {
        let mut g = Graph::new(&self.params);
        let l = self.loss(&mut g, sample, mask)?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item().as_f64(), grads.params(&g)))
    }
}

impl LavitModel<f64> {
    /// Loss and gradients with `store` in place of the model's parameters.
    /// The signature records the sign pattern of every `P - Q` entry in
    /// histogram mode, where the L1 loss has kinks.
    pub fn gradient_probe(
        &self,
        store: &ParamStore<f64>,
        sample: &LavitSample<f64>,
        mask: &MaskSpec,
    ) -> Result<Probe, TensorError> {
        let to_t = |e: LavitError| match e {
            LavitError::Tensor(t) => t,
            other => TensorError::Invalid(other.to_string()),
        };
        let mut g = Graph::new(store);
        let loss = self.loss(&mut g, sample, mask).map_err(to_t)?;
        let mut signature = Vec::new();
        if self.cfg.mode == TargetMode::Histogram {
            let mut g2 = Graph::inference(store);
            let states = self.encode(&mut g2, &sample.features, mask).map_err(to_t)?;
            let preds = self.predict_histogram(&mut g2, states).map_err(to_t)?;
            for (p, codes) in preds.iter().zip(&sample.codes) {
                let q = compute_target_histogram(codes, &mask.indices, self.cfg.codebook_size).map_err(to_t)?;
                for (a, b) in g2.value(*p).data().iter().zip(&q) {
                    signature.push((a - b).signum() as i64);
                }
            }
        }
        let grads = g.backward(loss)?;
        Ok(Probe {
            loss: g.value(loss).item(),
            grads: grads.params(&g),
            signature,
        })
    }

    pub fn check_gradients(
        &self,
        sample: &LavitSample<f64>,
        mask: &MaskSpec,
        eps: f64,
        max_samples: Option<usize>,
        rng: &mut Rng,
    ) -> Result<FdReport, TensorError> {
        finite_difference_check(&self.params, eps, max_samples, rng, |s| {
            self.gradient_probe(s, sample, mask)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LavitTrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains on tokenized normal images with a fresh mask per image and step,
/// drawn from `(mask_seed, epoch, image index)`.
pub fn train_lavit<T: Scalar>(
    model: &mut LavitModel<T>,
    data: &[LavitSample<T>],
    cfg: &TrainConfig,
    mask_ratio: f64,
    mask_seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LavitTrainLog, LavitError> {
    let mut log = LavitTrainLog::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(log);
    }
    mask_target(model.cfg.tokens(), mask_ratio)?;
    let mut shuffle = Rng::new(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = AdamW::new(&model.params, cfg.optimizer());
    let mut acc = GradAccum::zeros_like(&model.params);
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            acc.reset();
            for &i in chunk {
                let mut mrng = Rng::derive2(mask_seed, Stream::Mask, epoch as u64, i as u64);
                let mask = make_block_mask(model.cfg.grid_h, model.cfg.grid_w, mask_ratio, &mut mrng)?;
                let (loss, grads) = model.loss_and_grads(&data[i], &mask).map_err(|e| match e {
                    LavitError::Tensor(TensorError::NonFinite { op }) => LavitError::Divergence {
                        epoch,
                        reason: format!("non-finite value in {op}"),
                    },
                    e => e,
                })?;
                if !loss.is_finite() {
                    return Err(LavitError::Divergence {
                        epoch,
                        reason: "loss is not finite".into(),
                    });
                }
                loss_sum += loss;
                for (id, gr) in &grads {
                    acc.add(*id, gr);
                }
                acc.count += 1;
            }
            opt.step(&mut model.params, &acc, &[]);
        }
        let mean = loss_sum / data.len() as f64;
        log.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(log)
}
