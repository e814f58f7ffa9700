//! Hierarchical vector-quantized transformer: a feature reconstruction model
//! whose encoder layers are each snapped to a learned codebook, and whose
//! decoder rebuilds the input from those discrete codes alone.
//!
//! The same model doubles as the tokenizer for the masked-prediction model:
//! its per-layer code indices are the prediction targets.

use serde::{Deserialize, Serialize};

use crate::gradcheck::{finite_difference_check, FdReport, Probe};
use crate::graph::{Graph, NodeId, QuantGrad};
use crate::nn::{embedding, Attention, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::params::{trunc_normal, AdamW, AdamWConfig, GradAccum, ParamId, ParamStore};
use crate::rng::{Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum HvqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HvqConfig {
    /// Backbone feature width `d0`.
    pub in_dim: usize,
    /// Transformer width `d`.
    pub dim: usize,
    /// Encoder depth = decoder depth = number of codebooks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Entries per codebook `K`.
    pub codebook_size: usize,
    /// Code vector width `d_q`.
    pub code_dim: usize,
    /// Tokens per image `N`.
    pub tokens: usize,
}

impl HvqConfig {
    pub fn validate(&self) -> Result<(), HvqError> {
        let bad = |m: &str| Err(HvqError::Config(m.into()));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if [self.in_dim, self.dim, self.mlp_dim, self.code_dim, self.tokens].contains(&0) {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

/// Nearest-entry assignment of a set of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T> {
    pub indices: Vec<usize>,
    /// Squared distance to the chosen entry (the minimum over all entries).
    pub distances: Vec<T>,
}

/// Exhaustive nearest-code search; ties resolve to the lowest index.
pub fn nearest_codes<T: Scalar>(
    vectors: &Tensor<T>,
    codebook: &Tensor<T>,
) -> Result<QuantizationResult<T>, HvqError> {
    let (n, dq) = vectors.dims2();
    let (k, dc) = codebook.dims2();
    if k == 0 || codebook.numel() == 0 {
        return Err(HvqError::EmptyCodebook);
    }
    if dq != dc {
        return Err(HvqError::Shape(format!("vector width {dq} vs code width {dc}")));
    }
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for i in 0..n {
        let v = vectors.row(i);
        let mut best = (T::infinity(), 0usize);
        for j in 0..k {
            let mut d = T::zero();
            for (&a, &b) in v.iter().zip(codebook.row(j)) {
                d += (a - b) * (a - b);
            }
            if d < best.0 {
                best = (d, j);
            }
        }
        indices.push(best.1);
        distances.push(best.0);
    }
    Ok(QuantizationResult { indices, distances })
}

/// Initial diagonal of the cross-attention position bias: at this value a
/// query on an 8x8 grid puts about 86% of its weight on its own position.
pub const CROSS_BIAS_INIT: f64 = 6.0;

/// Decoder layer: self-attention, cross-attention onto the layer's codes,
/// feed-forward, each with a residual connection.
///
/// Codes carry no position of their own, so the cross-attention logits get a
/// learned query-by-code bias, initialized to prefer the query's own position.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub cross_bias: ParamId,
    pub mlp: Mlp,
}

impl DecoderBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &HvqConfig, rng: &mut Rng) -> Self {
        Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), cfg.dim, cfg.dim, cfg.heads, rng),
            cross_attn: Attention::new(
                store,
                &format!("{name}.cross_attn"),
                cfg.dim,
                cfg.code_dim,
                cfg.heads,
                rng,
            ),
            cross_bias: {
                let n = cfg.tokens;
                let mut b = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    b.data_mut()[i * n + i] = T::of(CROSS_BIAS_INIT);
                }
                store.add(format!("{name}.cross_bias"), b, false)
            },
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.dim, cfg.mlp_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, prev: NodeId, codes: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.self_attn.forward(g, prev, prev)?;
        let q = g.add(sa, prev)?;
        let bias = g.param(self.cross_bias);
        let ca = self.cross_attn.forward_biased(g, q, codes, Some(bias))?;
        let d = g.add(ca, q)?;
        let f = self.mlp.forward(g, d)?;
        g.add(f, d)
    }
}

/// Node ids produced by one forward pass.
#[derive(Debug, Clone)]
pub struct HvqTrace<T> {
    pub input: NodeId,
    /// `hidden[0]` is the embedded input, `hidden[l]` the output of encoder layer `l`.
    pub hidden: Vec<NodeId>,
    /// Projected vectors before quantization, per codebook layer (0-based).
    pub pre_quant: Vec<NodeId>,
    /// Quantized vectors (straight-through sites), per layer.
    pub quantized: Vec<NodeId>,
    pub codes: Vec<QuantizationResult<T>>,
    pub decoded: Vec<NodeId>,
    pub recon: NodeId,
}

#[derive(Debug, Clone)]
pub struct HvqLoss {
    pub total: NodeId,
    pub recon: NodeId,
    /// `|| sg(h) - b ||^2` per layer: moves the codebook.
    pub codebook_terms: Vec<NodeId>,
    /// `|| h - sg(b) ||^2` per layer: moves the encoder.
    pub commit_terms: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct HvqModel<T> {
    pub cfg: HvqConfig,
    pub params: ParamStore<T>,
    pub embed: Linear,
    pub enc_pos: ParamId,
    pub encoder: Vec<TransformerBlock>,
    /// `psi[L-1]` projects the last hidden state; `psi[l]` for `l < L-1`
    /// projects `[h^l, z^L]`.
    pub psi: Vec<Linear>,
    /// Normalizes the encoder state entering each `psi`.
    pub psi_norm: Vec<LayerNorm>,
    pub codebooks: Vec<ParamId>,
    pub dec_query: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

impl<T: Scalar> HvqModel<T> {
    pub fn new(cfg: HvqConfig, seed: u64) -> Result<Self, HvqError> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, Stream::Init, 1);
        let mut s = ParamStore::new();
        let embed = Linear::new(&mut s, "hvq.embed", cfg.in_dim, cfg.dim, true, &mut rng);
        let enc_pos = embedding(&mut s, "hvq.enc_pos", &[cfg.tokens, cfg.dim], &mut rng);
        let encoder = (0..cfg.depth)
            .map(|l| TransformerBlock::new(&mut s, &format!("hvq.enc{l}"), cfg.dim, cfg.heads, cfg.mlp_dim, &mut rng))
            .collect();
        let psi = (0..cfg.depth)
            .map(|l| {
                let fan_in = if l + 1 == cfg.depth { cfg.dim } else { cfg.dim + cfg.code_dim };
                let std = 1.0 / (fan_in as f64).sqrt();
                Linear::with_std(&mut s, &format!("hvq.psi{l}"), fan_in, cfg.code_dim, true, std, &mut rng)
            })
            .collect();
        let psi_norm = (0..cfg.depth)
            .map(|l| LayerNorm::new(&mut s, &format!("hvq.psi_norm{l}"), cfg.dim))
            .collect();
        let codebooks = (0..cfg.depth)
            .map(|l| {
                let t = trunc_normal(&[cfg.codebook_size, cfg.code_dim], 1.0, &mut rng);
                s.add(format!("hvq.codebook{l}"), t, false)
            })
            .collect();
        let dec_query = embedding(&mut s, "hvq.dec_query", &[cfg.tokens, cfg.dim], &mut rng);
        let decoder = (0..cfg.depth)
            .map(|l| DecoderBlock::new(&mut s, &format!("hvq.dec{l}"), &cfg, &mut rng))
            .collect();
        let out_norm = LayerNorm::new(&mut s, "hvq.out_norm", cfg.dim);
        let out_proj = Linear::new(&mut s, "hvq.out_proj", cfg.dim, cfg.in_dim, true, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            embed,
            enc_pos,
            encoder,
            psi,
            psi_norm,
            codebooks,
            dec_query,
            decoder,
            out_norm,
            out_proj,
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> HvqModel<U> {
        HvqModel {
            cfg: self.cfg,
            params: self.params.cast(),
            embed: self.embed.clone(),
            enc_pos: self.enc_pos,
            encoder: self.encoder.clone(),
            psi: self.psi.clone(),
            psi_norm: self.psi_norm.clone(),
            codebooks: self.codebooks.clone(),
            dec_query: self.dec_query,
            decoder: self.decoder.clone(),
            out_norm: self.out_norm.clone(),
            out_proj: self.out_proj.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), HvqError> {
        if x.shape() != [self.cfg.tokens, self.cfg.in_dim] {
            return Err(HvqError::Shape(format!(
                "expected [{}, {}], got {:?}",
                self.cfg.tokens,
                self.cfg.in_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Embeds the input and runs the encoder: returns `[h^0 .. h^L]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, input: NodeId) -> Result<Vec<NodeId>, HvqError> {
        let e = self.embed.forward(g, input)?;
        let pos = g.param(self.enc_pos);
        let mut h = g.add(e, pos)?;
        let mut hidden = vec![h];
        for blk in &self.encoder {
            h = blk.forward(g, h)?;
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn quantize_site(
        &self,
        g: &mut Graph<'_, T>,
        layer: usize,
        operand: NodeId,
    ) -> Result<(NodeId, NodeId, QuantizationResult<T>), HvqError> {
        let pre = self.psi[layer].forward(g, operand)?;
        let cb_node = g.param(self.codebooks[layer]);
        let cb = g.value(cb_node);
        let q = nearest_codes(g.value(pre), cb)?;
        let z = match g.quant_grad() {
            QuantGrad::StraightThrough => {
                let (_, dq) = cb.dims2();
                let mut rows = Vec::with_capacity(q.indices.len() * dq);
                for &i in &q.indices {
                    rows.extend_from_slice(cb.row(i));
                }
                g.straight_through(pre, Tensor::new(vec![q.indices.len(), dq], rows)?)?
            }
            // Piecewise-exact: codes fixed, selected rows differentiable.
            QuantGrad::Exact => g.gather_rows(cb_node, &q.indices)?,
        };
        Ok((pre, z, q))
    }

    /// Quantizes the last encoder state: returns (pre-quant, z^L, assignment).
    pub fn quantize_final(
        &self,
        g: &mut Graph<'_, T>,
        h_last: NodeId,
    ) -> Result<(NodeId, NodeId, QuantizationResult<T>), HvqError> {
        let layer = self.cfg.depth - 1;
        let h = self.psi_norm[layer].forward(g, h_last)?;
        self.quantize_site(g, layer, h)
    }

    /// Quantizes layer `layer < L-1` (0-based) from `[h_prev, z_last]`.
    pub fn quantize_intermediate(
        &self,
        g: &mut Graph<'_, T>,
        layer: usize,
        h_prev: NodeId,
        z_last: NodeId,
    ) -> Result<(NodeId, NodeId, QuantizationResult<T>), HvqError> {
        if layer + 1 >= self.cfg.depth {
            return Err(HvqError::Shape(format!("layer {layer} is not intermediate")));
        }
        let h = self.psi_norm[layer].forward(g, h_prev)?;
        let cat = g.concat_cols(h, z_last)?;
        self.quantize_site(g, layer, cat)
    }

    /// Decoder over the quantized layers, then the output head `Gamma`.
    pub fn decode(&self, g: &mut Graph<'_, T>, quantized: &[NodeId]) -> Result<(Vec<NodeId>, NodeId), HvqError> {
        let mut d = g.param(self.dec_query);
        let mut states = Vec::with_capacity(quantized.len());
        for (blk, &z) in self.decoder.iter().zip(quantized) {
            d = blk.forward(g, d, z)?;
            states.push(d);
        }
        let n = self.out_norm.forward(g, d)?;
        let recon = self.out_proj.forward(g, n)?;
        Ok((states, recon))
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, x: &Tensor<T>) -> Result<HvqTrace<T>, HvqError> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let input = g.input(x.clone())?;
        let hidden = self.encode(g, input)?;
        let mut pre_quant = vec![input; depth];
        let mut quantized = vec![input; depth];
        let mut codes: Vec<Option<QuantizationResult<T>>> = vec![None; depth];
        let (pl, zl, ql) = self.quantize_final(g, hidden[depth])?;
        pre_quant[depth - 1] = pl;
        quantized[depth - 1] = zl;
        codes[depth - 1] = Some(ql);
        for l in 0..depth - 1 {
            let (p, z, q) = self.quantize_intermediate(g, l, hidden[l], zl)?;
            pre_quant[l] = p;
            quantized[l] = z;
            codes[l] = Some(q);
        }
        let (decoded, recon) = self.decode(g, &quantized)?;
        Ok(HvqTrace {
            input,
            hidden,
            pre_quant,
            quantized,
            codes: codes.into_iter().map(Option::unwrap).collect(),
            decoded,
            recon,
        })
    }

    /// Reconstruction error plus, per layer, the codebook and commitment terms.
    pub fn loss(&self, g: &mut Graph<'_, T>, trace: &HvqTrace<T>) -> Result<HvqLoss, HvqError> {
        let recon = g.sum_sq_diff(trace.input, trace.recon)?;
        let mut terms = vec![recon];
        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for l in 0..self.cfg.depth {
            let cb = g.param(self.codebooks[l]);
            let b = g.gather_rows(cb, &trace.codes[l].indices)?;
            let h = trace.pre_quant[l];
            let h_sg = g.stop_grad(h)?;
            let b_sg = g.stop_grad(b)?;
            let t1 = g.sum_sq_diff(h_sg, b)?;
            let t2 = g.sum_sq_diff(h, b_sg)?;
            codebook_terms.push(t1);
            commit_terms.push(t2);
            terms.push(t1);
            terms.push(t2);
        }
        let total = g.add_all(&terms)?;
        Ok(HvqLoss {
            total,
            recon,
            codebook_terms,
            commit_terms,
        })
    }

    /// Reconstruction and per-layer codes without recording gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>), HvqError> {
        let mut g = Graph::inference(&self.params);
        let tr = self.forward(&mut g, x)?;
        let codes = tr.codes.iter().map(|q| q.indices.clone()).collect();
        Ok((g.value(tr.recon).clone(), codes))
    }

    /// Per-layer code indices (tokenizer output), `L x N`.
    pub fn codes(&self, x: &Tensor<T>) -> Result<Vec<Vec<usize>>, HvqError> {
        Ok(self.infer(x)?.1)
    }

    /// Mean squared reconstruction error over all positions and channels.
    pub fn structural_score(&self, x: &Tensor<T>) -> Result<f64, HvqError> {
        let (recon, _) = self.infer(x)?;
        Ok(mse(x, &recon))
    }

    /// Seeds every codebook with projected features of `batch`, picked by
    /// k-means++ (D^2) sampling so rare token types get entries despite a
    /// dominant background. The last layer goes first since the other
    /// projections consume `z^L`.
    pub fn init_codebooks(&mut self, batch: &[Tensor<T>], rng: &mut Rng) -> Result<(), HvqError> {
        let depth = self.cfg.depth;
        let last = [depth - 1];
        let rest: Vec<usize> = (0..depth - 1).collect();
        for layers in [&last[..], &rest[..]] {
            let mut points: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth];
            for x in batch {
                let mut g = Graph::inference(&self.params);
                let tr = self.forward(&mut g, x)?;
                for &l in layers {
                    let v = g.value(tr.pre_quant[l]);
                    for r in 0..v.dims2().0 {
                        points[l].push(v.row(r).iter().map(|a| a.as_f64()).collect());
                    }
                }
            }
            for &l in layers {
                let k = self.cfg.codebook_size;
                let seeds: Vec<Vec<f64>> = kmeans_pp_seeds(&points[l], k, rng)
                    .into_iter()
                    .map(|i| points[l][i].clone())
                    .collect();
                let rows: Vec<T> = lloyd(&points[l], seeds, LLOYD_ITERS)
                    .iter()
                    .flat_map(|c| c.iter().map(|&v| T::of(v)))
                    .collect();
                self.params
                    .set(self.codebooks[l], Tensor::new(vec![k, self.cfg.code_dim], rows)?)?;
            }
        }
        Ok(())
    }

    /// Loss, gradients, codes and pre-quantization vectors for one image.
    pub fn train_step(&self, x: &Tensor<T>) -> Result<HvqStep<T>, HvqError> {
        let mut g = Graph::new(&self.params);
        let tr = self.forward(&mut g, x)?;
        let loss = self.loss(&mut g, &tr)?;
        let grads = g.backward(loss.total)?;
        Ok(HvqStep {
            loss: g.value(loss.total).item().as_f64(),
            recon_mse: g.value(loss.recon).item().as_f64() / x.numel() as f64,
            grads: grads.params(&g),
            codes: tr.codes.iter().map(|q| q.indices.clone()).collect(),
            pre_quant: tr.pre_quant.iter().map(|&n| g.value(n).clone()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HvqStep<T> {
    pub loss: f64,
    pub recon_mse: f64,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub codes: Vec<Vec<usize>>,
    pub pre_quant: Vec<Tensor<T>>,
}

impl HvqModel<f64> {
    /// Loss and exact gradients evaluated with `store` in place of the
    /// model's own parameters: zero gradient through the code assignment, and
    /// stop-gradient operands replayed from `frozen` when given. The
    /// signature is the code assignment, piecewise constant in the parameters.
    /// Also returns the stop-gradient values of this run.
    pub fn gradient_probe(
        &self,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        frozen: Option<&[Tensor<f64>]>,
    ) -> Result<(Probe, Vec<Tensor<f64>>), TensorError> {
        let mut g = Graph::new(store);
        g.set_quant_grad(QuantGrad::Exact);
        if let Some(f) = frozen {
            g.freeze_stop_grads(f.to_vec());
        }
        let run = |g: &mut Graph<'_, f64>| -> Result<(HvqTrace<f64>, HvqLoss), HvqError> {
            let tr = self.forward(g, x)?;
            let loss = self.loss(g, &tr)?;
            Ok((tr, loss))
        };
        let (tr, loss) = run(&mut g).map_err(|e| match e {
            HvqError::Tensor(t) => t,
            other => TensorError::Invalid(other.to_string()),
        })?;
        let grads = g.backward(loss.total)?;
        let probe = Probe {
            loss: g.value(loss.total).item(),
            grads: grads.params(&g),
            signature: tr.codes.iter().flat_map(|q| q.indices.iter().map(|&i| i as i64)).collect(),
        };
        Ok((probe, g.stop_grad_values().to_vec()))
    }

    /// Central-difference check of the full training loss on one input.
    pub fn check_gradients(
        &self,
        x: &Tensor<f64>,
        eps: f64,
        max_samples: Option<usize>,
        rng: &mut Rng,
    ) -> Result<FdReport, TensorError> {
        let (_, frozen) = self.gradient_probe(&self.params, x, None)?;
        finite_difference_check(&self.params, eps, max_samples, rng, |s| {
            self.gradient_probe(s, x, Some(&frozen)).map(|r| r.0)
        })
    }
}

/// Indices of `k` seeds chosen by D^2 sampling. Once every point coincides
/// with a seed, the remaining picks are uniform.
pub fn kmeans_pp_seeds(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    kmeans_pp_extend(points, &[], k, rng)
}

/// D^2 sampling of `k` further seeds given already-chosen `centers`.
pub fn kmeans_pp_extend(points: &[Vec<f64>], centers: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut seeds = Vec::with_capacity(k);
    let mut d2: Vec<f64> = if centers.is_empty() {
        let first = rng.below(points.len());
        seeds.push(first);
        points.iter().map(|p| dist(p, &points[first])).collect()
    } else {
        points
            .iter()
            .map(|p| centers.iter().map(|c| dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform(0.0, total);
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.below(points.len())
        };
        seeds.push(pick);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist(p, &points[pick]));
        }
    }
    seeds
}

const LLOYD_ITERS: usize = 10;

/// Lloyd refinement; a center that loses all its points stays put.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, iters: usize) -> Vec<Vec<f64>> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for _ in 0..iters {
        let dim = centers.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in points {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            counts[best.0] += 1;
            for (s, v) in sums[best.0].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
    }
    centers
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    s / a.numel() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Re-seed codes unused during an epoch from recent encoder outputs
    /// (codebook training only).
    #[serde(default)]
    pub reset_dead_codes: bool,
    #[serde(default)]
    pub warmup_steps: u64,
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::new(self.lr, self.weight_decay)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HvqTrainLog {
    /// Reconstruction MSE of the initialized model over the training set.
    pub initial_recon_mse: f64,
    pub epoch_loss: Vec<f64>,
    pub epoch_recon_mse: Vec<f64>,
}

/// Trains on normal features. With zero epochs the model is returned untouched.
pub fn train_hvq<T: Scalar>(
    model: &mut HvqModel<T>,
    data: &[Tensor<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<HvqTrainLog, HvqError> {
    let mut log = HvqTrainLog::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(log);
    }
    let mut shuffle = Rng::new(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle.shuffle(&mut order);
    let first: Vec<Tensor<T>> = order
        .iter()
        .take(cfg.batch_size.max(1))
        .map(|&i| data[i].clone())
        .collect();
    let mut init_rng = Rng::derive(cfg.seed, Stream::Init, 2);
    model.init_codebooks(&first, &mut init_rng)?;
    log.initial_recon_mse = data
        .iter()
        .map(|x| model.structural_score(x))
        .sum::<Result<f64, _>>()?
        / data.len() as f64;

    let mut opt = AdamW::new(&model.params, cfg.optimizer());
    let mut acc = GradAccum::zeros_like(&model.params);
    let (depth, k) = (model.cfg.depth, model.cfg.codebook_size);
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            shuffle.shuffle(&mut order);
        }
        let (mut loss_sum, mut recon_sum) = (0.0, 0.0);
        let mut usage = vec![vec![0usize; k]; depth];
        let mut recent: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth];
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            acc.reset();
            for l in &mut recent {
                l.clear();
            }
            for &i in chunk {
                let step = model.train_step(&data[i]).map_err(|e| match e {
                    HvqError::Tensor(TensorError::NonFinite { op }) => HvqError::Divergence {
                        epoch,
                        reason: format!("non-finite value in {op}"),
                    },
                    e => e,
                })?;
                if !step.loss.is_finite() {
                    return Err(HvqError::Divergence {
                        epoch,
                        reason: "loss is not finite".into(),
                    });
                }
                loss_sum += step.loss;
                recon_sum += step.recon_mse;
                for (id, gr) in &step.grads {
                    acc.add(*id, gr);
                }
                acc.count += 1;
                if cfg.reset_dead_codes {
                    for l in 0..depth {
                        for &c in &step.codes[l] {
                            usage[l][c] += 1;
                        }
                        let v = &step.pre_quant[l];
                        recent[l].extend((0..v.dims2().0).map(|r| v.row(r).iter().map(|a| a.as_f64()).collect()));
                    }
                }
            }
            opt.step(&mut model.params, &acc, &[]);
        }
        if cfg.reset_dead_codes && epoch + 1 < cfg.epochs {
            let mut rng = Rng::derive(cfg.seed, Stream::Init, 1000 + epoch as u64);
            for l in 0..depth {
                model.reseed_dead_codes(l, &usage[l], &recent[l], &mut rng)?;
            }
        }
        let n = data.len() as f64;
        log.epoch_loss.push(loss_sum / n);
        log.epoch_recon_mse.push(recon_sum / n);
        on_epoch(epoch, loss_sum / n, recon_sum / n);
    }
    Ok(log)
}

impl<T: Scalar> HvqModel<T> {
    /// Replaces every code of `layer` with zero `usage` by a D^2-sampled
    /// point of `pool`, measuring distance to the live codes. Returns how
    /// many codes were replaced.
    pub fn reseed_dead_codes(
        &mut self,
        layer: usize,
        usage: &[usize],
        pool: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<usize, HvqError> {
        let dead: Vec<usize> = (0..usage.len()).filter(|&c| usage[c] == 0).collect();
        if dead.is_empty() || pool.is_empty() {
            return Ok(0);
        }
        let id = self.codebooks[layer];
        let mut cb = self.params.get(id).clone();
        let live: Vec<Vec<f64>> = (0..usage.len())
            .filter(|&c| usage[c] > 0)
            .map(|c| cb.row(c).iter().map(|a| a.as_f64()).collect())
            .collect();
        let picks = kmeans_pp_extend(pool, &live, dead.len(), rng);
        let dq = self.cfg.code_dim;
        for (&c, &p) in dead.iter().zip(&picks) {
            for (dst, &v) in cb.data_mut()[c * dq..(c + 1) * dq].iter_mut().zip(&pool[p]) {
                *dst = T::of(v);
            }
        }
        self.params.set(id, cb)?;
        Ok(dead.len())
    }
}

/// Code usage for one codebook layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: usize,
    pub counts: Vec<usize>,
    pub perplexity: f64,
    pub dead_codes: usize,
    /// `contingency[kind][code]` token counts.
    pub contingency: Vec<Vec<usize>>,
    /// Fraction of observed kinds whose majority code is also another kind's majority code.
    pub collision: f64,
    /// Per kind: number of codes holding more than 5% of the kind's tokens.
    pub redundancy: Vec<usize>,
    pub mean_redundancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub kind_names: Vec<String>,
    pub layers: Vec<LayerUsage>,
}

/// `exp` of the entropy of the empirical code distribution.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Usage, collision and redundancy statistics from per-layer codes and
/// per-token kind labels (`0..n_kinds`).
pub fn usage_report(
    codes: &[Vec<Vec<usize>>],
    token_kinds: &[Vec<usize>],
    kind_names: Vec<String>,
    codebook_size: usize,
) -> CodebookReport {
    let n_kinds = kind_names.len();
    let depth = codes.first().map_or(0, Vec::len);
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut counts = vec![0usize; codebook_size];
        let mut table = vec![vec![0usize; codebook_size]; n_kinds];
        for (img_codes, kinds) in codes.iter().zip(token_kinds) {
            for (&c, &k) in img_codes[l].iter().zip(kinds) {
                counts[c] += 1;
                table[k][c] += 1;
            }
        }
        let majority: Vec<Option<usize>> = table
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| {
                    (0..codebook_size)
                        .max_by(|&a, &b| row[a].cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap()
                })
            })
            .collect();
        let observed: Vec<usize> = (0..n_kinds).filter(|&k| majority[k].is_some()).collect();
        let shared = observed
            .iter()
            .filter(|&&k| observed.iter().any(|&o| o != k && majority[o] == majority[k]))
            .count();
        let redundancy: Vec<usize> = table
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().filter(|&&c| total > 0 && c as f64 > 0.05 * total as f64).count()
            })
            .collect();
        let mean_redundancy = if observed.is_empty() {
            0.0
        } else {
            observed.iter().map(|&k| redundancy[k] as f64).sum::<f64>() / observed.len() as f64
        };
        layers.push(LayerUsage {
            layer: l + 1,
            perplexity: perplexity(&counts),
            dead_codes: counts.iter().filter(|&&c| c == 0).count(),
            counts,
            contingency: table,
            collision: if observed.is_empty() {
                0.0
            } else {
                shared as f64 / observed.len() as f64
            },
            redundancy,
            mean_redundancy,
        });
    }
    CodebookReport { kind_names, layers }
}

/// Runs the tokenizer over `features` and summarizes code usage per object kind.
pub fn codebook_diagnostics<T: Scalar>(
    model: &HvqModel<T>,
    features: &[Tensor<T>],
    token_kinds: &[Vec<usize>],
    kind_names: Vec<String>,
) -> Result<CodebookReport, HvqError> {
    let codes = features
        .iter()
        .map(|x| model.codes(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(usage_report(&codes, token_kinds, kind_names, model.cfg.codebook_size))
}
