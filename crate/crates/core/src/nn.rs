//! Transformer building blocks. Each layer only holds parameter ids; values
//! live in a [`ParamStore`] and are pulled into a [`Graph`] per forward.

use crate::graph::{Graph, NodeId};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        Self::with_std(store, name, fan_in, fan_out, bias, INIT_STD, rng)
    }

    pub fn with_std<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(&[fan_in, fan_out], std, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// `kv_dim` is the width of the key/value source (differs for cross-attention).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: NodeId,
        source: NodeId,
    ) -> Result<NodeId> {
        self.forward_biased(g, query, source, None)
    }

    /// As [`Attention::forward`], with an additive `[n_query, n_source]`
    /// logit bias shared by all heads.
    pub fn forward_biased<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: NodeId,
        source: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, source)?;
        let v = self.v.forward(g, source)?;
        let a = g.attention_biased(q, k, v, self.heads, bias)?;
        self.out.forward(g, a)
    }
}

/// Two fully connected layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + MSA(LN x)`, then `x + FFN(LN x)`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let n = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, n, n)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, n)?;
        g.add(x, m)
    }
}

/// Learned parameter added as a whole (positional tables, tokens).
pub fn embedding<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    rng: &mut Rng,
) -> ParamId {
    store.add(name, trunc_normal(shape, INIT_STD, rng), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn zeroed_output_projections_make_identity_block() {
        let mut rng = Rng::new(3, Stream::Init);
        let mut store = ParamStore::<f64>::new();
        let blk = TransformerBlock::new(&mut store, "b", 8, 2, 16, &mut rng);
        for id in [blk.attn.out.w, blk.mlp.fc2.w] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new(&store);
        let x0 = Tensor::from_f64(&[3, 8], &(0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let x = g.input(x0.clone()).unwrap();
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &x0);
    }
}
