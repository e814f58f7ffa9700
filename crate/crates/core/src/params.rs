//! Named trainable tensors and the AdamW optimizer that updates them.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameters. Order is insertion order and is
/// the order used for checkpoints and hashing.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param_set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f32().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng.inner());
        if z.abs() <= 2.0 {
            data.push(T::of(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Uniform in `[-bound, bound)`.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.inner().random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Sum of per-parameter gradients over a minibatch.
#[derive(Debug, Clone)]
pub struct GradAccum<T> {
    pub grads: Vec<Tensor<T>>,
    pub count: usize,
}

impl<T: Scalar> GradAccum<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.grads[id.0].add_assign(grad);
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        self.count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate warmup from `lr / warmup_steps`.
    #[serde(default)]
    pub warmup_steps: u64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store
            .tensors
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Applies one update using `grads` scaled by `1 / grads.count`.
    /// Parameters listed in `frozen` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradAccum<T>, frozen: &[ParamId]) {
        self.step += 1;
        let c = &self.cfg;
        let scale = 1.0 / grads.count.max(1) as f64;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let ramp = if self.step < c.warmup_steps { self.step as f64 / c.warmup_steps as f64 } else { 1.0 };
        let lr = T::of(c.lr * ramp);
        let wd = T::of(c.lr * ramp * c.weight_decay);
        let eps = T::of(c.eps);
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for i in 0..store.tensors.len() {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let decay = store.decay[i];
            let p = store.tensors[i].data_mut();
            let g = grads.grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * T::of(scale);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if decay {
                    p[j] -= wd * p[j];
                }
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(&[2, 2]), true);
        let h1 = s.hash_hex();
        assert_eq!(h1, s.clone().hash_hex());
        s.get_mut(id).data_mut()[0] = 1.0;
        assert_ne!(h1, s.hash_hex());
    }

    #[test]
    fn trunc_normal_bounds() {
        let mut rng = Rng::new(1, Stream::Init);
        let t: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::scalar(1.0), false);
        let mut opt = AdamW::new(&s, AdamWConfig::new(0.1, 0.0));
        let mut g = GradAccum::zeros_like(&s);
        g.add(id, &Tensor::scalar(2.0));
        g.count = 1;
        opt.step(&mut s, &g, &[]);
        assert!((s.get(id).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn warmup_ramps_the_step_size() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::scalar(0.0), false);
        let cfg = AdamWConfig { warmup_steps: 4, ..AdamWConfig::new(0.1, 0.0) };
        let mut opt = AdamW::new(&s, cfg);
        let mut g = GradAccum::zeros_like(&s);
        g.add(id, &Tensor::scalar(-1.0));
        g.count = 1;
        let mut prev = 0.0;
        let mut moves = Vec::new();
        for _ in 0..6 {
            opt.step(&mut s, &g, &[]);
            moves.push(s.get(id).item() - prev);
            prev = s.get(id).item();
        }
        // A constant gradient gives unit normalized steps, so moves follow the ramp.
        let want = [0.025, 0.05, 0.075, 0.1, 0.1, 0.1];
        for (m, w) in moves.iter().zip(want) {
            assert!((m - w).abs() < 1e-6, "{moves:?}");
        }
    }
}
