//! Eager tape-based reverse-mode differentiation.
//!
//! Every op computes its value immediately and records parent links. Node ids
//! are assigned in creation order, which is a topological order, so the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_rows, Result, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Gradient rule at quantization sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantGrad {
    /// Copy the upstream gradient onto the pre-quantization input.
    #[default]
    StraightThrough,
    /// The true derivative of a piecewise-constant map: zero. Used by
    /// finite-difference checks.
    Exact,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    MaskRows {
        x: NodeId,
        fill: NodeId,
        mask: Vec<bool>,
    },
    /// Blocks gradient flow; the source is not recorded.
    StopGrad,
    StraightThrough(NodeId),
    SumSqDiff(NodeId, NodeId),
    MeanSqDiff(NodeId, NodeId),
    L1(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Parameters are pulled in from an optional store.
pub struct Graph<'s, T> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
    quant_grad: QuantGrad,
    /// Values emitted by stop-gradient nodes, in creation order.
    sg_values: Vec<Tensor<T>>,
    /// Replacement values for stop-gradient nodes (finite-difference probes).
    sg_frozen: Option<Vec<Tensor<T>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            quant_grad: QuantGrad::default(),
            sg_values: Vec::new(),
            sg_frozen: None,
        }
    }

    /// Graph without a parameter store (inputs only).
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            quant_grad: QuantGrad::default(),
            sg_values: Vec::new(),
            sg_frozen: None,
        }
    }

    /// Graph whose parameters do not require gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn set_quant_grad(&mut self, mode: QuantGrad) {
        self.quant_grad = mode;
    }

    pub fn quant_grad(&self) -> QuantGrad {
        self.quant_grad
    }

    /// Makes the i-th stop-gradient node emit `values[i]` instead of its
    /// input. A stop-gradient marks its argument as a constant; replaying the
    /// constants of a base run turns a finite-difference probe into a check of
    /// exactly the function the backward pass differentiates.
    pub fn freeze_stop_grads(&mut self, values: Vec<Tensor<T>>) {
        self.sg_frozen = Some(values);
    }

    /// Values emitted by stop-gradient nodes so far.
    pub fn stop_grad_values(&self) -> &[Tensor<T>] {
        &self.sg_values
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push("input", value, Op::Input, false)
    }

    /// Input leaf that collects a gradient.
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Result<NodeId> {
        let rg = self.grad_enabled;
        self.push("input", value, Op::Input, rg)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let store = self.store.expect("graph has no parameter store");
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad: rg,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `x[n,in] * w[in,out] + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("linear", sx, sw));
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != m {
                return Err(mismatch("linear_bias", &[m], bv.shape()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("linear", Tensor::new(vec![n, m], out)?, Op::Linear { x, w, b }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * c).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("scale", v, Op::Scale(a, c), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, c) = vx.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(mismatch("layer_norm", vx.shape(), g.shape()));
        }
        let eps = T::of(LN_EPS);
        let cf = T::of(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let xr = vx.row(r);
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v).0).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("gelu", v, Op::Gelu(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (_, c) = vx.dims2();
        let mut out = vec![T::zero(); vx.numel()];
        softmax_rows(vx.data(), &mut out, c);
        let v = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push("softmax", v, Op::Softmax(x), rg)
    }

    /// Scaled dot-product attention over `heads` equal column groups.
    /// `q: [nq, d]`, `k, v: [nk, d]`, output `[nq, d]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        self.attention_biased(q, k, v, heads, None)
    }

    /// Attention with an optional `[nq, nk]` bias added to the scaled logits
    /// of every head.
    pub fn attention_biased(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = vq.dims2();
        let (nk, dk) = vk.dims2();
        if dk != d || vv.dims2() != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", vq.shape(), vk.shape()));
        }
        let bd = match bias {
            Some(b) if self.shape(b) != [nq, nk] => return Err(mismatch("attention_bias", self.shape(b), &[nq, nk])),
            Some(b) => Some(self.value(b).data()),
            None => None,
        };
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        let mut scores = vec![T::zero(); nk];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    *s = acc * scale + bd.map_or(T::zero(), |b| b[i * nk + j]);
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                softmax_rows(&scores, p, nk);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &b) in oi.iter_mut().zip(vj) {
                        *o += pj * b;
                    }
                }
            }
        }
        let val = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "attention",
            val,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (va.dims2(), vb.dims2());
        if ra != rb {
            return Err(mismatch("concat_cols", va.shape(), vb.shape()));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let v = Tensor::new(vec![ra, ca + cb], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_cols", v, Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (va.dims2(), vb.dims2());
        if ca != cb {
            return Err(mismatch("concat_rows", va.shape(), vb.shape()));
        }
        let mut out = va.data().to_vec();
        out.extend_from_slice(vb.data());
        let v = Tensor::new(vec![ra + rb, ca], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_rows", v, Op::ConcatRows(a, b), rg)
    }

    /// Rows `idx` of `x`, in order; gradients scatter-add back.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(vx.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(x);
        self.push("gather_rows", v, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Replaces every row `i` with `mask[i]` by the single row `fill`.
    pub fn mask_rows(&mut self, x: NodeId, fill: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (vx, vf) = (self.value(x), self.value(fill));
        let (r, c) = vx.dims2();
        if mask.len() != r {
            return Err(TensorError::IndexOutOfRange {
                op: "mask_rows",
                index: mask.len(),
                len: r,
            });
        }
        if vf.numel() != c {
            return Err(mismatch("mask_rows", vx.shape(), vf.shape()));
        }
        let mut out = vx.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * c..(i + 1) * c].copy_from_slice(vf.data());
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x) || self.rg(fill);
        self.push(
            "mask_rows",
            v,
            Op::MaskRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.sg_values.len();
        let v = match self.sg_frozen.as_ref().and_then(|f| f.get(i)) {
            Some(f) if f.shape() == self.shape(x) => f.clone(),
            Some(f) => return Err(mismatch("stop_grad", self.shape(x), f.shape())),
            None => self.value(x).clone(),
        };
        self.sg_values.push(v.clone());
        self.push("stop_grad", v, Op::StopGrad, false)
    }

    /// Quantization site: the value is `quantized` (bitwise), the gradient
    /// flows to `pre` unchanged under [`QuantGrad::StraightThrough`].
    pub fn straight_through(&mut self, pre: NodeId, quantized: Tensor<T>) -> Result<NodeId> {
        if self.shape(pre) != quantized.shape() {
            return Err(mismatch("straight_through", self.shape(pre), quantized.shape()));
        }
        let rg = self.rg(pre) && self.quant_grad == QuantGrad::StraightThrough;
        self.push("straight_through", quantized, Op::StraightThrough(pre), rg)
    }

    /// `sum((a - b)^2)`.
    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.binary("sum_sq_diff", a, b, |x, y| (x - y) * (x - y))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sum_sq_diff", Tensor::scalar(d.sum()), Op::SumSqDiff(a, b), rg)
    }

    /// `mean((a - b)^2)`.
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.binary("mean_sq_diff", a, b, |x, y| (x - y) * (x - y))?;
        let n = T::of(d.numel() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push("mean_sq_diff", Tensor::scalar(d.sum() / n), Op::MeanSqDiff(a, b), rg)
    }

    /// `sum(|a - b|)`.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.binary("l1", a, b, |x, y| (x - y).abs())?;
        let rg = self.rg(a) || self.rg(b);
        self.push("l1", Tensor::scalar(d.sum()), Op::L1(a, b), rg)
    }

    /// Summed cross-entropy of row-wise softmax(`logits`) against class ids.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (r, c) = vl.dims2();
        if targets.len() != r {
            return Err(mismatch("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); r * c];
        softmax_rows(vl.data(), &mut probs, c);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            // log-sum-exp form for accuracy.
            let row = vl.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[t];
        }
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.sum() / T::of(vx.numel() as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of several scalar nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::Invalid("add_all of nothing".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let dyd = dy.data();
        match &node.op {
            Op::Input | Op::Param | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().1;
                if self.rg(*a) {
                    self.acc(grads, *a, |g| matmul_bt_acc(dyd, vb.data(), g, m, n, k));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| matmul_at_acc(va.data(), dyd, g, m, k, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k) = vx.dims2();
                let m = vw.dims2().1;
                if self.rg(*x) {
                    self.acc(grads, *x, |g| matmul_bt_acc(dyd, vw.data(), g, n, m, k));
                }
                if self.rg(*w) {
                    self.acc(grads, *w, |g| matmul_at_acc(vx.data(), dyd, g, n, k, m));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc(grads, *b, |g| {
                            for row in dyd.chunks(m) {
                                for (gj, &d) in g.iter_mut().zip(row) {
                                    *gj += d;
                                }
                            }
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.rg(*p) {
                        self.acc(grads, *p, |g| add_into(g, dyd));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, |g| add_into(g, dyd));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| {
                        for (gj, &d) in g.iter_mut().zip(dyd) {
                            *gj -= d;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, |g| {
                        for ((gj, &d), &o) in g.iter_mut().zip(dyd).zip(vb.data()) {
                            *gj += d * o;
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| {
                        for ((gj, &d), &o) in g.iter_mut().zip(dyd).zip(va.data()) {
                            *gj += d * o;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    self.acc(grads, *a, |g| {
                        for (gj, &d) in g.iter_mut().zip(dyd) {
                            *gj += d * *c;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).dims2().1;
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, |g| {
                        for (row, xh) in dyd.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                g[j] += row[j] * xh[j];
                            }
                        }
                    });
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, |g| {
                        for row in dyd.chunks(c) {
                            add_into(g, row);
                        }
                    });
                }
                if self.rg(*x) {
                    let cf = T::of(c as f64);
                    self.acc(grads, *x, |g| {
                        for (r, (row, xh)) in dyd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..c {
                                let dxh = row[j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 /= cf;
                            m2 /= cf;
                            for j in 0..c {
                                let dxh = row[j] * gv[j];
                                g[r * c + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, |g| {
                    for ((gj, &d), &v) in g.iter_mut().zip(dyd).zip(vx.data()) {
                        *gj += d * gelu(v).1;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.dims2().1;
                self.acc(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(dyd.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, *heads, probs, dyd, grads),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).dims2().1;
                let cb = self.value(*b).dims2().1;
                let c = ca + cb;
                if self.rg(*a) {
                    self.acc(grads, *a, |g| {
                        for (gr, dr) in g.chunks_mut(ca).zip(dyd.chunks(c)) {
                            add_into(gr, &dr[..ca]);
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| {
                        for (gr, dr) in g.chunks_mut(cb).zip(dyd.chunks(c)) {
                            add_into(gr, &dr[ca..]);
                        }
                    });
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.rg(*a) {
                    self.acc(grads, *a, |g| add_into(g, &dyd[..na]));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| add_into(g, &dyd[na..]));
                }
            }
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).dims2().1;
                self.acc(grads, *x, |g| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dyd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::MaskRows { x, fill, mask } => {
                let c = self.value(*x).dims2().1;
                if self.rg(*x) {
                    self.acc(grads, *x, |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                add_into(&mut g[r * c..(r + 1) * c], &dyd[r * c..(r + 1) * c]);
                            }
                        }
                    });
                }
                if self.rg(*fill) {
                    self.acc(grads, *fill, |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                add_into(g, &dyd[r * c..(r + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::StraightThrough(pre) => {
                self.acc(grads, *pre, |g| add_into(g, dyd));
            }
            Op::SumSqDiff(a, b) | Op::MeanSqDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut s = dyd[0] * T::of(2.0);
                if matches!(node.op, Op::MeanSqDiff(..)) {
                    s /= T::of(va.numel() as f64);
                }
                if self.rg(*a) {
                    self.acc(grads, *a, |g| {
                        for ((gj, &x), &y) in g.iter_mut().zip(va.data()).zip(vb.data()) {
                            *gj += s * (x - y);
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| {
                        for ((gj, &x), &y) in g.iter_mut().zip(va.data()).zip(vb.data()) {
                            *gj -= s * (x - y);
                        }
                    });
                }
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = dyd[0];
                let sign = |x: T, y: T| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        T::zero()
                    }
                };
                if self.rg(*a) {
                    self.acc(grads, *a, |g| {
                        for ((gj, &x), &y) in g.iter_mut().zip(va.data()).zip(vb.data()) {
                            *gj += sign(x, y);
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |g| {
                        for ((gj, &x), &y) in g.iter_mut().zip(va.data()).zip(vb.data()) {
                            *gj -= sign(x, y);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).dims2().1;
                let s = dyd[0];
                self.acc(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = dyd[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                let s = dyd[0] / n;
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        heads: usize,
        probs: &[T],
        dyd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = vq.dims2();
        let nk = vk.dims2().0;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nk];
        let mut dbias = vec![T::zero(); if bias.is_some() { nq * nk } else { 0 }];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let doi = &dyd[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..nk {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let mut acc = T::zero();
                    for (&a, &b) in doi.iter().zip(vj) {
                        acc += a * b;
                    }
                    dp[j] = acc;
                    dot += acc * p[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &a) in dvj.iter_mut().zip(doi) {
                        *o += p[j] * a;
                    }
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    let dlogit = p[j] * (dp[j] - dot);
                    if !dbias.is_empty() {
                        dbias[i * nk + j] += dlogit;
                    }
                    let ds = dlogit * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (o, &b) in dqi.iter_mut().zip(kj) {
                        *o += ds * b;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (o, &a) in dkj.iter_mut().zip(qi) {
                        *o += ds * a;
                    }
                }
            }
        }
        for (node, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(node) {
                self.acc(grads, node, |t| add_into(t, &g));
            }
        }
        if let Some(b) = bias.filter(|&b| self.rg(b)) {
            self.acc(grads, b, |t| add_into(t, &dbias));
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Parameter leaves present in this graph.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.param_nodes.iter().map(|(&p, &n)| (p, n))
    }
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    for (gj, &dj) in g.iter_mut().zip(d) {
        *gj += dj;
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter leaf reachable from the loss.
    pub fn params(&self, graph: &Graph<'_, T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = graph
            .param_nodes()
            .filter_map(|(p, n)| self.get(n).map(|g| (p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::detached();
        let x = g.input_with_grad(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g = Graph::<f64>::detached();
        let x = g.input_with_grad(Tensor::scalar(3.0)).unwrap();
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(s, s).unwrap();
        let gr = g.backward(y).unwrap();
        assert!(gr.get(x).is_none_or(|t| t.item() == 0.0));
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::<f64>::detached();
        let x = g.input_with_grad(t(&[1, 2], &[0.3, -0.7])).unwrap();
        let z = g.straight_through(x, t(&[1, 2], &[1.0, 0.0])).unwrap();
        let w = g.input(t(&[1, 2], &[2.0, 5.0])).unwrap();
        let p = g.mul(z, w).unwrap();
        let p2 = g.mul(p, z).unwrap();
        let loss = g.sum(p2).unwrap();
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), gr.get(z).unwrap().data());
        assert_eq!(g.value(z).data(), &[1.0, 0.0]);
    }

    #[test]
    fn exact_quant_mode_blocks() {
        let mut g = Graph::<f64>::detached();
        g.set_quant_grad(QuantGrad::Exact);
        let x = g.input_with_grad(t(&[1, 2], &[0.3, -0.7])).unwrap();
        let z = g.straight_through(x, t(&[1, 2], &[1.0, 0.0])).unwrap();
        let loss = g.sum(z).unwrap();
        let gr = g.backward(loss).unwrap();
        assert!(gr.get(x).is_none());
    }

    #[test]
    fn l1_hand_sum() {
        let mut g = Graph::<f64>::detached();
        let a = g.input(t(&[2], &[1.0, 0.0])).unwrap();
        let b = g.input(t(&[2], &[0.0, 1.0])).unwrap();
        let l = g.l1(a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut g = Graph::<f64>::detached();
        let a = g.input(t(&[2, 3], &[0.0, 1.0, 2.0, -5.0, 0.0, 5.0])).unwrap();
        let s = g.softmax(a).unwrap();
        for r in 0..2 {
            let row = g.value(s).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::detached();
        let a = g.input_with_grad(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
        assert!(matches!(
            g.backward(NodeId(99)),
            Err(TensorError::UnknownNode(99))
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::detached();
        let a = g.input(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.mul(a, a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut g = Graph::<f64>::detached();
        let q = g.input(t(&[2, 2], &[0.3, 0.1, -2.0, 4.0])).unwrap();
        let k = g.input(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let v = g.input(t(&[1, 2], &[7.0, -3.0])).unwrap();
        let o = g.attention(q, k, v, 1).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn mask_rows_replaces() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let e = g.input(t(&[2], &[9., 9.])).unwrap();
        let m = g.mask_rows(x, e, &[false, true, false]).unwrap();
        assert_eq!(g.value(m).data(), &[1., 2., 9., 9., 5., 6.]);
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut g = Graph::<f64>::detached();
        let l = g.input(Tensor::zeros(&[3, 4])).unwrap();
        let ce = g.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((g.value(ce).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
    }
}
