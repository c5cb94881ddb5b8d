//! Eager recording tape for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node. Nodes
//! only ever reference earlier nodes, so walking the tape backwards is a valid
//! reverse topological order and each node is visited once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::batch_norm::{self, BatchNormState, Mode};
use crate::numerics::tensor::{gemm_nt, gemm_tn, row_stats, sigmoid, softmax_in_place, softplus};
use crate::numerics::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter. Frozen parameters act as constants.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let idx = params.index_of(name)?;
        let p = params.by_index(idx);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(idx),
            requires_grad: p.trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mean, is) = row_stats(row, eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let (value, cache) =
            batch_norm::forward(self.value(x), self.value(gamma), self.value(beta), state, mode)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Selects rows of a matrix (embedding lookup when `x` is a table).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return Err(Error::InvalidTensor("gather with no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::TokenOutOfRange { id: r, size: n });
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q`, `k`, `v` of shape `[batch·seq × d]`. Keys with
    /// `key_valid == false` get an additive −∞ score (zero weight).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_valid: &[bool],
    ) -> Result<Var> {
        let AttentionShape { batch, seq, heads } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.shape() != [batch * seq, d]
            || kv.shape() != qv.shape()
            || vv.shape() != qv.shape()
            || key_valid.len() != batch * seq
            || d % heads != 0
        {
            return Err(Error::Shape {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv.data()[(b * seq + i) * d + h * dh..][..dh];
                    let row = &mut probs[base + i * seq..base + (i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            let kj = &kv.data()[(b * seq + j) * d + h * dh..][..dh];
                            let s = super::tensor::dot(qi, kj) * scale;
                            row[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut total = 0.0;
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    if total > 0.0 {
                        row.iter_mut().for_each(|p| *p /= total);
                    }
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let p = row[j];
                        if p != 0.0 {
                            let vj = &vv.data()[(b * seq + j) * d + h * dh..][..dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                key_valid: key_valid.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights `[batch, heads, seq, seq]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy (nats) of `logits[n×V]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::TokenOutOfRange { id: t, size: c });
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. Every parameter gradient in
    /// `params` is overwritten: trainable parameters receive ∂loss/∂value,
    /// everything else is zero.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        params.zero_grads();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(idx) => {
                    let p = params.by_index_mut(*idx);
                    if p.trainable {
                        for (dst, src) in p.grad.data_mut().iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nt(&g, bv.data(), &mut da, m, n, k);
                        self.accumulate(&mut adj, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn(av.data(), &g, &mut db, m, k, n);
                        self.accumulate(&mut adj, *b, db);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] = g[i * c + j];
                        }
                    }
                    self.accumulate(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, g.clone());
                    self.accumulate(&mut adj, *b, g);
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let n = self.value(*bias).len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(&mut adj, *bias, db);
                    }
                    self.accumulate(&mut adj, *x, g);
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                        self.accumulate(&mut adj, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                        self.accumulate(&mut adj, *b, db);
                    }
                }
                Op::Scale(x, c) => {
                    self.accumulate(&mut adj, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(&mut adj, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let c = node.value.cols();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), pr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                        let inner: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = pr[j] * (gr[j] - inner);
                        }
                    }
                    self.accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let d = gv.len();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * hr[j];
                                db[j] += gr[j];
                            }
                        }
                        self.accumulate(&mut adj, *gamma, dg);
                        self.accumulate(&mut adj, *beta, db);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; g.len()];
                        let n = d as f64;
                        for (r, ((dr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                dr[j] = inv_std[r] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        self.accumulate(&mut adj, *x, dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let gv = self.value(*gamma).data();
                    let d = gv.len();
                    let b = g.len() / d;
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; g.len()];
                        match mode {
                            Mode::Eval => {
                                for (dr, gr) in dx.chunks_mut(d).zip(g.chunks(d)) {
                                    for j in 0..d {
                                        dr[j] = gr[j] * gv[j] * inv_std[j];
                                    }
                                }
                            }
                            Mode::Train => {
                                let n = b as f64;
                                // Σ_r dy·γ and Σ_r dy·γ·x̂ per column
                                let sum_dh: Vec<f64> = (0..d).map(|j| db[j] * gv[j]).collect();
                                let sum_dh_h: Vec<f64> = (0..d).map(|j| dg[j] * gv[j]).collect();
                                for (r, dr) in dx.chunks_mut(d).enumerate() {
                                    for j in 0..d {
                                        let dh = g[r * d + j] * gv[j];
                                        dr[j] = inv_std[j] / n
                                            * (n * dh - sum_dh[j] - xhat[r * d + j] * sum_dh_h[j]);
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut adj, *x, dx);
                    }
                    self.accumulate(&mut adj, *gamma, dg);
                    self.accumulate(&mut adj, *beta, db);
                }
                Op::Dropout { x, mask } => {
                    self.accumulate(&mut adj, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::Gather { x, rows } => {
                    if self.requires_grad(*x) {
                        let xv = self.value(*x);
                        let d = xv.cols();
                        let mut dx = vec![0.0; xv.len()];
                        for (k, &r) in rows.iter().enumerate() {
                            for (dst, src) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                                *dst += src;
                            }
                        }
                        self.accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    key_valid,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *shape, key_valid, probs, &g);
                    self.accumulate(&mut adj, *q, dq);
                    self.accumulate(&mut adj, *k, dk);
                    self.accumulate(&mut adj, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = self.value(*logits).cols();
                    let n = targets.len() as f64;
                    let scale = g[0] / n;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * c + t] -= scale;
                    }
                    self.accumulate(&mut adj, *logits, dx);
                }
                Op::BceWithLogits { logits, targets } => {
                    let scale = g[0] / targets.len() as f64;
                    let dx = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    self.accumulate(&mut adj, *logits, dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut adj, *x, vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, grad: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_valid: &[bool],
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let AttentionShape { batch, seq, heads } = shape;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let p = &probs[base + i * seq..base + (i + 1) * seq];
                    let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                    let mut inner = 0.0;
                    for j in 0..seq {
                        if !key_valid[b * seq + j] {
                            dp[j] = 0.0;
                            continue;
                        }
                        let off = (b * seq + j) * d + h * dh;
                        dp[j] = super::tensor::dot(gi, &vv[off..off + dh]);
                        inner += p[j] * dp[j];
                        for (dst, src) in dv[off..off + dh].iter_mut().zip(gi) {
                            *dst += p[j] * src;
                        }
                    }
                    let qoff = (b * seq + i) * d + h * dh;
                    for j in 0..seq {
                        if !key_valid[b * seq + j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * seq + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qoff + t] += ds * kv[koff + t];
                            dk[koff + t] += ds * qv[qoff + t];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
