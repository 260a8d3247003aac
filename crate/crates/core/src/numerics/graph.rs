//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records itself on the tape; `backward`
//! replays the tape in reverse. All loops run in a fixed order, so gradients
//! are bit-reproducible for a given input.

use std::collections::HashMap;

use super::scalar::{gemm, MatView};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        rhs_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MeanGroups {
        x: Var,
        groups: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Mse {
        pred: Var,
        target: Tensor<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A recording of one forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf bound to a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Param(idx), p.requires_grad);
        self.params.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let rhs_batched = !lead_b.is_empty() && lead_b.iter().product::<usize>() != 1;
        if rhs_batched && lead_a != lead_b {
            return Err(shape_err!("matmul batch dims differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if rhs_batched {
                for i in 0..batch {
                    gemm(
                        S::one(),
                        ad,
                        MatView::dense(i * m * k, m, k),
                        bd,
                        MatView::dense(i * k * n, k, n),
                        false,
                        &mut out,
                        MatView::dense(i * m * n, m, n),
                    );
                }
            } else {
                gemm(
                    S::one(),
                    ad,
                    MatView::dense(0, batch * m, k),
                    bd,
                    MatView::dense(0, k, n),
                    false,
                    &mut out,
                    MatView::dense(0, batch * m, n),
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                rhs_batched,
            },
            ng,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(b) != [d] {
            return Err(shape_err!(
                "bias shape {:?} does not match last dim {d}",
                self.shape(b)
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d.max(1)) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o = *o + bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddBias(x, b), ng))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm affine shapes {:?}/{:?} do not match last dim {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = S::of(eps);
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = S::one() / S::of(d as f64);
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) * inv_d;
            let var = row
                .iter()
                .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_fwd);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let d = v.cols();
        if d > 0 {
            for row in v.data_mut().chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Multi-head self-attention core.
    ///
    /// `qkv` has shape `(batch * seq, 3 * d)` with query, key and value blocks
    /// side by side, each split into `heads` contiguous head slices. Returns
    /// `(batch * seq, d)` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 2 || shape[0] != batch * seq || shape[1] % 3 != 0 {
            return Err(shape_err!(
                "attention input {shape:?} incompatible with batch {batch} x seq {seq}"
            ));
        }
        let d = shape[1] / 3;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let (q, k, v) = qkv_views(b, h, seq, d, dh);
                let pslice = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(scale, src, q, src, k.t(), false, pslice, MatView::dense(0, seq, seq));
                for row in pslice.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    S::one(),
                    pslice,
                    MatView::dense(0, seq, seq),
                    src,
                    v,
                    false,
                    &mut out,
                    out_view(b, h, seq, d, dh),
                );
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(qkv);
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Rows of a 2-D tensor selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x).gather_rows(&idx)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::GatherRows { x, idx }, ng))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err!("concat column mismatch {} vs {cols}", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Mean over each of `groups` equal contiguous row blocks.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if groups == 0 || rows % groups != 0 || rows == 0 {
            return Err(shape_err!("{rows} rows cannot form {groups} groups"));
        }
        let per = rows / groups;
        let inv = S::one() / S::of(per as f64);
        let mut out = vec![S::zero(); groups * cols];
        for gi in 0..groups {
            let o = &mut out[gi * cols..(gi + 1) * cols];
            for r in gi * per..(gi + 1) * per {
                for (acc, &v) in o.iter_mut().zip(t.row(r)) {
                    *acc = *acc + v;
                }
            }
            for v in o.iter_mut() {
                *v = *v * inv;
            }
        }
        let ng = self.ng(x);
        let v = Tensor::new(vec![groups, cols], out)?;
        Ok(self.push(v, Op::MeanGroups { x, groups }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &v| a + v);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let s = t.data().iter().fold(S::zero(), |a, &v| a + v);
        let m = if n == 0 { S::zero() } else { s / S::of(n as f64) };
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Mean squared error against a fixed target; empty inputs give 0.
    pub fn mse(&mut self, pred: Var, target: Tensor<S>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let p = self.value(pred);
        let n = p.numel();
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .fold(S::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
        let m = if n == 0 { S::zero() } else { s / S::of(n as f64) };
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(m), Op::Mse { pred, target }, ng))
    }

    /// Mean cross-entropy of `(batch, classes)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.rows() != labels.len() {
            return Err(shape_err!(
                "logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            ));
        }
        let c = t.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = S::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss = loss - row[l].max(S::min_positive_value()).ln();
        }
        let n = S::of(labels.len().max(1) as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`; parameter gradients are added to
    /// whatever `store` already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, store)?;
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<S>,
        gy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(idx) => store.accumulate_grad(*idx, gy)?,
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                rhs_batched,
            } => {
                let (ad, bd, g) = (self.value(a).data(), self.value(b).data(), gy.data());
                if self.ng(a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    if rhs_batched {
                        for i in 0..batch {
                            gemm(
                                S::one(),
                                g,
                                MatView::dense(i * m * n, m, n),
                                bd,
                                MatView::dense(i * k * n, k, n).t(),
                                false,
                                &mut da,
                                MatView::dense(i * m * k, m, k),
                            );
                        }
                    } else {
                        gemm(
                            S::one(),
                            g,
                            MatView::dense(0, batch * m, n),
                            bd,
                            MatView::dense(0, k, n).t(),
                            false,
                            &mut da,
                            MatView::dense(0, batch * m, k),
                        );
                    }
                    self.acc(grads, a, Tensor::new(self.shape(a).to_vec(), da)?);
                }
                if self.ng(b) {
                    let mut db = vec![S::zero(); self.value(b).numel()];
                    if rhs_batched {
                        for i in 0..batch {
                            gemm(
                                S::one(),
                                ad,
                                MatView::dense(i * m * k, m, k).t(),
                                g,
                                MatView::dense(i * m * n, m, n),
                                false,
                                &mut db,
                                MatView::dense(i * k * n, k, n),
                            );
                        }
                    } else {
                        gemm(
                            S::one(),
                            ad,
                            MatView::dense(0, batch * m, k).t(),
                            g,
                            MatView::dense(0, batch * m, n),
                            false,
                            &mut db,
                            MatView::dense(0, k, n),
                        );
                    }
                    self.acc(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, gy.clone());
                self.acc(grads, b, gy.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, gy.clone());
                self.acc(grads, b, gy.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    self.acc(grads, a, Tensor::new(gy.shape().to_vec(), d)?);
                }
                if self.ng(b) {
                    let d = gy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, b, Tensor::new(gy.shape().to_vec(), d)?);
                }
            }
            &Op::Scale(a, c) => self.acc(grads, a, gy.map(|v| v * c)),
            &Op::AddBias(x, b) => {
                if self.ng(b) {
                    let d = gy.cols();
                    let mut db = vec![S::zero(); d];
                    for row in gy.data().chunks(d.max(1)) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.acc(grads, b, Tensor::new(vec![d], db)?);
                }
                self.acc(grads, x, gy.clone());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gy.cols();
                let rows = gy.rows();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![S::zero(); d];
                    let mut db = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let g = gy.data()[r * d + j];
                            dg[j] = dg[j] + g * xhat[r * d + j];
                            db[j] = db[j] + g;
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(vec![d], dg)?);
                    self.acc(grads, *beta, Tensor::new(vec![d], db)?);
                }
                if self.ng(*x) {
                    let inv_d = S::one() / S::of(d as f64);
                    let mut dx = vec![S::zero(); rows * d];
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for j in 0..d {
                            let v = gy.data()[r * d + j] * gam[j];
                            dxhat[j] = v;
                            mean_dxh = mean_dxh + v;
                            mean_dxh_xh = mean_dxh_xh + v * xhat[r * d + j];
                        }
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r]
                                * (dxhat[j] - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
                }
            }
            &Op::Gelu(x) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| g * gelu_grad(v))
                    .collect();
                self.acc(grads, x, Tensor::new(gy.shape().to_vec(), d)?);
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![S::zero(); y.numel()];
                if c > 0 {
                    for ((out, yr), gr) in dx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                    {
                        let dot = yr.iter().zip(gr).fold(S::zero(), |a, (&p, &g)| a + p * g);
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.acc(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let src = self.value(*qkv).data();
                let d = src.len() / (batch * seq).max(1) / 3;
                let dh = d / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let mut dqkv = vec![S::zero(); src.len()];
                let mut dp = vec![S::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let (q, k, v) = qkv_views(b, h, seq, d, dh);
                        let ov = out_view(b, h, seq, d, dh);
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let pv = MatView::dense(0, seq, seq);
                        gemm(S::one(), gy.data(), ov, src, v.t(), false, &mut dp, pv);
                        gemm(S::one(), p, pv.t(), gy.data(), ov, false, &mut dqkv, v);
                        for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot = dr.iter().zip(pr).fold(S::zero(), |a, (&g, &y)| a + g * y);
                            for j in 0..seq {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(S::one(), &dp, pv, src, k, false, &mut dqkv, q);
                        gemm(S::one(), &dp, pv.t(), src, q, false, &mut dqkv, k);
                    }
                }
                self.acc(grads, *qkv, Tensor::new(self.shape(*qkv).to_vec(), dqkv)?);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![S::zero(); xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + gy.data()[r * c + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.ng(p) {
                        let g = gy.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), g)?);
                    }
                    offset += n;
                }
            }
            &Op::MeanGroups { x, groups } => {
                let xv = self.value(x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let per = rows / groups;
                let inv = S::one() / S::of(per as f64);
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let gi = r / per;
                    for j in 0..cols {
                        dx[r * cols + j] = gy.data()[gi * cols + j] * inv;
                    }
                }
                self.acc(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            &Op::Sum(x) => {
                let g = gy.item();
                self.acc(grads, x, Tensor::full(self.shape(x), g));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel().max(1);
                let g = gy.item() / S::of(n as f64);
                self.acc(grads, x, Tensor::full(self.shape(x), g));
            }
            &Op::Reshape(x) => {
                let g = gy.clone().reshape(self.shape(x))?;
                self.acc(grads, x, g);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.numel().max(1);
                let c = S::of(2.0) * gy.item() / S::of(n as f64);
                let d = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                self.acc(grads, *pred, Tensor::new(p.shape().to_vec(), d)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = gy.item() / S::of(labels.len().max(1) as f64);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(c).zip(labels) {
                    row[l] = row[l] - S::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.acc(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn qkv_views(b: usize, h: usize, seq: usize, d: usize, dh: usize) -> (MatView, MatView, MatView) {
    let base = b * seq * 3 * d + h * dh;
    let view = |off: usize| MatView {
        offset: base + off,
        rows: seq,
        cols: dh,
        row_stride: 3 * d,
        col_stride: 1,
    };
    (view(0), view(d), view(2 * d))
}

fn out_view(b: usize, h: usize, seq: usize, d: usize, dh: usize) -> MatView {
    MatView {
        offset: b * seq * d + h * dh,
        rows: seq,
        cols: dh,
        row_stride: d,
        col_stride: 1,
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let cdf = half * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * S::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let x = g.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[3., 4.]);

        let a = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let y = g.matmul(a, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1]);
        assert_eq!(g.value(y).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gam = g.constant(Tensor::full(&[3], 1.0));
        let bet = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::from_f64(&[1, 3], &[1., 1., 1.]).unwrap());
        let y = g.layer_norm(x, gam, bet, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gam = g.constant(Tensor::full(&[2], 1.0));
        let bet = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_f64(&[1, 2], &[0., 2.]).unwrap());
        let y = g.layer_norm(x, gam, bet, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[0., 0.]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            let x = g.constant(Tensor::from_f64(&[1, 3], &[c, c, c]).unwrap());
            let y = g.softmax(x);
            for &v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[0., 10., -10.]).unwrap());
        let y = g.gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut store = store_with("w", Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let l = g.sum(w);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[1., 1., 1.]);

        let mut store = store_with("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2., 4.]);
        // a second sweep accumulates
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[4., 8.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = store_with("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(matches!(g.backward(w, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_label_range() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(x, &[0, 3]), Err(Error::Data(_))));
        let l = g.cross_entropy(x, &[0, 2]).unwrap();
        assert!((g.value(l).item() - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn mse_of_empty_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[0, 4]));
        let l = g.mse(x, Tensor::zeros(&[0, 4])).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
