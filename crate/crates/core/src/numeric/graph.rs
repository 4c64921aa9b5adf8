//! Tape-based reverse-mode differentiation over the handful of ops the
//! models use.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! pass. Parameters enter the tape lazily (one leaf per parameter, however
//! often it is used, so tied weights accumulate both contributions), and
//! [`Graph::backward`] hands back per-parameter gradients for the caller to
//! fold into the store. Frozen parameters never get a gradient.

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, AttentionLayout};
use crate::numeric::{ParamId, ParamStore, Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<F>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
        smoothing: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
    record: bool,
    dropout_rng: Option<Rng>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'s, F: Scalar> Graph<'s, F> {
    /// Training graph: records backward state; dropout draws from `dropout_rng`.
    pub fn train(store: &'s ParamStore<F>, dropout_rng: Rng) -> Self {
        Self::build(store, true, Some(dropout_rng))
    }

    /// Training graph without dropout (gradient checks, deterministic probes).
    pub fn train_no_dropout(store: &'s ParamStore<F>) -> Self {
        Self::build(store, true, None)
    }

    /// Inference graph: no gradients, dropout is the identity.
    pub fn eval(store: &'s ParamStore<F>) -> Self {
        Self::build(store, false, None)
    }

    fn build(store: &'s ParamStore<F>, record: bool, dropout_rng: Option<Rng>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            record,
            dropout_rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let requires_grad = self.record && self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn mat_dims(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((n, k), (k2, m)) = (self.mat_dims(a), self.mat_dims(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((n, k), (m, k2)) = (self.mat_dims(a), self.mat_dims(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(shape_err("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a).shape(), self.value(b).shape()));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Adds a `[m]` bias to every row of `x[n,m]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let m = self.value(x).cols();
        if self.value(bias).len() != m {
            return Err(shape_err("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut out = self.value(x).data().to_vec();
        kernels::add_bias(&mut out, self.value(bias).data());
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let out = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).data().to_vec();
        let m = self.value(x).cols();
        out.chunks_mut(m).for_each(kernels::softmax_in_place);
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V,d]`, giving `[indices.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.mat_dims(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("embedding", self.value(table).shape(), &[bad]));
        }
        if indices.is_empty() {
            return Err(shape_err("embedding", self.value(table).shape(), &[0]));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x[n,d]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, d) = self.mat_dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("gather_rows", self.value(x).shape(), &[rows.len()]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity on eval graphs or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if self.dropout_rng.is_none() || p <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.bernoulli(p) { F::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let d = self.value(q).cols();
        let qs = self.value(q).shape();
        let ks = self.value(k).shape();
        if qs[0] != layout.batch * layout.q_len
            || ks[0] != layout.batch * layout.k_len
            || self.value(v).shape() != ks
            || ks[1] != d
            || !d.is_multiple_of(layout.heads)
            || layout.key_valid.len() != layout.batch * layout.k_len
        {
            return Err(shape_err("attention", qs, ks));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &layout,
        );
        let n = layout.batch * layout.q_len;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`. With no targets
    /// the loss is defined as zero.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        label_smoothing: f64,
    ) -> Result<NodeId> {
        let (n, v) = self.mat_dims(logits);
        if targets.len() != n || targets.iter().flatten().any(|&t| t >= v) {
            return Err(shape_err("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        let eps = F::of(label_smoothing);
        let mut logp = self.value(logits).data().to_vec();
        let mut total = F::zero();
        let mut count = 0usize;
        for (row, t) in logp.chunks_mut(v).zip(targets) {
            if let Some(t) = *t {
                kernels::log_softmax_in_place(row);
                let mut nll = -row[t];
                if label_smoothing > 0.0 {
                    let mean: F = row.iter().copied().sum::<F>() / F::of(v as f64);
                    nll = (F::one() - eps) * nll - eps * mean;
                }
                total += nll;
                count += 1;
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::of(count as f64)
        };
        let rg = self.requires(logits);
        let probs = if rg {
            for (row, t) in logp.chunks_mut(v).zip(targets) {
                if t.is_some() {
                    row.iter_mut().for_each(|x| *x = x.exp());
                }
            }
            logp
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
                smoothing: eps,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns the gradient of every
    /// trainable parameter reached.
    pub fn backward(self, loss: NodeId) -> Result<Vec<(ParamId, Tensor<F>)>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        let mut out = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx, g, &mut grads, &mut out);
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_node(
        &self,
        idx: usize,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        out: &mut Vec<(ParamId, Tensor<F>)>,
    ) {
        let send = |grads: &mut [Option<Tensor<F>>], to: NodeId, t: Tensor<F>| {
            if !self.nodes[to.0].requires_grad {
                return;
            }
            match &mut grads[to.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(p) => out.push((*p, g)),
            Op::MatMul(a, b) => {
                let (n, k) = self.mat_dims(*a);
                let m = self.value(*b).cols();
                if self.requires(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), n, m, k);
                    send(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.requires(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, n, k, m);
                    send(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.mat_dims(*a);
                let m = self.value(*b).rows();
                if self.requires(*a) {
                    let da = kernels::matmul_nn(gd, self.value(*b).data(), n, m, k);
                    send(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.requires(*b) {
                    let db = kernels::matmul_tn(gd, self.value(*a).data(), n, m, k);
                    send(grads, *b, Tensor::from_parts(vec![m, k], db));
                }
            }
            Op::Add(a, b) => {
                if self.requires(*b) {
                    send(grads, *b, g.clone());
                }
                send(grads, *a, g);
            }
            Op::AddBias(x, b) => {
                if self.requires(*b) {
                    let m = self.value(*b).len();
                    let db = kernels::column_sums(gd, m);
                    send(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), db));
                }
                send(grads, *x, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let shape = g.shape().to_vec();
                if self.requires(*a) {
                    let da = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    send(grads, *a, Tensor::from_parts(shape.clone(), da));
                }
                if self.requires(*b) {
                    let db = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    send(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Scale(x, s) => {
                let dx = gd.iter().map(|&v| v * *s).collect();
                send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                send(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&gv, &v)| gv * kernels::gelu_grad(v)).collect();
                send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let m = y.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(m).zip(y.data().chunks(m)).zip(gd.chunks(m)) {
                    let s: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (dx, dgain, dbias) = kernels::layer_norm_backward(gd, xhat, inv_std, gv.data());
                if self.requires(*gain) {
                    send(grads, *gain, Tensor::from_parts(gv.shape().to_vec(), dgain));
                }
                if self.requires(*bias) {
                    let bs = self.value(*bias).shape().to_vec();
                    send(grads, *bias, Tensor::from_parts(bs, dbias));
                }
                send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Embedding { table, indices } => {
                let shape = self.value(*table).shape().to_vec();
                let d = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let data = dt.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] += gd[r * d + j];
                    }
                }
                send(grads, *table, dt);
            }
            Op::GatherRows { x, rows } => {
                let shape = self.value(*x).shape().to_vec();
                let d = shape[1];
                let mut dx = Tensor::zeros(&shape);
                let data = dx.data_mut();
                for (r, &i) in rows.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] += gd[r * d + j];
                    }
                }
                send(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = self.value(*q).cols();
                let (dq, dk, dv) = kernels::attention_backward(
                    gd,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    d,
                    layout,
                );
                let qs = self.value(*q).shape().to_vec();
                let ks = self.value(*k).shape().to_vec();
                send(grads, *q, Tensor::from_parts(qs, dq));
                send(grads, *k, Tensor::from_parts(ks.clone(), dk));
                send(grads, *v, Tensor::from_parts(ks, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
                smoothing,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let v = shape[1];
                let mut dl = vec![F::zero(); shape[0] * v];
                if *count > 0 {
                    let scale = gd[0] / F::of(*count as f64);
                    let uniform = *smoothing / F::of(v as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let pr = &probs[r * v..(r + 1) * v];
                            let dr = &mut dl[r * v..(r + 1) * v];
                            for j in 0..v {
                                dr[j] = (pr[j] - uniform) * scale;
                            }
                            dr[t] -= (F::one() - *smoothing) * scale;
                        }
                    }
                }
                send(grads, *logits, Tensor::from_parts(shape, dl));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Stream;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, shape, data) in values {
            s.add(*name, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let store = store_with(&[("w", vec![2, 3], vec![0.5; 6])]);
        let w = store.id("w").unwrap();
        let mut g = Graph::train_no_dropout(&store);
        let wn = g.param(w);
        let loss = g.sum(wn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square() {
        let store = store_with(&[("x", vec![1], vec![3.0])]);
        let x = store.id("x").unwrap();
        let mut g = Graph::train_no_dropout(&store);
        let xn = g.param(x);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[0].1.data(), &[6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = store_with(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![2], vec![3.0, 4.0])]);
        let (a, b) = (store.id("a").unwrap(), store.id("b").unwrap());
        store.get_mut(b).trainable = false;
        let mut g = Graph::train_no_dropout(&store);
        let (an, bn) = (g.param(a), g.param(b));
        let p = g.mul(an, bn).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        store.accumulate(grads);
        assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = store_with(&[("w", vec![2, 2], vec![1.0; 4])]);
        let mut g = Graph::train_no_dropout(&store);
        let w = g.param(store.id("w").unwrap());
        let y = g.gelu(w);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let store = store_with(&[("a", vec![2, 3], vec![0.0; 6]), ("b", vec![2, 3], vec![0.0; 6])]);
        let mut g = Graph::eval(&store);
        let (a, b) = (g.param(store.id("a").unwrap()), g.param(store.id("b").unwrap()));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_expectation_and_eval_identity() {
        let n = 1_000_000;
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::train(&store, Rng::new(11, Stream::Dropout));
        let x = g.input(Tensor::full(&[n], 1.0));
        let y = g.dropout(x, 0.1);
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let mut e = Graph::eval(&store);
        let x = e.input(Tensor::full(&[4], 1.0));
        let y = e.dropout(x, 0.1);
        assert_eq!(x, y);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store: ParamStore<f32> = ParamStore::new();
        let mut g = Graph::eval(&store);
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.77).sin() * 8.0).collect();
        let x = g.input(Tensor::new(vec![6, 10], data).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_vanishes_with_growing_gap() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut last = f64::INFINITY;
        for gap in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let mut g = Graph::eval(&store);
            let x = g.input(Tensor::new(vec![1, 3], vec![gap, 0.0, 0.0]).unwrap());
            let l = g.cross_entropy(x, &[Some(0)], 0.0).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let l = g.cross_entropy(x, &[None, None], 0.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }
}
