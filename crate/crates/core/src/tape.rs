//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so the tape is
//! already in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node at most once.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::linalg::gemm;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `batch × q_len` rows and keys/values `batch × k_len` rows,
/// utterance-major. Key `j` of utterance `b` is visible iff
/// `j < key_lens[b]` and, when `causal`, `j <= i` for query `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Stored {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    StatsPool {
        x: Var,
        segments: Vec<(usize, usize)>,
        means: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// A fused scalar loss whose gradient w.r.t. `input` was computed during
    /// the forward pass.
    Fused {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Stored,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    grad_params: bool,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters (constants and explicit leaves only).
    pub fn new() -> Self {
        Self { store: None, grad_params: false, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    /// A tape that reads parameters from `store`. With `grad_params` false
    /// nothing downstream of the parameters is differentiated.
    pub fn with_params(store: &'p ParamStore, grad_params: bool) -> Self {
        Self { store: Some(store), grad_params, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.store.expect("param node without store").value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Post-softmax attention weights `[batch, heads, q_len, k_len]` of an
    /// attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Stored::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// The node for a stored parameter; loading the same id twice returns the
    /// same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node { value: Stored::Param(id), op: Op::Leaf, requires_grad: self.grad_params });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let sw = tw.shape();
        if sw.len() != 2 || tx.cols() != sw[0] {
            return Err(Error::ShapeMismatch(format!("linear {:?} x {:?}", tx.shape(), sw)));
        }
        let (m, k, n) = (tx.rows(), sw[0], sw[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, false);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n {
                return Err(Error::ShapeMismatch(format!("bias {:?} for width {n}", tb.shape())));
            }
            for row in out.chunks_mut(n) {
                for (o, bias) in row.iter_mut().zip(tb.data()) {
                    *o += bias;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("linear input has an axis") = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what} {:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm width {d} with gain {:?} bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = vec![0.0; tx.len()];
        if d > 0 {
            for (src, dst) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
                math::softmax_into(src, dst);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Scaled dot-product attention with `spec.heads` heads splitting the
    /// model width.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d {
            return Err(Error::ShapeMismatch("attention q/k/v widths differ".into()));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::ShapeMismatch(format!("width {d} not divisible by {} heads", spec.heads)));
        }
        if tq.rows() != spec.batch * spec.q_len
            || tk.rows() != spec.batch * spec.k_len
            || tv.rows() != spec.batch * spec.k_len
            || spec.key_lens.len() != spec.batch
        {
            return Err(Error::ShapeMismatch("attention rows disagree with its layout".into()));
        }
        let dk = d / spec.heads;
        let scale = 1.0 / math::sqrt(dk as f64);
        let (lq, lk) = (spec.q_len, spec.k_len);
        let mut probs = vec![0.0; spec.batch * spec.heads * lq * lk];
        let mut out = vec![0.0; tq.len()];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; lk];
        for b in 0..spec.batch {
            let klen = spec.key_lens[b].min(lk);
            for h in 0..spec.heads {
                let off = h * dk;
                for i in 0..lq {
                    let visible = if spec.causal { klen.min(i + 1) } else { klen };
                    if visible == 0 {
                        continue;
                    }
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dk];
                    for (j, s) in scores.iter_mut().enumerate().take(visible) {
                        let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let p = &mut probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                    math::softmax_into(&scores[..visible], &mut p[..visible]);
                    let orow = &mut out[(b * lq + i) * d + off..(b * lq + i) * d + off + dk];
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, rg))
    }

    /// Gathers rows of a `[n, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::ShapeMismatch(format!("embedding id {bad} >= {n}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Per-segment mean and population variance of the rows of `x`,
    /// concatenated into one `[segments, 2·d]` output. Each segment is a
    /// `(first_row, row_count)` pair with `row_count >= 1`.
    pub fn stats_pool(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; segments.len() * 2 * d];
        let mut means = vec![0.0; segments.len() * d];
        for (s, &(start, count)) in segments.iter().enumerate() {
            if count == 0 {
                return Err(Error::EmptyUtterance);
            }
            if start + count > rows {
                return Err(Error::ShapeMismatch(format!("segment {start}+{count} beyond {rows} rows")));
            }
            let mean = &mut means[s * d..(s + 1) * d];
            for r in start..start + count {
                for (m, x) in mean.iter_mut().zip(tx.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let (o_mean, o_var) = out[s * 2 * d..(s + 1) * 2 * d].split_at_mut(d);
            o_mean.copy_from_slice(mean);
            for r in start..start + count {
                for ((v, x), m) in o_var.iter_mut().zip(tx.row(r)).zip(mean.iter()) {
                    *v += (x - m) * (x - m);
                }
            }
            o_var.iter_mut().for_each(|v| *v /= count as f64);
        }
        let out = Tensor::new(vec![segments.len(), 2 * d], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::StatsPool { x, segments: segments.to_vec(), means }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Records a scalar whose gradient with respect to `input` is already
    /// known. Used by the fused loss kernels.
    pub(crate) fn fused_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(input).len());
        let rg = self.rg(input);
        self.push(Tensor::scalar(value), Op::Fused { input, grad }, rg)
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, Var(i), &g, &mut grads);
        }
        let mut leaves = BTreeMap::new();
        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].value {
                Stored::Param(id) => params.push((id, g)),
                Stored::Owned(_) => {
                    leaves.insert(Var(i), g);
                }
            }
        }
        Ok(Gradients { leaves, params, visited })
    }

    fn backward_node(&self, node: &Node, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(a) {
                    let da = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, da, true);
                }
                if self.rg(b) {
                    let db = slot(grads, b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, db, true);
                }
            }
            &Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (m, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
                if self.rg(x) {
                    let dx = slot(grads, x, m * k);
                    gemm(m, n, k, g, false, tw.data(), true, dx, true);
                }
                if self.rg(w) {
                    let dw = slot(grads, w, k * n);
                    gemm(k, m, n, tx.data(), true, g, false, dw, true);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let db = slot(grads, b, n);
                    for row in g.chunks(n) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let tb = self.value(b).data();
                    let da = slot(grads, a, g.len());
                    for ((acc, gi), y) in da.iter_mut().zip(g).zip(tb) {
                        *acc += gi * y;
                    }
                }
                if self.rg(b) {
                    let ta = self.value(a).data();
                    let db = slot(grads, b, g.len());
                    for ((acc, gi), x) in db.iter_mut().zip(g).zip(ta) {
                        *acc += gi * x;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.rg(a) {
                    let da = slot(grads, a, g.len());
                    for (acc, gi) in da.iter_mut().zip(g) {
                        *acc += s * gi;
                    }
                }
            }
            &Op::Relu(a) => {
                if self.rg(a) {
                    let y = self.value(out).data();
                    let da = slot(grads, a, g.len());
                    for ((acc, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    for ((acc, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *acc += gi * m;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                if self.rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gd[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for c in 0..d {
                            dx[r * d + c] += inv * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
                if self.rg(*gain) {
                    let dg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            &Op::Softmax(a) => {
                if self.rg(a) {
                    let y = self.value(out);
                    let d = y.cols();
                    let da = slot(grads, a, g.len());
                    for ((dr, gr), yr) in da.chunks_mut(d).zip(g.chunks(d)).zip(y.data().chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for c in 0..d {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let dt = slot(grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::StatsPool { x, segments, means } => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let dx = slot(grads, *x, tx.len());
                    for (s, &(start, count)) in segments.iter().enumerate() {
                        let inv = 1.0 / count as f64;
                        let gm = &g[s * 2 * d..s * 2 * d + d];
                        let gv = &g[s * 2 * d + d..(s + 1) * 2 * d];
                        let mean = &means[s * d..(s + 1) * d];
                        for r in start..start + count {
                            let xr = tx.row(r);
                            for c in 0..d {
                                dx[r * d + c] += inv * (gm[c] + 2.0 * gv[c] * (xr[c] - mean[c]));
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if self.rg(a) {
                    let n = self.value(a).len();
                    slot(grads, a, n).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if self.rg(a) {
                    let n = self.value(a).len();
                    let share = g[0] / n.max(1) as f64;
                    slot(grads, a, n).iter_mut().for_each(|x| *x += share);
                }
            }
            &Op::Reshape(a) => {
                if self.rg(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            Op::Fused { input, grad } => {
                if self.rg(*input) {
                    let di = slot(grads, *input, grad.len());
                    for (acc, x) in di.iter_mut().zip(grad) {
                        *acc += g[0] * x;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dk = d / spec.heads;
        let scale = 1.0 / math::sqrt(dk as f64);
        let (lq, lk) = (spec.q_len, spec.k_len);
        let mut dq = self.rg(q).then(|| vec![0.0; tq.len()]);
        let mut dkm = self.rg(k).then(|| vec![0.0; tk.len()]);
        let mut dv = self.rg(v).then(|| vec![0.0; tv.len()]);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dp = vec![0.0; lk];
        for b in 0..spec.batch {
            let klen = spec.key_lens[b].min(lk);
            for h in 0..spec.heads {
                let off = h * dk;
                for i in 0..lq {
                    let visible = if spec.causal { klen.min(i + 1) } else { klen };
                    if visible == 0 {
                        continue;
                    }
                    let p = &probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                    let grow = &g[(b * lq + i) * d + off..(b * lq + i) * d + off + dk];
                    let mut dot = 0.0;
                    for j in 0..visible {
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                        dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        if let Some(dv) = dv.as_mut() {
                            let dvrow = &mut dv[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                            for (acc, x) in dvrow.iter_mut().zip(grow) {
                                *acc += p[j] * x;
                            }
                        }
                    }
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dk];
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                        if let Some(dq) = dq.as_mut() {
                            let dqrow = &mut dq[(b * lq + i) * d + off..(b * lq + i) * d + off + dk];
                            for (acc, x) in dqrow.iter_mut().zip(krow) {
                                *acc += ds * x;
                            }
                        }
                        if let Some(dkm) = dkm.as_mut() {
                            let dkrow = &mut dkm[(b * lk + j) * d + off..(b * lk + j) * d + off + dk];
                            for (acc, x) in dkrow.iter_mut().zip(qrow) {
                                *acc += ds * x;
                            }
                        }
                    }
                }
            }
        }
        for (var, gv) in [(q, dq), (k, dkm), (v, dv)] {
            if let Some(gv) = gv {
                add_into(slot(grads, var, gv.len()), &gv);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += x;
    }
}

/// Result of one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a non-parameter leaf, if it requires one and is reachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Number of non-leaf nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1].is_finite() && v[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // e^1, e^2, e^3 over their sum, evaluated independently.
        let e: [f64; 3] = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let s: f64 = e.iter().sum();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x);
        for (got, want) in tape.value(y).data().iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-15);
        }
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_8];
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn backward_linear_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[4], 3.0), true);
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert_eq!(tape.backward(x).unwrap_err(), Error::NotScalar(2));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]), true);
        let a = tape.relu(x);
        let b = tape.softmax(a);
        let c = tape.mul(a, b).unwrap();
        let d = tape.add(c, b).unwrap();
        let e = tape.scale(d, 0.5);
        let s = tape.sum(e);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visited(), 6);
    }

    #[test]
    fn params_are_loaded_once_and_accumulate_in_store() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let grads = {
            let mut tape = Tape::with_params(&store, true);
            let a = tape.param(id);
            let b = tape.param(id);
            assert_eq!(a, b);
            let y = tape.mul(a, b).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        };
        assert_eq!(grads.param(id).unwrap(), &[2.0, 4.0]);
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.grad(id).data(), &[4.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::with_params(&store, false);
        let w = tape.param(id);
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert!(g.param(id).is_none());
        assert_eq!(g.visited(), 0);
    }

    #[test]
    fn dropout_keeps_expectation_scale() {
        let mut r = rng::stream(3, &[]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1000], 1.0));
        let y = tape.dropout(x, 0.5, &mut r);
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn attention_rows_sum_to_one_and_respect_masks() {
        let mut r = rng::stream(9, &[]);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![6, 4], data).unwrap());
        let spec = AttentionSpec { batch: 2, q_len: 3, k_len: 3, heads: 2, key_lens: vec![3, 2], causal: true };
        let y = tape.attention(x, x, x, spec).unwrap();
        let p = tape.attention_weights(y).unwrap();
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..3 {
                    let row = &p[((b * 2 + h) * 3 + i) * 3..][..3];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (j, &pj) in row.iter().enumerate() {
                        if j > i || (b == 1 && j >= 2) {
                            assert_eq!(pj, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stats_pool_constant_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0]).unwrap());
        let y = tape.stats_pool(x, &[(0, 3), (1, 1)]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.0, 0.0, 1.0, -2.0, 0.0, 0.0]);
        assert_eq!(tape.stats_pool(x, &[(0, 0)]).unwrap_err(), Error::EmptyUtterance);
    }
}
