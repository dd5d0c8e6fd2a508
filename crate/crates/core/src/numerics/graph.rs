//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar loss with respect to every tracked node.

use rand::Rng;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{KdError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Segment layout of a packed attention call.
///
/// Queries and keys of several sequences are stacked row-wise; segment `s`
/// owns `q_segments[s]` query rows and `kv_segments[s]` key rows.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub q_segments: Vec<usize>,
    pub kv_segments: Vec<usize>,
    pub key_valid: Option<Vec<bool>>,
    pub causal: bool,
    pub heads: usize,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<S> },
    MaskMul { x: Var, mask: Vec<S> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<S> },
    PairMean { x: Var, segments: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Recorded computation.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`, if the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<S> {
        self.get(var).map_or_else(|| vec![S::zero(); len], <[S]>::to_vec)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn make(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Registers an input; gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Var {
        let tracked = tensor.requires_grad();
        let value = Self::make(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(value, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        let value = Self::make(tensor.shape().to_vec(), tensor.into_data());
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Self::make(vec![m, n], data), Op::MatMul(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.value(a).shape().to_vec();
        self.push(Self::make(shape, data), Op::Add(a, b), tracked)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(bias).len(), n, "bias width");
        let mut data = self.value(x).data().to_vec();
        kernels::add_row_bias(&mut data, self.value(bias).data());
        let tracked = self.tracked(x) || self.tracked(bias);
        let shape = self.value(x).shape().to_vec();
        self.push(Self::make(shape, data), Op::AddRow(x, bias), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.value(a).shape().to_vec();
        self.push(Self::make(shape, data), Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, data), Op::Scale(x, c), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let data = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, data), Op::AddScalar(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, data), Op::Relu(x), tracked)
    }

    /// Gathers rows of `table[V,d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.last_dim();
        let vocab = t.len() / d;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} >= {vocab}");
            data.extend_from_slice(t.row(id));
        }
        let tracked = self.tracked(table);
        self.push(
            Self::make(vec![ids.len(), d], data),
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = rows_cols(self.value(x).shape());
        let mut out = vec![S::zero(); m * n];
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        {
            let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                inv_std.push(kernels::layer_norm_row(&xv[r.clone()], g, b, &mut out[r.clone()], &mut xhat[r]));
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let shape = self.value(x).shape().to_vec();
        self.push(
            Self::make(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            tracked,
        )
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let mut out = vec![S::zero(); self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(src, dst);
        }
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, out), Op::Softmax(x), tracked)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let mut out = vec![S::zero(); self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::log_softmax_row(src, dst);
        }
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, out), Op::LogSoftmax(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(S::zero(), |a, &b| a + b);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(S::zero(), |a, &b| a + b) / S::of(t.len() as f64);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Scalar `Σ x_i · w_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<S>) -> Var {
        assert_eq!(self.value(x).len(), weights.len(), "weighted_sum length");
        let s = self.value(x).data().iter().zip(&weights).fold(S::zero(), |a, (&v, &w)| a + v * w);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, tracked)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<S>) -> Var {
        assert_eq!(self.value(x).len(), mask.len(), "mask length");
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Self::make(shape, data), Op::MaskMul { x, mask }, tracked)
    }

    /// Inverted dropout with a mask drawn from `rng`; identity for `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q` is `[Σ q_segments, d]`, `k` and `v` are `[Σ kv_segments, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let d = self.value(q).last_dim();
        assert_eq!(self.value(k).last_dim(), d);
        assert_eq!(layout.q_segments.len(), layout.kv_segments.len());
        assert_eq!(d % layout.heads, 0);
        let dh = d / layout.heads;
        let nq: usize = layout.q_segments.iter().sum();
        let nk: usize = layout.kv_segments.iter().sum();
        assert_eq!(self.value(q).len(), nq * d);
        assert_eq!(self.value(k).len(), nk * d);

        let prob_len: usize = layout
            .q_segments
            .iter()
            .zip(&layout.kv_segments)
            .map(|(&a, &b)| a * b * layout.heads)
            .sum();
        let mut probs = vec![S::zero(); prob_len];
        let mut out = vec![S::zero(); nq * d];
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let (mut q0, mut k0, mut p0) = (0, 0, 0);
            for (&lq, &lk) in layout.q_segments.iter().zip(&layout.kv_segments) {
                let keys = &kv[k0 * d..(k0 + lk) * d];
                let vals = &vv[k0 * d..(k0 + lk) * d];
                let valid = layout.key_valid.as_ref().map(|m| &m[k0..k0 + lk]);
                for i in 0..lq {
                    let n_keys = if layout.causal { (i + 1).min(lk) } else { lk };
                    let qrow = &qv[(q0 + i) * d..(q0 + i + 1) * d];
                    for h in 0..layout.heads {
                        let pr = &mut probs[p0 + (i * layout.heads + h) * lk..][..lk];
                        let o = &mut out[(q0 + i) * d + h * dh..(q0 + i) * d + (h + 1) * dh];
                        kernels::attend(qrow, keys, vals, d, h, dh, n_keys, valid, pr, o);
                    }
                }
                q0 += lq;
                k0 += lk;
                p0 += lq * lk * layout.heads;
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            Self::make(vec![nq, d], out),
            Op::Attention { q, k, v, layout, probs },
            tracked,
        )
    }

    /// Averages adjacent row pairs inside each segment (an odd tail row is kept).
    pub fn pair_mean(&mut self, x: Var, segments: &[usize]) -> Var {
        let d = self.value(x).last_dim();
        let xv = self.value(x).data();
        let half = S::of(0.5);
        let mut out = Vec::new();
        let mut r0 = 0;
        let mut rows = 0;
        for &len in segments {
            let mut i = 0;
            while i < len {
                let a = &xv[(r0 + i) * d..(r0 + i + 1) * d];
                if i + 1 < len {
                    let b = &xv[(r0 + i + 1) * d..(r0 + i + 2) * d];
                    out.extend(a.iter().zip(b).map(|(&p, &q)| (p + q) * half));
                } else {
                    out.extend_from_slice(a);
                }
                rows += 1;
                i += 2;
            }
            r0 += len;
        }
        let tracked = self.tracked(x);
        self.push(
            Self::make(vec![rows, d], out),
            Op::PairMean { x, segments: segments.to_vec() },
            tracked,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(KdError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        if !self.tracked(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn propagate(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc_nt(g, self.value(*b).data(), m, k, n, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_acc_tn(self.value(*a).data(), g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a).data();
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &o) in gx.iter_mut().zip(g).zip(out.data()) {
                        if o > S::zero() {
                            *a += b;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = out.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = out.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row_g in g.chunks(n) {
                        gb.iter_mut().zip(row_g).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = S::of(n as f64);
                    let mut dxhat = vec![S::zero(); n];
                    for (i, (row_g, row_h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            dxhat[j] = row_g[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * row_h[j];
                        }
                        let k = inv_std[i] / nf;
                        let dst = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += k * (nf * dxhat[j] - s1 - row_h[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = out.last_dim();
                    for ((row_y, row_g), dst) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot = row_y.iter().zip(row_g).fold(S::zero(), |a, (&y, &gg)| a + y * gg);
                        for j in 0..n {
                            dst[j] += row_y[j] * (row_g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = out.last_dim();
                    for ((row_y, row_g), dst) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total = row_g.iter().fold(S::zero(), |a, &b| a + b);
                        for j in 0..n {
                            dst[j] += row_g[j] - row_y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = g[0] / S::of(gx.len() as f64);
                    gx.iter_mut().for_each(|a| *a += c);
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(weights).for_each(|(a, &w)| *a += g[0] * w);
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::PairMean { x, segments } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let d = out.last_dim();
                    let half = S::of(0.5);
                    let (mut r_in, mut r_out) = (0, 0);
                    for &len in segments {
                        let mut i = 0;
                        while i < len {
                            let go = &g[r_out * d..(r_out + 1) * d];
                            if i + 1 < len {
                                for j in 0..d {
                                    gx[(r_in + i) * d + j] += go[j] * half;
                                    gx[(r_in + i + 1) * d + j] += go[j] * half;
                                }
                            } else {
                                for j in 0..d {
                                    gx[(r_in + i) * d + j] += go[j];
                                }
                            }
                            r_out += 1;
                            i += 2;
                        }
                        r_in += len;
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
        layout: &AttnLayout,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let d = self.value(q).last_dim();
        let heads = layout.heads;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![S::zero(); qv.len()];
        let mut gk = vec![S::zero(); kv.len()];
        let mut gvv = vec![S::zero(); vv.len()];

        let (mut q0, mut k0, mut p0) = (0, 0, 0);
        let max_lk = layout.kv_segments.iter().copied().max().unwrap_or(0);
        let mut dp = vec![S::zero(); max_lk];
        for (&lq, &lk) in layout.q_segments.iter().zip(&layout.kv_segments) {
            for i in 0..lq {
                let n_keys = if layout.causal { (i + 1).min(lk) } else { lk };
                let qi = (q0 + i) * d;
                for h in 0..heads {
                    let off = h * dh;
                    let pr = &probs[p0 + (i * heads + h) * lk..][..lk];
                    let go = &g[qi + off..qi + off + dh];
                    // dP_j = dO · V_j ; dV_j += P_j dO
                    let mut dot = S::zero();
                    for j in 0..n_keys {
                        let vr = (k0 + j) * d + off;
                        let mut s = S::zero();
                        for t in 0..dh {
                            s += go[t] * vv[vr + t];
                        }
                        dp[j] = s;
                        dot += s * pr[j];
                        if pr[j] != S::zero() {
                            for t in 0..dh {
                                gvv[vr + t] += pr[j] * go[t];
                            }
                        }
                    }
                    for j in 0..n_keys {
                        let ds = pr[j] * (dp[j] - dot) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let kr = (k0 + j) * d + off;
                        for t in 0..dh {
                            gq[qi + off + t] += ds * kv[kr + t];
                            gk[kr + t] += ds * qv[qi + off + t];
                        }
                    }
                }
            }
            q0 += lq;
            k0 += lk;
            p0 += lq * lk * heads;
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            if let Some(dst) = self.acc(grads, var) {
                dst.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
