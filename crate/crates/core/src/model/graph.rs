//! A small reverse-mode autodiff tape over 2-D tensors.
//!
//! Sequences of a mini-batch are packed row-wise into one tensor; ops that
//! mix rows (attention, pooling) take explicit segment ranges so that
//! sequences never see each other.

use std::ops::Range;

use super::params::{Grads, ParamRef, ParamStore};
use super::tensor::{dot, gemm, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Query/key segment pairing for packed attention.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub query_segments: Vec<Range<usize>>,
    pub key_segments: Vec<Range<usize>>,
    pub causal: bool,
}

struct AttentionCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    layout: AttentionLayout,
    /// One probability matrix per (segment, head), segment-major.
    probs: Vec<Tensor>,
}

enum Op {
    Input,
    Gather { table: ParamRef, ids: Vec<usize> },
    Linear { x: NodeId, w: ParamRef, b: ParamRef },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm { x: NodeId, gamma: ParamRef, beta: ParamRef, xhat: Tensor, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    SegmentMean { x: NodeId, segments: Vec<Range<usize>> },
    L2Normalize { x: NodeId, norms: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor, scale: f64 },
    SupCon { z: NodeId, coeffs: Tensor, inv_temperature: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    stores: Vec<&'a ParamStore>,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(stores: &[&'a ParamStore]) -> Self {
        for (i, s) in stores.iter().enumerate() {
            assert_eq!(s.slot(), i, "stores must be passed in slot order");
        }
        Graph {
            stores: stores.to_vec(),
            nodes: Vec::new(),
        }
    }

    #[inline]
    fn param(&self, r: ParamRef) -> &'a Tensor {
        self.stores[r.slot].get(r)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Rows `ids` of an embedding table.
    pub fn gather(&mut self, table: ParamRef, ids: &[usize]) -> NodeId {
        let t = self.param(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// `x · W + b` with `W: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: NodeId, w: ParamRef, b: ParamRef) -> NodeId {
        let wt = self.param(w);
        let bt = self.param(b);
        let xv = &self.nodes[x].value;
        let mut out = Tensor::zeros(xv.rows(), wt.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bt.row(0));
        }
        gemm(xv, false, wt, false, &mut out, 1.0);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamRef, beta: ParamRef) -> NodeId {
        let g = self.param(gamma);
        let b = self.param(beta);
        let xv = &self.nodes[x].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let is = layer_norm_row(xv.row(r), g.row(0), b.row(0), xhat.row_mut(r), out.row_mut(r));
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (heads are contiguous column blocks).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: &AttentionLayout,
    ) -> NodeId {
        let qv = &self.nodes[q].value;
        let kv = &self.nodes[k].value;
        let vv = &self.nodes[v].value;
        let d = qv.cols();
        assert_eq!(d % heads, 0, "model width must divide into heads");
        assert_eq!(layout.query_segments.len(), layout.key_segments.len());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(layout.query_segments.len() * heads);
        for (qs, ks) in layout.query_segments.iter().zip(&layout.key_segments) {
            if layout.causal {
                assert_eq!(qs.len(), ks.len(), "causal attention needs square segments");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Tensor::zeros(qs.len(), ks.len());
                for (i, qi) in qs.clone().enumerate() {
                    let qrow = &qv.row(qi)[cols.clone()];
                    let limit = if layout.causal { i + 1 } else { ks.len() };
                    let prow = p.row_mut(i);
                    for (j, kj) in ks.clone().enumerate().take(limit) {
                        prow[j] = dot(qrow, &kv.row(kj)[cols.clone()]) * scale;
                    }
                    attend_row(&mut prow[..limit]);
                    let orow = &mut out.row_mut(qi)[cols.clone()];
                    for (j, kj) in ks.clone().enumerate().take(limit) {
                        let pj = prow[j];
                        for (o, vx) in orow.iter_mut().zip(&vv.row(kj)[cols.clone()]) {
                            *o += pj * vx;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            layout: layout.clone(),
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// Componentwise mean of each segment's rows; one output row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[Range<usize>]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = Tensor::zeros(segments.len(), xv.cols());
        for (s, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "empty segment");
            let inv = 1.0 / seg.len() as f64;
            let orow = out.row_mut(s);
            for r in seg.clone() {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        self.push(out, Op::SegmentMean { x, segments: segments.to_vec() })
    }

    /// Rows scaled to unit L2 norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt().max(1e-12);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// `scale · Σ_r −log softmax(logits_r)[targets_r]` as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], scale: f64) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows(), targets.len());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lp = super::tensor::log_softmax(lv.row(r));
            total -= lp[t];
            for (p, l) in probs.row_mut(r).iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![scale * total]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale },
        )
    }

    /// Supervised contrastive loss over the rows of `z` (see `scl::scl_loss`
    /// for the definition). Returns a 1×1 node.
    pub fn sup_con(&mut self, z: NodeId, labels: &[usize], temperature: f64) -> NodeId {
        let zv = &self.nodes[z].value;
        let inv_t = 1.0 / temperature;
        let sims = zv.matmul_t(zv);
        let (loss, coeffs) = sup_con_forward(&sims, labels, inv_t);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SupCon { z, coeffs, inv_temperature: inv_t },
        )
    }

    /// Accumulates d`loss`/dθ into `grads`. `loss` must be a 1×1 node.
    pub fn backward(&self, loss: NodeId, grads: &mut Grads) -> Result<()> {
        assert_eq!(self.nodes[loss].value.shape(), [1, 1], "loss must be scalar");
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Gather { table, ids } => {
                    let gt = grads.get_mut(*table);
                    for (r, &row) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(row).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    gemm(xv, true, &g, false, grads.get_mut(*w), 1.0);
                    let gb = grads.get_mut(*b);
                    for r in 0..g.rows() {
                        for (a, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    let wt = self.param(*w);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(&g, false, wt, true, &mut dx, 0.0);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Scale(x, s) => {
                    let mut dx = g;
                    dx.scale_assign(*s);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(v);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.param(*gamma);
                    let cols = g.cols();
                    let mut dx = Tensor::zeros(g.rows(), cols);
                    {
                        let gg = grads.get_mut(*gamma);
                        for r in 0..g.rows() {
                            for ((a, dy), xh) in gg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *a += dy * xh;
                            }
                        }
                    }
                    {
                        let gb = grads.get_mut(*beta);
                        for r in 0..g.rows() {
                            for (a, dy) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *a += dy;
                            }
                        }
                    }
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for ((d, dy), ga) in dxhat.iter_mut().zip(g.row(r)).zip(gam.row(0)) {
                            *d = dy * ga;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xhat.row(r)) / n;
                        let is = inv_std[r];
                        for ((o, d), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = is * (d - mean_d - xh * mean_dx);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Attention(c) => {
                    let (dq, dk, dv) = self.attention_backward(c, &g);
                    accumulate(&mut adj, c.q, dq);
                    accumulate(&mut adj, c.k, dk);
                    accumulate(&mut adj, c.v, dv);
                }
                Op::SegmentMean { x, segments } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for r in seg.clone() {
                            for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *d += v * inv;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let proj = dot(g.row(r), y.row(r));
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = (gv - proj * yv) / norms[r];
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::CrossEntropy { logits, targets, probs, scale } => {
                    let up = g.get(0, 0) * scale;
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= up);
                    }
                    accumulate(&mut adj, *logits, dl);
                }
                Op::SupCon { z, coeffs, inv_temperature } => {
                    // dL/dz = (C + Cᵀ) z / τ
                    let up = g.get(0, 0) * inv_temperature;
                    let mut sym = coeffs.clone();
                    sym.add_assign(&coeffs.transpose());
                    sym.scale_assign(up);
                    let dz = sym.matmul(&self.nodes[*z].value);
                    accumulate(&mut adj, *z, dz);
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let qv = &self.nodes[c.q].value;
        let kv = &self.nodes[c.k].value;
        let vv = &self.nodes[c.v].value;
        let d = qv.cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut pi = 0;
        for (qs, ks) in c.layout.query_segments.iter().zip(&c.layout.key_segments) {
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &c.probs[pi];
                pi += 1;
                let mut dp = vec![0.0; ks.len()];
                for (i, qi) in qs.clone().enumerate() {
                    let limit = if c.layout.causal { i + 1 } else { ks.len() };
                    let go = &g.row(qi)[cols.clone()];
                    let prow = p.row(i);
                    // dV += pᵀ dO ; dP = dO Vᵀ
                    for (j, kj) in ks.clone().enumerate().take(limit) {
                        for (a, b) in dv.row_mut(kj)[cols.clone()].iter_mut().zip(go) {
                            *a += prow[j] * b;
                        }
                        dp[j] = dot(go, &vv.row(kj)[cols.clone()]);
                    }
                    // softmax backward
                    let inner: f64 = (0..limit).map(|j| dp[j] * prow[j]).sum();
                    for j in 0..limit {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = ks.start + j;
                        for (a, b) in dq.row_mut(qi)[cols.clone()].iter_mut().zip(&kv.row(kj)[cols.clone()]) {
                            *a += ds * b;
                        }
                        for (a, b) in dk.row_mut(kj)[cols.clone()].iter_mut().zip(&qv.row(qi)[cols.clone()]) {
                            *a += ds * b;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.shape(), [1, 1]);
        v.get(0, 0)
    }

    pub fn ensure_finite(&self, id: NodeId, layer: &str) -> Result<()> {
        if self.nodes[id].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(layer.to_string()))
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Normalizes one row; writes `x̂` and `γ·x̂ + β`, returns 1/σ.
pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = gamma[i] * xhat[i] + beta[i];
    }
    inv_std
}

/// Softmax over attention scores in place.
#[inline]
pub(crate) fn attend_row(scores: &mut [f64]) {
    super::tensor::softmax_in_place(scores);
}

/// Loss value and per-pair coefficients `C[i][j] = dL/ds_ij` for the
/// supervised contrastive objective over similarity matrix `sims`.
pub(crate) fn sup_con_forward(sims: &Tensor, labels: &[usize], inv_t: f64) -> (f64, Tensor) {
    let n = labels.len();
    assert_eq!(sims.shape(), [n, n]);
    let mut coeffs = Tensor::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| sims.get(i, a) * inv_t)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (sims.get(i, a) * inv_t - max).exp())
            .sum();
        let lse = max + sum.ln();
        let w = 1.0 / positives.len() as f64;
        for &s in &positives {
            loss -= w * (sims.get(i, s) * inv_t - lse);
        }
        let row = coeffs.row_mut(i);
        for a in (0..n).filter(|&a| a != i) {
            row[a] = (sims.get(i, a) * inv_t - lse).exp();
        }
        for &s in &positives {
            row[s] -= w;
        }
    }
    (loss, coeffs)
}
