//! Encoder–decoder transformer mapping query tokens to docid tokens.
//!
//! Training runs through [`Graph`] on packed mini-batches. Inference uses a
//! separate incremental decoder that caches self-attention keys/values per
//! hypothesis and cross-attention keys/values per query.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::graph::{attend_row, gelu, layer_norm_row, AttentionLayout, Graph, NodeId};
use super::params::{ParamRef, ParamStore, Scope};
use super::tensor::{dot, log_softmax, Tensor};
use crate::docid::DocidVocab;
use crate::error::{Error, Result};
use crate::seed;

/// Slot of the model's parameter store in a [`Graph`].
pub const MODEL_SLOT: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Size of the query word vocabulary (including reserved symbols).
    pub vocab_size: usize,
    /// Docid digit alphabet size `k`.
    pub docid_radix: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, docid_radix: usize) -> Self {
        ModelConfig {
            vocab_size,
            docid_radix,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            d_ff: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.docid_radix,
            self.d_model,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.d_ff,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn docid_vocab(&self) -> DocidVocab {
        DocidVocab::new(self.docid_radix)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamRef,
    beta: ParamRef,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamRef,
    b: ParamRef,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Affine,
    down: Affine,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    store: ParamStore,
    query_emb: ParamRef,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    docid_emb: ParamRef,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    output: Affine,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut seed::Rng,
}

impl Builder<'_> {
    fn affine(&mut self, name: &str, scope: Scope, fan_in: usize, fan_out: usize, bound: f64) -> Affine {
        let w = self.store.add_uniform(format!("{name}.w"), scope, fan_in, fan_out, bound, self.rng);
        let b = self.store.add_constant(format!("{name}.b"), scope, 1, fan_out, 0.0);
        Affine { w, b }
    }

    fn linear(&mut self, name: &str, scope: Scope, fan_in: usize, fan_out: usize) -> Affine {
        self.affine(name, scope, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    fn norm(&mut self, name: &str, scope: Scope, d: usize) -> Norm {
        Norm {
            gamma: self.store.add_constant(format!("{name}.gamma"), scope, 1, d, 1.0),
            beta: self.store.add_constant(format!("{name}.beta"), scope, 1, d, 0.0),
        }
    }

    fn attention(&mut self, name: &str, scope: Scope, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), scope, d, d),
            k: self.linear(&format!("{name}.k"), scope, d, d),
            v: self.linear(&format!("{name}.v"), scope, d, d),
            o: self.linear(&format!("{name}.o"), scope, d, d),
        }
    }

    fn ffn(&mut self, name: &str, scope: Scope, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), scope, d, d_ff),
            down: self.linear(&format!("{name}.down"), scope, d_ff, d),
        }
    }
}

/// Output-layer init bound; small enough that an untrained decoder is
/// near-uniform over docid tokens.
const OUTPUT_INIT_BOUND: f64 = 1e-4;

impl Seq2SeqModel {
    /// Fresh model with scaled-uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.d_model;
        let dv = config.docid_vocab();
        let mut b = Builder {
            store: ParamStore::new(MODEL_SLOT),
            rng: &mut rng,
        };
        let query_emb = b.store.add_uniform("enc.embed", Scope::Encoder, config.vocab_size, d, 1.0, b.rng);
        let encoder = (0..config.enc_layers)
            .map(|l| EncoderLayer {
                norm1: b.norm(&format!("enc.{l}.norm1"), Scope::Encoder, d),
                attn: b.attention(&format!("enc.{l}.attn"), Scope::Encoder, d),
                norm2: b.norm(&format!("enc.{l}.norm2"), Scope::Encoder, d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), Scope::Encoder, d, config.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", Scope::Encoder, d);
        let docid_emb = b.store.add_uniform("dec.embed", Scope::Decoder, dv.input_size(), d, 1.0, b.rng);
        let decoder = (0..config.dec_layers)
            .map(|l| DecoderLayer {
                norm1: b.norm(&format!("dec.{l}.norm1"), Scope::Decoder, d),
                self_attn: b.attention(&format!("dec.{l}.self"), Scope::Decoder, d),
                norm2: b.norm(&format!("dec.{l}.norm2"), Scope::Decoder, d),
                cross_attn: b.attention(&format!("dec.{l}.cross"), Scope::Decoder, d),
                norm3: b.norm(&format!("dec.{l}.norm3"), Scope::Decoder, d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), Scope::Decoder, d, config.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", Scope::Decoder, d);
        let output = b.affine("dec.out", Scope::Decoder, d, dv.output_size(), OUTPUT_INIT_BOUND);
        Ok(Seq2SeqModel {
            config,
            store: b.store,
            query_emb,
            encoder,
            enc_norm,
            docid_emb,
            decoder,
            dec_norm,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn docid_vocab(&self) -> DocidVocab {
        self.config.docid_vocab()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------
    // Graph (training) path
    // ---------------------------------------------------------------

    fn embed_graph(&self, g: &mut Graph<'_>, table: ParamRef, seqs: &[&[usize]]) -> (NodeId, Vec<Range<usize>>) {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        for s in seqs {
            let start = ids.len();
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            segments.push(start..ids.len());
        }
        let x = g.gather(table, &ids);
        let pe = g.input(positional_rows(&positions, self.config.d_model));
        (g.add(x, pe), segments)
    }

    fn attention_graph(
        &self,
        g: &mut Graph<'_>,
        a: &Attention,
        queries: NodeId,
        keys: NodeId,
        layout: &AttentionLayout,
    ) -> NodeId {
        let q = g.linear(queries, a.q.w, a.q.b);
        let k = g.linear(keys, a.k.w, a.k.b);
        let v = g.linear(keys, a.v.w, a.v.b);
        let heads = g.attention(q, k, v, self.config.heads, layout);
        g.linear(heads, a.o.w, a.o.b)
    }

    fn ffn_graph(&self, g: &mut Graph<'_>, f: &FeedForward, x: NodeId) -> NodeId {
        let h = g.linear(x, f.up.w, f.up.b);
        let h = g.gelu(h);
        g.linear(h, f.down.w, f.down.b)
    }

    /// Packed encoder forward; returns the output node and each sequence's row range.
    pub fn encode_graph(&self, g: &mut Graph<'_>, seqs: &[&[usize]]) -> Result<(NodeId, Vec<Range<usize>>)> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let (mut x, segments) = self.embed_graph(g, self.query_emb, seqs);
        let layout = AttentionLayout {
            query_segments: segments.clone(),
            key_segments: segments.clone(),
            causal: false,
        };
        for layer in &self.encoder {
            let h = g.layer_norm(x, layer.norm1.gamma, layer.norm1.beta);
            let a = self.attention_graph(g, &layer.attn, h, h, &layout);
            x = g.add(x, a);
            let h = g.layer_norm(x, layer.norm2.gamma, layer.norm2.beta);
            let f = self.ffn_graph(g, &layer.ffn, h);
            x = g.add(x, f);
        }
        let out = g.layer_norm(x, self.enc_norm.gamma, self.enc_norm.beta);
        g.ensure_finite(out, "enc.norm")?;
        Ok((out, segments))
    }

    /// Packed teacher-forced decoder forward; returns logits (one row per input token).
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        memory: NodeId,
        memory_segments: &[Range<usize>],
        inputs: &[&[usize]],
    ) -> Result<NodeId> {
        let (mut x, segments) = self.embed_graph(g, self.docid_emb, inputs);
        let self_layout = AttentionLayout {
            query_segments: segments.clone(),
            key_segments: segments.clone(),
            causal: true,
        };
        let cross_layout = AttentionLayout {
            query_segments: segments,
            key_segments: memory_segments.to_vec(),
            causal: false,
        };
        for layer in &self.decoder {
            let h = g.layer_norm(x, layer.norm1.gamma, layer.norm1.beta);
            let a = self.attention_graph(g, &layer.self_attn, h, h, &self_layout);
            x = g.add(x, a);
            let h = g.layer_norm(x, layer.norm2.gamma, layer.norm2.beta);
            let c = self.attention_graph(g, &layer.cross_attn, h, memory, &cross_layout);
            x = g.add(x, c);
            let h = g.layer_norm(x, layer.norm3.gamma, layer.norm3.beta);
            let f = self.ffn_graph(g, &layer.ffn, h);
            x = g.add(x, f);
        }
        let h = g.layer_norm(x, self.dec_norm.gamma, self.dec_norm.beta);
        let logits = g.linear(h, self.output.w, self.output.b);
        g.ensure_finite(logits, "dec.out")?;
        Ok(logits)
    }

    /// Mean over the batch of `−Σ_m log p(y_m | y_<m, q)` under teacher forcing.
    /// Each docid must end with EOS.
    pub fn seq_loss_graph(&self, g: &mut Graph<'_>, batch: &[(&[usize], &[usize])]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let dv = self.docid_vocab();
        let queries: Vec<&[usize]> = batch.iter().map(|(q, _)| *q).collect();
        let (memory, mem_segs) = self.encode_graph(g, &queries)?;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (_, y) in batch {
            if y.is_empty() || y.iter().any(|&t| t >= dv.output_size()) {
                return Err(Error::InvalidArgument("invalid docid token sequence".into()));
            }
            let mut inp = Vec::with_capacity(y.len());
            inp.push(dv.bos());
            inp.extend_from_slice(&y[..y.len() - 1]);
            inputs.push(inp);
            targets.extend_from_slice(y);
        }
        let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.decode_graph(g, memory, &mem_segs, &input_refs)?;
        Ok(g.cross_entropy(logits, &targets, 1.0 / batch.len() as f64))
    }

    // ---------------------------------------------------------------
    // Inference path
    // ---------------------------------------------------------------

    /// Encoder output: one `d`-vector per input token.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&[&self.store]);
        let (out, _) = self.encode_graph(&mut g, &[tokens])?;
        Ok(g.value(out).clone())
    }

    /// Encodes a query and precomputes cross-attention keys/values.
    pub fn prepare(&self, tokens: &[usize]) -> Result<EncodedQuery> {
        let memory = self.encode(tokens)?;
        Ok(self.prepare_memory(memory))
    }

    pub fn prepare_memory(&self, memory: Tensor) -> EncodedQuery {
        let cross = self
            .decoder
            .iter()
            .map(|layer| {
                let a = &layer.cross_attn;
                (self.affine_rows(&a.k, &memory), self.affine_rows(&a.v, &memory))
            })
            .collect();
        EncodedQuery { memory, cross }
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            layers: vec![LayerCache::default(); self.decoder.len()],
            len: 0,
        }
    }

    /// Feeds one decoder input token; returns the extended state and the
    /// log-distribution over the next docid token.
    pub fn step(&self, enc: &EncodedQuery, state: &DecoderState, token: usize) -> (DecoderState, Vec<f64>) {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let mut next = state.clone();
        let mut x: Vec<f64> = self.store.get(self.docid_emb).row(token).to_vec();
        for (xi, p) in x.iter_mut().zip(positional(state.len, d)) {
            *xi += p;
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = self.norm_row(&layer.norm1, &x);
            let q = self.affine_row(&layer.self_attn.q, &h);
            let k = self.affine_row(&layer.self_attn.k, &h);
            let v = self.affine_row(&layer.self_attn.v, &h);
            let cache = &mut next.layers[l];
            cache.keys.push(k);
            cache.values.push(v);
            let a = attend_cached(&q, &cache.keys, &cache.values, heads);
            add_into(&mut x, &self.affine_row(&layer.self_attn.o, &a));

            let h = self.norm_row(&layer.norm2, &x);
            let q = self.affine_row(&layer.cross_attn.q, &h);
            let (ck, cv) = &enc.cross[l];
            let a = attend_tensor(&q, ck, cv, heads);
            add_into(&mut x, &self.affine_row(&layer.cross_attn.o, &a));

            let h = self.norm_row(&layer.norm3, &x);
            let mut f = self.affine_row(&layer.ffn.up, &h);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            add_into(&mut x, &self.affine_row(&layer.ffn.down, &f));
        }
        next.len += 1;
        let h = self.norm_row(&self.dec_norm, &x);
        let logits = self.affine_row(&self.output, &h);
        (next, log_softmax(&logits))
    }

    /// Log-probabilities of the next docid token after `prefix` (BOS is implied).
    pub fn decode_step(&self, enc: &EncodedQuery, prefix: &[usize]) -> Vec<f64> {
        let bos = self.docid_vocab().bos();
        let mut state = self.initial_state();
        let (mut s, mut lp) = self.step(enc, &state, bos);
        for &t in prefix {
            state = s;
            (s, lp) = self.step(enc, &state, t);
        }
        lp
    }

    fn norm_row(&self, n: &Norm, x: &[f64]) -> Vec<f64> {
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        layer_norm_row(
            x,
            self.store.get(n.gamma).row(0),
            self.store.get(n.beta).row(0),
            &mut xhat,
            &mut out,
        );
        out
    }

    fn affine_row(&self, a: &Affine, x: &[f64]) -> Vec<f64> {
        affine_row(self.store.get(a.w), self.store.get(a.b), x)
    }

    fn affine_rows(&self, a: &Affine, x: &Tensor) -> Tensor {
        let w = self.store.get(a.w);
        let b = self.store.get(a.b);
        let mut out = Tensor::zeros(x.rows(), w.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&affine_row(w, b, x.row(r)));
        }
        out
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        self.store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .collect()
    }
}

/// Encoder memory plus per-layer cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct EncodedQuery {
    pub memory: Tensor,
    cross: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Self-attention key/value cache for one decoding hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<LayerCache>,
    len: usize,
}

impl DecoderState {
    /// Number of decoder inputs consumed so far (including BOS).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn affine_row(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = b.row(0).to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn attend_cached(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; keys.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (s, k) in scores.iter_mut().zip(keys) {
            *s = dot(&q[cols.clone()], &k[cols.clone()]) * scale;
        }
        attend_row(&mut scores);
        for (p, v) in scores.iter().zip(values) {
            for (o, vx) in out[cols.clone()].iter_mut().zip(&v[cols.clone()]) {
                *o += p * vx;
            }
        }
    }
    out
}

fn attend_tensor(q: &[f64], keys: &Tensor, values: &Tensor, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; keys.rows()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[cols.clone()], &keys.row(j)[cols.clone()]) * scale;
        }
        attend_row(&mut scores);
        for (j, p) in scores.iter().enumerate() {
            for (o, vx) in out[cols.clone()].iter_mut().zip(&values.row(j)[cols.clone()]) {
                *o += p * vx;
            }
        }
    }
    out
}

/// Sinusoidal positional encoding for one position.
pub fn positional(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            // Separate sin and cos calls on an opaque angle; a fused sincos rounds differently.
            let angle = std::hint::black_box(pos as f64 / 10_000f64.powf(2.0 * pair / d as f64));
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn positional_rows(positions: &[usize], d: usize) -> Tensor {
    let mut t = Tensor::zeros(positions.len(), d);
    for (r, &p) in positions.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&positional(p, d));
    }
    t
}

/// Arithmetic mean of the rows of `vectors`.
pub fn mean_pool(vectors: &Tensor) -> Vec<f64> {
    assert!(vectors.rows() > 0, "mean_pool needs at least one vector");
    let mut out = vec![0.0; vectors.cols()];
    for r in 0..vectors.rows() {
        add_into(&mut out, vectors.row(r));
    }
    let n = vectors.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}
