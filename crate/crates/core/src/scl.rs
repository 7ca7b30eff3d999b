//! Supervised contrastive pretraining of the query encoder. Queries that
//! share a gold document are positives; the projection head is only used
//! during pretraining.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Origin, Query, Vocabulary};
use crate::error::{Error, Result};
use crate::model::graph::{sup_con_forward, Graph};
use crate::model::{mean_pool, Adam, AdamConfig, Grads, ProjectionConfig, ProjectionHead, Scope, Seq2SeqModel, Tensor};
use crate::seed::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SclConfig {
    pub steps: usize,
    /// Queries per batch; must be even (half as many classes, two queries each).
    pub batch_size: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
    pub temperature: f64,
    /// L2-normalize projections before taking inner products.
    pub normalize: bool,
    pub adam: AdamConfig,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig {
            steps: 2000,
            batch_size: 32,
            d_hidden: 64,
            d_proj: 32,
            temperature: 1.0,
            normalize: false,
            adam: AdamConfig::default(),
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument("contrastive batch size must be even and at least 2".into()));
        }
        if self.temperature <= 0.0 || self.d_hidden == 0 || self.d_proj == 0 {
            return Err(Error::InvalidArgument("invalid contrastive hyperparameters".into()));
        }
        Ok(())
    }
}

/// A labelled query for contrastive training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelledQuery {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub origin: Origin,
}

pub fn labelled_queries(queries: &[Query], vocab: &Vocabulary) -> Vec<LabelledQuery> {
    queries
        .iter()
        .map(|q| LabelledQuery {
            tokens: vocab.encode(&q.text),
            label: q.gold_doc,
            origin: q.origin,
        })
        .collect()
}

/// Queries grouped by label; only labels with two or more queries can be sampled.
pub struct ClassIndex<'a> {
    queries: &'a [LabelledQuery],
    classes: Vec<Vec<usize>>,
}

impl<'a> ClassIndex<'a> {
    pub fn new(queries: &'a [LabelledQuery]) -> Self {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            by_label.entry(q.label).or_default().push(i);
        }
        let classes = by_label.into_values().filter(|v| v.len() >= 2).collect();
        ClassIndex { queries, classes }
    }

    pub fn eligible_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Indices into the labelled query list, with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SclBatch {
    pub members: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `batch_size / 2` distinct classes and two queries from each,
/// preferring a pair with different origins when the class has one.
pub fn sample_batch(index: &ClassIndex<'_>, batch_size: usize, rng: &mut Rng) -> Result<SclBatch> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument("contrastive batch size must be even and at least 2".into()));
    }
    let want = batch_size / 2;
    if index.classes.len() < want {
        return Err(Error::InvalidArgument(format!(
            "need {want} classes with two or more queries, found {}",
            index.classes.len()
        )));
    }
    let picked: Vec<&Vec<usize>> = index.classes.choose_multiple(rng, want).collect();
    let mut members = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for class in picked {
        let first = class[rng.gen_range(0..class.len())];
        let origin = index.queries[first].origin;
        let others: Vec<usize> = class.iter().copied().filter(|&i| i != first).collect();
        let mixed: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&i| index.queries[i].origin != origin)
            .collect();
        let pool = if mixed.is_empty() { &others } else { &mixed };
        let second = pool[rng.gen_range(0..pool.len())];
        for i in [first, second] {
            members.push(i);
            labels.push(index.queries[i].label);
        }
    }
    Ok(SclBatch { members, labels })
}

/// Supervised contrastive loss over embeddings `z` (one row per query):
/// `−Σ_i (1/|S(i)|) Σ_{s∈S(i)} log(exp(z_i·z_s/τ) / Σ_{a≠i} exp(z_i·z_a/τ))`,
/// where `S(i)` holds the other rows sharing `i`'s label. Rows without
/// positives contribute nothing.
pub fn scl_loss(z: &[Vec<f64>], labels: &[usize], temperature: f64) -> Result<f64> {
    if z.len() != labels.len() {
        return Err(Error::InvalidArgument("one label per embedding".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if z.is_empty() {
        return Ok(0.0);
    }
    let m = Tensor::from_rows(z);
    let sims = m.matmul_t(&m);
    Ok(sup_con_forward(&sims, labels, 1.0 / temperature).0)
}

fn has_positive(labels: &[usize]) -> bool {
    labels.iter().enumerate().any(|(i, l)| labels[..i].contains(l))
}

/// Loss and gradients (slot 0: model, slot 1: head) of one contrastive batch.
pub fn scl_loss_and_grads(
    model: &Seq2SeqModel,
    head: &ProjectionHead,
    queries: &[&[usize]],
    labels: &[usize],
    config: &SclConfig,
) -> Result<(f64, Grads)> {
    if !has_positive(labels) {
        log::warn!("contrastive batch has no positive pairs; loss is zero");
    }
    let mut g = Graph::new(&[model.store(), head.store()]);
    let (enc, segments) = model.encode_graph(&mut g, queries)?;
    let pooled = g.segment_mean(enc, &segments);
    let mut z = head.graph_forward(&mut g, pooled);
    if config.normalize {
        z = g.l2_normalize(z);
    }
    let loss = g.sup_con(z, labels, config.temperature);
    let mut grads = Grads::zeros_like(&[model.store(), head.store()]);
    g.backward(loss, &mut grads)?;
    if let Some(name) = grads.first_non_finite(&[model.store(), head.store()]) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((g.scalar(loss), grads))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Batch loss at every step.
    pub losses: Vec<f64>,
    /// Loss of one fixed batch before the first and after the last step.
    pub probe: (f64, f64),
}

impl PretrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn start_end(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

/// Contrastive pretraining of the encoder (decoder parameters stay fixed).
/// The projection head is created from `seed` and dropped afterwards.
pub fn pretrain_encoder(
    model: &mut Seq2SeqModel,
    queries: &[LabelledQuery],
    config: &SclConfig,
    seed: u64,
) -> Result<PretrainReport> {
    config.validate()?;
    let index = ClassIndex::new(queries);
    let mut rng = seed::rng(seed::derive(seed, "scl-batches"));
    let mut head = ProjectionHead::new(
        ProjectionConfig {
            d_in: model.config().d_model,
            d_hidden: config.d_hidden,
            d_proj: config.d_proj,
        },
        seed::derive(seed, "scl-head"),
    );
    let mut model_adam = Adam::new(config.adam.clone(), model.store());
    let mut head_adam = Adam::new(config.adam.clone(), head.store());
    let probe = sample_batch(&index, config.batch_size, &mut seed::rng(seed::derive(seed, "scl-probe")))?;
    let probe_seqs: Vec<&[usize]> = probe.members.iter().map(|&i| queries[i].tokens.as_slice()).collect();
    let probe_loss = |model: &Seq2SeqModel, head: &ProjectionHead| {
        scl_loss_and_grads(model, head, &probe_seqs, &probe.labels, config).map(|r| r.0)
    };
    let mut report = PretrainReport {
        probe: (probe_loss(model, &head)?, f64::NAN),
        ..PretrainReport::default()
    };
    for step in 0..config.steps {
        let batch = sample_batch(&index, config.batch_size, &mut rng)?;
        let seqs: Vec<&[usize]> = batch.members.iter().map(|&i| queries[i].tokens.as_slice()).collect();
        let (loss, mut grads) = scl_loss_and_grads(model, &head, &seqs, &batch.labels, config)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: 0, step, loss });
        }
        grads.clip_global_norm(config.adam.clip_norm);
        model_adam.step(model.store_mut(), grads.slot(0), |s| s == Scope::Encoder);
        head_adam.step(head.store_mut(), grads.slot(1), |_| true);
        if step % 100 == 0 {
            log::info!("contrastive step {step}: loss {loss:.5}");
        }
        report.losses.push(loss);
    }
    report.probe.1 = probe_loss(model, &head)?;
    Ok(report)
}

/// Mean-pooled encoder output of a query.
pub fn pooled_embedding(model: &Seq2SeqModel, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(mean_pool(&model.encode(tokens)?))
}
