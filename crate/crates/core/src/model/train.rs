//! Sequence-to-sequence training with teacher forcing.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::optim::{Adam, AdamConfig};
use super::params::Grads;
use super::transformer::Seq2SeqModel;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.adam.lr <= 0.0 || self.adam.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("training hyperparameters must be positive".into()));
        }
        Ok(())
    }
}

/// One (query tokens, docid tokens ending in EOS) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub query: Vec<usize>,
    pub docid: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn as_pairs<'a>(batch: &[&'a TrainingExample]) -> Vec<(&'a [usize], &'a [usize])> {
    batch.iter().map(|e| (e.query.as_slice(), e.docid.as_slice())).collect()
}

/// Mean over the batch of `−Σ_m log p(y_m | y_<m, q)`.
pub fn seq_loss(model: &Seq2SeqModel, batch: &[(&[usize], &[usize])]) -> Result<f64> {
    let mut g = Graph::new(&[model.store()]);
    let loss = model.seq_loss_graph(&mut g, batch)?;
    Ok(g.scalar(loss))
}

/// Loss and exact gradient of the batch loss with respect to every parameter.
pub fn seq_loss_and_grads(model: &Seq2SeqModel, batch: &[(&[usize], &[usize])]) -> Result<(f64, Grads)> {
    let mut g = Graph::new(&[model.store()]);
    let loss = model.seq_loss_graph(&mut g, batch)?;
    let mut grads = Grads::zeros_like(&[model.store()]);
    g.backward(loss, &mut grads)?;
    if let Some(name) = grads.first_non_finite(&[model.store()]) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((g.scalar(loss), grads))
}

/// Shuffled mini-batch optimization of the sequence loss, deterministic in `config.seed`.
pub fn train(model: &mut Seq2SeqModel, examples: &[TrainingExample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut rng = seed::rng(config.seed);
    let mut adam = Adam::new(config.adam.clone(), model.store());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = seq_loss_and_grads(model, &as_pairs(&batch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: report.steps,
                    loss,
                });
            }
            grads.clip_global_norm(config.adam.clip_norm);
            adam.step(model.store_mut(), grads.slot(0), |_| true);
            report.steps += 1;
            total += loss * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
