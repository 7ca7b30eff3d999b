//! Extractive pseudo-query generation: contiguous windows of a document
//! with the largest TF-IDF mass.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Origin, Query};
use crate::error::{Error, Result};
use crate::seed::{derive_indexed, rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QgenConfig {
    /// Pseudo-queries per document.
    pub per_doc: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for QgenConfig {
    fn default() -> Self {
        QgenConfig {
            per_doc: 3,
            min_len: 4,
            max_len: 8,
        }
    }
}

impl QgenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "pseudo-query lengths must satisfy 1 <= min ({}) <= max ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Document frequencies over the truncated documents of a corpus.
pub struct PseudoQueryGenerator<'a> {
    corpus: &'a Corpus,
    idf: HashMap<String, f64>,
    config: QgenConfig,
}

impl<'a> PseudoQueryGenerator<'a> {
    pub fn new(corpus: &'a Corpus, config: QgenConfig) -> Result<Self> {
        config.validate()?;
        let mut df: HashMap<String, usize> = HashMap::new();
        for i in 0..corpus.len() {
            let mut toks = corpus.truncated(i);
            toks.sort();
            toks.dedup();
            for t in toks {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        Ok(PseudoQueryGenerator { corpus, idf, config })
    }

    /// Weight of each position: tf(token in doc) * idf(token).
    pub fn position_weights(&self, tokens: &[String]) -> Vec<f64> {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        tokens
            .iter()
            .map(|t| tf[t.as_str()] as f64 * self.idf.get(t).copied().unwrap_or(1.0))
            .collect()
    }

    /// `n` pseudo-queries for document `doc`. Window lengths are drawn from
    /// `[min_len, max_len]`; each query is the highest-mass window that does
    /// not overlap earlier picks (earliest start on ties), relaxing to
    /// unused starts and then to any window when the document runs out.
    pub fn generate(&self, doc: usize, n: usize, seed: u64) -> Result<Vec<Query>> {
        if doc >= self.corpus.len() {
            return Err(Error::UnknownDocument(doc.to_string()));
        }
        let tokens = self.corpus.truncated(doc);
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let weights = self.position_weights(&tokens);
        let mut prefix = vec![0.0; tokens.len() + 1];
        for (i, w) in weights.iter().enumerate() {
            prefix[i + 1] = prefix[i] + w;
        }
        let mut r = rng(seed);
        let mut used = vec![false; tokens.len()];
        let mut starts_used = vec![false; tokens.len()];
        let external = &self.corpus.document(doc).external_id;
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let len = r.gen_range(self.config.min_len..=self.config.max_len).min(tokens.len());
            let windows = 0..=tokens.len() - len;
            let mass = |s: usize| prefix[s + len] - prefix[s];
            let best = |ok: &dyn Fn(usize) -> bool| {
                windows
                    .clone()
                    .filter(|&s| ok(s))
                    .fold(None, |acc: Option<usize>, s| match acc {
                        Some(b) if mass(b) >= mass(s) => Some(b),
                        _ => Some(s),
                    })
            };
            let start = best(&|s| !used[s..s + len].iter().any(|u| *u))
                .or_else(|| best(&|s| !starts_used[s]))
                .or_else(|| best(&|_| true))
                .expect("at least one window");
            used[start..start + len].iter_mut().for_each(|u| *u = true);
            starts_used[start] = true;
            out.push(Query {
                id: format!("{external}~qg{j}"),
                text: tokens[start..start + len].to_vec(),
                gold_doc: doc,
                origin: Origin::Pseudo,
            });
        }
        Ok(out)
    }
}

/// `n` pseudo-queries for one document.
pub fn generate_pseudo_queries(corpus: &Corpus, doc: usize, n: usize, config: QgenConfig, seed: u64) -> Result<Vec<Query>> {
    PseudoQueryGenerator::new(corpus, config)?.generate(doc, n, seed)
}

/// Supervised queries followed by `config.per_doc` pseudo-queries for every
/// document; document `i` uses `derive_indexed(seed, i)`.
pub fn build_training_set(supervised: &[Query], corpus: &Corpus, config: QgenConfig, seed: u64) -> Result<Vec<Query>> {
    let generator = PseudoQueryGenerator::new(corpus, config)?;
    let mut out = supervised.to_vec();
    for doc in 0..corpus.len() {
        out.extend(generator.generate(doc, config.per_doc, derive_indexed(seed, doc as u64))?);
    }
    Ok(out)
}
