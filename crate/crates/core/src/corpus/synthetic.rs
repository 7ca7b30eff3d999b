//! Seeded synthetic corpus: topic-structured documents and query paraphrases.
//!
//! Every document belongs to one topic and owns a handful of private words,
//! the first few of which form its title (its head entity). Bodies and
//! queries are drawn from a mixture of private, topic and shared background
//! words, so relevance is learnable but not trivial. Words are built from
//! consonant–vowel syllables, which gives the phonetic confusion table
//! something to work with.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Corpus, Origin, Query};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_topics: usize,
    pub topic_words: usize,
    pub background_words: usize,
    /// Private words per document, including the title words.
    pub doc_words: usize,
    pub title_words: usize,
    pub body_len_min: usize,
    pub body_len_max: usize,
    pub query_len_min: usize,
    pub query_len_max: usize,
    /// Mixture weights (private, topic, background) for body tokens.
    pub body_mix: [f64; 3],
    /// Mixture weights (private, topic, background) for query tokens.
    pub query_mix: [f64; 3],
    /// Probability that a query mentions the document's title entity.
    pub entity_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_topics: 10,
            topic_words: 24,
            background_words: 40,
            doc_words: 6,
            title_words: 2,
            body_len_min: 60,
            body_len_max: 130,
            query_len_min: 5,
            query_len_max: 9,
            body_mix: [0.3, 0.4, 0.3],
            query_mix: [0.45, 0.35, 0.2],
            entity_rate: 0.5,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.n_topics >= 1
            && self.topic_words >= 1
            && self.background_words >= 1
            && self.title_words >= 1
            && self.doc_words >= self.title_words
            && self.body_len_min >= 1
            && self.body_len_min <= self.body_len_max
            && self.query_len_min >= 1
            && self.query_len_min <= self.query_len_max
            && self.body_mix.iter().chain(&self.query_mix).all(|w| *w >= 0.0)
            && self.body_mix.iter().sum::<f64>() > 0.0
            && self.query_mix.iter().sum::<f64>() > 0.0
            && (0.0..=1.0).contains(&self.entity_rate);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid synthetic corpus configuration".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub corpus: Corpus,
    /// Supervised queries, `n_queries_per_doc` per document, in document order.
    pub queries: Vec<Query>,
    /// Document title entities.
    pub entities: Vec<Vec<String>>,
    /// Topic of each document.
    pub topics: Vec<usize>,
}

struct WordFactory {
    seen: HashSet<String>,
}

impl WordFactory {
    fn word(&mut self, rng: &mut Rng) -> String {
        loop {
            let syllables = if rng.gen_bool(0.8) { 2 } else { 3 };
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, rng: &mut Rng) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

fn pick_component(mix: &[f64; 3], rng: &mut Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    2
}

fn draw<'a>(pools: [&'a [String]; 3], mix: &[f64; 3], rng: &mut Rng) -> &'a str {
    loop {
        let c = pick_component(mix, rng);
        if let Some(w) = pools[c].choose(rng) {
            return w;
        }
    }
}

/// Generates `n_docs` documents and `n_queries_per_doc` supervised queries per
/// document; a pure function of `(seed, n_docs, n_queries_per_doc, params)`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_docs: usize,
    n_queries_per_doc: usize,
    params: &SyntheticConfig,
) -> Result<SyntheticData> {
    if n_docs == 0 {
        return Err(Error::InvalidArgument("n_docs must be at least 1".into()));
    }
    params.validate()?;
    let mut rng = seed::rng(seed::derive(seed, "synthetic-corpus"));
    let mut factory = WordFactory { seen: HashSet::new() };

    let background = factory.words(params.background_words, &mut rng);
    let topics: Vec<Vec<String>> = (0..params.n_topics)
        .map(|_| factory.words(params.topic_words, &mut rng))
        .collect();

    let mut records = Vec::with_capacity(n_docs);
    let mut private_words = Vec::with_capacity(n_docs);
    let mut doc_topics = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let topic = i % params.n_topics;
        let private = factory.words(params.doc_words, &mut rng);
        let title = private[..params.title_words].to_vec();
        let len = rng.gen_range(params.body_len_min..=params.body_len_max);
        let pools = [private.as_slice(), topics[topic].as_slice(), background.as_slice()];
        let body: Vec<String> = (0..len)
            .map(|_| draw(pools, &params.body_mix, &mut rng).to_string())
            .collect();
        records.push((format!("doc{i:05}"), title, body));
        private_words.push(private);
        doc_topics.push(topic);
    }

    let mut queries = Vec::with_capacity(n_docs * n_queries_per_doc);
    for (i, private) in private_words.iter().enumerate() {
        let pools = [private.as_slice(), topics[doc_topics[i]].as_slice(), background.as_slice()];
        let title = &private[..params.title_words];
        for j in 0..n_queries_per_doc {
            let len = rng.gen_range(params.query_len_min..=params.query_len_max);
            let mut text: Vec<String> = (0..len)
                .map(|_| draw(pools, &params.query_mix, &mut rng).to_string())
                .collect();
            if rng.gen_bool(params.entity_rate) {
                let at = rng.gen_range(0..=text.len());
                text.splice(at..at, title.iter().cloned());
            }
            queries.push(Query {
                id: format!("q{i:05}-{j}"),
                text,
                gold_doc: i,
                origin: Origin::Supervised,
            });
        }
    }

    let entities = private_words.iter().map(|p| p[..params.title_words].to_vec()).collect();
    Ok(SyntheticData {
        corpus: Corpus::new(records)?,
        queries,
        entities,
        topics: doc_topics,
    })
}
