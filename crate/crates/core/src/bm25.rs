//! Okapi BM25 over the truncated documents.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Postings list per term: `(document index, term frequency)` in document order.
#[derive(Clone, Debug)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<usize>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Self {
        Self::from_documents((0..corpus.len()).map(|i| corpus.truncated(i)))
    }

    pub fn from_documents<I, D, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[S]>,
        S: AsRef<str>,
    {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::new();
        for (i, doc) in docs.into_iter().enumerate() {
            let doc = doc.as_ref();
            doc_lengths.push(doc.len());
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in doc {
                *tf.entry(t.as_ref()).or_default() += 1;
            }
            let mut terms: Vec<(&str, u32)> = tf.into_iter().collect();
            terms.sort_unstable();
            for (t, f) in terms {
                postings.entry(t.to_string()).or_default().push((i, f));
            }
        }
        let total: usize = doc_lengths.iter().sum();
        let avg_len = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        InvertedIndex {
            postings,
            doc_lengths,
            avg_len,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln((N − df + 0.5) / (df + 0.5) + 1)`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Top `top_k` documents by BM25, summing over every query token
/// occurrence. Ties go to the lower document index; documents sharing no
/// term with the query are not returned.
pub fn bm25_search<S: AsRef<str>>(
    index: &InvertedIndex,
    query: &[S],
    top_k: usize,
    params: Bm25Params,
) -> Result<Vec<(usize, f64)>> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let mut scores = vec![0.0; index.n_docs()];
    let mut touched = vec![false; index.n_docs()];
    for term in query {
        let term = term.as_ref();
        let Some(list) = index.postings.get(term) else { continue };
        let idf = index.idf(term);
        for &(doc, tf) in list {
            let tf = tf as f64;
            let norm = 1.0 - params.b + params.b * index.doc_lengths[doc] as f64 / index.avg_len;
            scores[doc] += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
            touched[doc] = true;
        }
    }
    let mut hits: Vec<(usize, f64)> = (0..index.n_docs()).filter(|&d| touched[d]).map(|d| (d, scores[d])).collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(top_k);
    Ok(hits)
}
