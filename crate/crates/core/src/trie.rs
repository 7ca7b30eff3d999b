//! Prefix tree over docids and constrained beam search.
//!
//! Expansion is restricted to children of the current trie node, so every
//! emitted identifier is a real docid. Scores are the product of the model's
//! unconstrained per-step probabilities, `score(d|q) = Π_m p(y_m | y_<m, q)`,
//! the constraint only decides which continuations are explored.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::docid::{Docid, DocidMap, DocidVocab};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedQuery, Seq2SeqModel};

/// A next-token model over docid tokens.
pub trait DocidScorer {
    type Encoded;
    type State: Clone;

    fn vocab(&self) -> DocidVocab;

    fn encode_query(&self, query: &[usize]) -> Result<Self::Encoded>;

    fn initial_state(&self, enc: &Self::Encoded) -> Self::State;

    /// Consumes `token`; returns the new state and log-probabilities of the next token.
    fn step(&self, enc: &Self::Encoded, state: &Self::State, token: usize) -> (Self::State, Vec<f64>);
}

impl DocidScorer for Seq2SeqModel {
    type Encoded = EncodedQuery;
    type State = DecoderState;

    fn vocab(&self) -> DocidVocab {
        self.docid_vocab()
    }

    fn encode_query(&self, query: &[usize]) -> Result<EncodedQuery> {
        self.prepare(query)
    }

    fn initial_state(&self, _enc: &EncodedQuery) -> DecoderState {
        Seq2SeqModel::initial_state(self)
    }

    fn step(&self, enc: &EncodedQuery, state: &DecoderState, token: usize) -> (DecoderState, Vec<f64>) {
        Seq2SeqModel::step(self, enc, state, token)
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    terminal: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    vocab: DocidVocab,
    len: usize,
}

impl PrefixTrie {
    pub fn build(map: &DocidMap) -> Result<Self> {
        Self::from_docids(map.vocab(), map.iter())
    }

    pub fn from_docids<'a>(vocab: DocidVocab, docids: impl IntoIterator<Item = (usize, &'a Docid)>) -> Result<Self> {
        let mut trie = PrefixTrie {
            nodes: vec![TrieNode::default()],
            vocab,
            len: 0,
        };
        for (doc, docid) in docids {
            let mut node = 0;
            for &digit in docid.digits() {
                if digit >= vocab.radix() {
                    return Err(Error::InvalidArgument(format!("docid `{docid}` has digit outside radix")));
                }
                if trie.nodes[node].terminal.is_some() {
                    return Err(Error::InvalidArgument(format!("docid `{docid}` extends another docid")));
                }
                let next = match trie.nodes[node].children.get(&digit) {
                    Some(&n) => n,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(digit, n);
                        n
                    }
                };
                node = next;
            }
            if trie.nodes[node].terminal.is_some() {
                return Err(Error::DuplicateDocid(docid.to_string()));
            }
            if !trie.nodes[node].children.is_empty() {
                return Err(Error::InvalidArgument(format!("docid `{docid}` is a prefix of another docid")));
            }
            trie.nodes[node].terminal = Some(doc);
            trie.len += 1;
        }
        if trie.len == 0 {
            return Err(Error::InvalidArgument("empty docid map".into()));
        }
        Ok(trie)
    }

    pub fn vocab(&self) -> DocidVocab {
        self.vocab
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of docids stored.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn walk(&self, prefix: &[usize]) -> Option<usize> {
        let mut node = 0;
        for t in prefix {
            node = *self.nodes[node].children.get(t)?;
        }
        Some(node)
    }

    fn allowed_at(&self, node: usize) -> Vec<usize> {
        let n = &self.nodes[node];
        if n.terminal.is_some() {
            vec![self.vocab.eos()]
        } else {
            n.children.keys().copied().collect()
        }
    }

    /// Tokens that may follow `prefix` (EOS only at terminals).
    pub fn allowed_tokens(&self, prefix: &[usize]) -> Result<Vec<usize>> {
        let node = self
            .walk(prefix)
            .ok_or_else(|| Error::InvalidPrefix(Docid(prefix.to_vec()).to_string()))?;
        Ok(self.allowed_at(node))
    }

    /// Document whose docid is exactly `digits`.
    pub fn terminal(&self, digits: &[usize]) -> Option<usize> {
        self.walk(digits).and_then(|n| self.nodes[n].terminal)
    }

    /// Every (document, docid) pair by exhaustive traversal, in lexicographic order.
    pub fn enumerate(&self) -> Vec<(usize, Docid)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            let n = &self.nodes[node];
            if let Some(doc) = n.terminal {
                out.push((doc, Docid(path.clone())));
            }
            for (&t, &child) in n.children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((child, p));
            }
        }
        out
    }
}

/// One ranked result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub doc: usize,
    pub docid: Docid,
    /// Σ log p over docid tokens including EOS.
    pub log_score: f64,
}

impl Hit {
    /// `exp(log_score)`, the product of per-step probabilities.
    pub fn score(&self) -> f64 {
        self.log_score.exp()
    }
}

/// Descending score, then ascending docid.
fn rank_order(a_score: f64, a_id: &[usize], b_score: f64, b_id: &[usize]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a_id.cmp(b_id))
}

struct Hypothesis<S> {
    node: usize,
    prefix: Vec<usize>,
    log_score: f64,
    state: S,
    next: Vec<f64>,
}

/// Beam search restricted to trie paths. Returns at most `top_k` hits
/// ordered by score (ties by docid).
pub fn constrained_beam_search<M: DocidScorer>(
    model: &M,
    query: &[usize],
    trie: &PrefixTrie,
    beam_width: usize,
    top_k: usize,
) -> Result<Vec<Hit>> {
    if top_k < 1 || beam_width < top_k {
        return Err(Error::InvalidArgument(format!(
            "need beam_width >= top_k >= 1 (got beam {beam_width}, top_k {top_k})"
        )));
    }
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let vocab = trie.vocab();
    let eos = vocab.eos();
    let enc = model.encode_query(query)?;
    let init = model.initial_state(&enc);
    let (state, next) = model.step(&enc, &init, vocab.bos());
    let mut active = vec![Hypothesis {
        node: 0,
        prefix: Vec::new(),
        log_score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hit> = Vec::new();

    while !active.is_empty() {
        let mut candidates: Vec<(usize, usize, f64, Vec<usize>)> = Vec::new();
        for (h, hyp) in active.iter().enumerate() {
            for t in trie.allowed_at(hyp.node) {
                let lp = hyp.next[t];
                if !lp.is_finite() {
                    return Err(Error::NonFinite("decoder log-probabilities".into()));
                }
                let mut key = hyp.prefix.clone();
                if t != eos {
                    key.push(t);
                }
                candidates.push((h, t, hyp.log_score + lp, key));
            }
        }
        candidates.sort_by(|a, b| rank_order(a.2, &a.3, b.2, &b.3));

        let mut next_active = Vec::new();
        for (h, t, score, key) in candidates {
            let parent = &active[h];
            if t == eos {
                let doc = trie.nodes[parent.node].terminal.expect("EOS only at terminals");
                finished.push(Hit {
                    doc,
                    docid: Docid(key),
                    log_score: score,
                });
            } else if next_active.len() < beam_width {
                let node = trie.nodes[parent.node].children[&t];
                let (state, next) = model.step(&enc, &parent.state, t);
                next_active.push(Hypothesis {
                    node,
                    prefix: key,
                    log_score: score,
                    state,
                    next,
                });
            }
        }
        finished.sort_by(|a, b| rank_order(a.log_score, &a.docid.0, b.log_score, &b.docid.0));
        finished.truncate(top_k);
        active = next_active;

        // log-probabilities are <= 0, so no active hypothesis can overtake a
        // full top-k list it already trails
        if finished.len() == top_k {
            let kth = finished[top_k - 1].log_score;
            if active.iter().all(|h| h.log_score < kth) {
                break;
            }
        }
    }
    Ok(finished)
}

/// `Π_m p(y_m | y_<m, q)` over the docid's tokens including EOS, by teacher forcing.
pub fn score_docid<M: DocidScorer>(model: &M, query: &[usize], docid: &Docid) -> Result<f64> {
    log_score_docid(model, query, docid).map(f64::exp)
}

pub fn log_score_docid<M: DocidScorer>(model: &M, query: &[usize], docid: &Docid) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let vocab = model.vocab();
    let enc = model.encode_query(query)?;
    let mut state = model.initial_state(&enc);
    let mut input = vocab.bos();
    let mut total = 0.0;
    for t in docid.tokens(vocab) {
        let (s, lp) = model.step(&enc, &state, input);
        total += lp[t];
        state = s;
        input = t;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution looked up from the prefix consumed so far.
    struct TableScorer {
        vocab: DocidVocab,
        table: Vec<(Vec<usize>, Vec<f64>)>,
        default: Vec<f64>,
    }

    impl DocidScorer for TableScorer {
        type Encoded = ();
        type State = Vec<usize>;

        fn vocab(&self) -> DocidVocab {
            self.vocab
        }

        fn encode_query(&self, _: &[usize]) -> Result<()> {
            Ok(())
        }

        fn initial_state(&self, _: &()) -> Vec<usize> {
            Vec::new()
        }

        fn step(&self, _: &(), state: &Vec<usize>, token: usize) -> (Vec<usize>, Vec<f64>) {
            let mut s = state.clone();
            if token != self.vocab.bos() {
                s.push(token);
            }
            let probs = self
                .table
                .iter()
                .find(|(p, _)| *p == s)
                .map(|(_, d)| d.clone())
                .unwrap_or_else(|| self.default.clone());
            (s, probs.iter().map(|p| p.ln()).collect())
        }
    }

    fn map(radix: usize, ids: &[&str]) -> DocidMap {
        DocidMap::new(radix, ids.iter().map(|s| Docid::parse(s).unwrap()).collect()).unwrap()
    }

    #[test]
    fn build_and_allowed_tokens() {
        let trie = PrefixTrie::build(&map(4, &["1 2", "1 3", "2 0"])).unwrap();
        assert_eq!(trie.allowed_tokens(&[]).unwrap(), vec![1, 2]);
        assert_eq!(trie.allowed_tokens(&[1]).unwrap(), vec![2, 3]);
        assert_eq!(trie.allowed_tokens(&[1, 3]).unwrap(), vec![4]); // EOS
        assert!(matches!(trie.allowed_tokens(&[3]), Err(Error::InvalidPrefix(_))));
        assert!(trie.node_count() <= 6 + 1);
        assert_eq!(trie.terminal(&[2, 0]), Some(2));
    }

    #[test]
    fn single_docid_is_a_chain() {
        let trie = PrefixTrie::build(&map(4, &["3 1 0"])).unwrap();
        assert_eq!(trie.node_count(), 4);
        assert_eq!(trie.enumerate(), vec![(0, Docid(vec![3, 1, 0]))]);
    }

    #[test]
    fn prefix_docids_rejected() {
        let v = DocidVocab::new(4);
        let a = Docid(vec![1]);
        let b = Docid(vec![1, 2]);
        assert!(PrefixTrie::from_docids(v, [(0, &a), (1, &b)]).is_err());
        assert!(PrefixTrie::from_docids(v, [(0, &b), (1, &a)]).is_err());
        assert!(matches!(
            PrefixTrie::from_docids(v, [(0, &a), (1, &a)]),
            Err(Error::DuplicateDocid(_))
        ));
    }

    #[test]
    fn two_docids_ranked_by_step_probability() {
        // vocab radix 2: tokens 0, 1, EOS=2
        let scorer = TableScorer {
            vocab: DocidVocab::new(2),
            table: vec![(vec![], vec![0.7, 0.3, 0.0])],
            default: vec![0.0, 0.0, 1.0],
        };
        let trie = PrefixTrie::build(&map(2, &["0", "1"])).unwrap();
        let hits = constrained_beam_search(&scorer, &[5], &trie, 2, 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].doc, 0);
        assert!((hits[0].score() - 0.7).abs() < 1e-12);
        assert_eq!(hits[1].doc, 1);
        assert!((hits[1].score() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_docid_returned_regardless_of_model() {
        let scorer = TableScorer {
            vocab: DocidVocab::new(3),
            table: vec![],
            default: vec![0.1, 0.2, 0.3, 0.4],
        };
        let trie = PrefixTrie::build(&map(3, &["2 0"])).unwrap();
        let hits = constrained_beam_search(&scorer, &[1], &trie, 1, 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert!((hits[0].score() - 0.3 * 0.1 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn score_is_product_of_steps() {
        let scorer = TableScorer {
            vocab: DocidVocab::new(2),
            table: vec![(vec![], vec![0.5, 0.5, 0.0]), (vec![1], vec![0.75, 0.0, 0.25])],
            default: vec![0.0, 0.0, 1.0],
        };
        let s = score_docid(&scorer, &[1], &Docid(vec![1])).unwrap();
        assert!((s - 0.125).abs() < 1e-12);
        // uniform over V = 3 outputs, M = 3 tokens (2 digits + EOS)
        let uniform = TableScorer {
            vocab: DocidVocab::new(2),
            table: vec![],
            default: vec![1.0 / 3.0; 3],
        };
        let s = score_docid(&uniform, &[1], &Docid(vec![0, 1])).unwrap();
        assert!((s - 3f64.powi(-3)).abs() < 1e-12);
    }

    #[test]
    fn ties_break_lexicographically() {
        let scorer = TableScorer {
            vocab: DocidVocab::new(3),
            table: vec![],
            default: vec![0.25, 0.25, 0.25, 0.25],
        };
        let trie = PrefixTrie::build(&map(3, &["2", "0", "1"])).unwrap();
        let hits = constrained_beam_search(&scorer, &[1], &trie, 3, 3).unwrap();
        let ids: Vec<usize> = hits.iter().map(|h| h.docid.0[0]).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn argument_errors() {
        let scorer = TableScorer {
            vocab: DocidVocab::new(2),
            table: vec![],
            default: vec![0.5, 0.25, 0.25],
        };
        let trie = PrefixTrie::build(&map(2, &["0", "1"])).unwrap();
        assert!(matches!(
            constrained_beam_search(&scorer, &[], &trie, 2, 1),
            Err(Error::EmptyQuery)
        ));
        assert!(constrained_beam_search(&scorer, &[1], &trie, 1, 2).is_err());
        assert!(constrained_beam_search(&scorer, &[1], &trie, 1, 0).is_err());
    }
}
