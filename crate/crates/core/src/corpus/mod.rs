//! Documents, queries, vocabulary, and the corpus/query file formats.
//!
//! Both files are JSON lines. Corpus records carry `id`, `title` and `body`;
//! query records carry `id`, `text`, `gold` (external id of the gold
//! document) and `origin`. Text fields are whitespace-tokenized.

mod synthetic;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticData};

use crate::error::{Error, Result};
use crate::seed;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<unk>", "<pad>", "<bos>", "<eos>"];

/// Default body budget: documents are represented by title + first 100 body tokens.
pub const DEFAULT_MAX_BODY_TOKENS: usize = 100;

/// Closed word vocabulary: reserved symbols at 0..4, then sorted unique tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<&str> = words.into_iter().filter(|w| !RESERVED.contains(w)).collect();
        uniq.sort_unstable();
        uniq.dedup();
        let tokens: Vec<String> = RESERVED
            .iter()
            .copied()
            .chain(uniq)
            .map(str::to_string)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token id, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub index: usize,
    pub external_id: String,
    pub title: Vec<String>,
    pub body: Vec<String>,
}

impl Document {
    /// Title followed by the first `max_body_tokens` body tokens.
    pub fn truncated(&self, max_body_tokens: usize) -> Vec<String> {
        truncate_document(self, max_body_tokens)
    }
}

/// Title tokens followed by the first `min(|body|, max_body_tokens)` body tokens.
pub fn truncate_document(doc: &Document, max_body_tokens: usize) -> Vec<String> {
    assert!(max_body_tokens >= 1, "max_body_tokens must be at least 1");
    let n = doc.body.len().min(max_body_tokens);
    doc.title.iter().chain(&doc.body[..n]).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Supervised,
    Pseudo,
    Augmented,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Supervised => "supervised",
            Origin::Pseudo => "pseudo",
            Origin::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: Vec<String>,
    pub gold_doc: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocabulary: Vocabulary,
    by_external: HashMap<String, usize>,
    max_body_tokens: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    title: String,
    body: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    id: String,
    text: String,
    gold: String,
    origin: Origin,
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Corpus {
    /// Builds a corpus from `(external_id, title, body)` triples; the vocabulary
    /// covers every token of the truncated documents.
    pub fn new(records: Vec<(String, Vec<String>, Vec<String>)>) -> Result<Self> {
        Self::with_max_body_tokens(records, DEFAULT_MAX_BODY_TOKENS)
    }

    pub fn with_max_body_tokens(
        records: Vec<(String, Vec<String>, Vec<String>)>,
        max_body_tokens: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_body_tokens == 0 {
            return Err(Error::InvalidArgument("max_body_tokens must be at least 1".into()));
        }
        let mut by_external = HashMap::with_capacity(records.len());
        let mut documents = Vec::with_capacity(records.len());
        for (index, (external_id, title, body)) in records.into_iter().enumerate() {
            if title.is_empty() || body.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document `{external_id}` has an empty title or body"
                )));
            }
            if by_external.insert(external_id.clone(), index).is_some() {
                return Err(Error::DuplicateExternalId(external_id));
            }
            documents.push(Document {
                index,
                external_id,
                title,
                body,
            });
        }
        let vocabulary = Vocabulary::build(documents.iter().flat_map(|d| {
            let n = d.body.len().min(max_body_tokens);
            d.title.iter().chain(&d.body[..n]).map(String::as_str)
        }));
        Ok(Corpus {
            documents,
            vocabulary,
            by_external,
            max_body_tokens,
        })
    }

    /// Same documents under a different body-token limit.
    pub fn with_body_limit(self, max_body_tokens: usize) -> Result<Self> {
        let records = self
            .documents
            .into_iter()
            .map(|d| (d.external_id, d.title, d.body))
            .collect();
        Self::with_max_body_tokens(records, max_body_tokens)
    }

    /// Rebuilds the vocabulary so that it also covers `queries`.
    pub fn with_query_vocabulary(mut self, queries: &[Query]) -> Self {
        let mbt = self.max_body_tokens;
        let vocab = Vocabulary::build(
            self.documents
                .iter()
                .flat_map(|d| {
                    let n = d.body.len().min(mbt);
                    d.title.iter().chain(&d.body[..n])
                })
                .chain(queries.iter().flat_map(|q| &q.text))
                .map(String::as_str),
        );
        self.vocabulary = vocab;
        self
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, index: usize) -> &Document {
        &self.documents[index]
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn max_body_tokens(&self) -> usize {
        self.max_body_tokens
    }

    pub fn index_of(&self, external_id: &str) -> Option<usize> {
        self.by_external.get(external_id).copied()
    }

    /// Truncated token sequence of document `index`.
    pub fn truncated(&self, index: usize) -> Vec<String> {
        truncate_document(&self.documents[index], self.max_body_tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for d in &self.documents {
            let rec = DocumentRecord {
                id: d.external_id.clone(),
                title: d.title.join(" "),
                body: d.body.join(" "),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        write_file(path, &out)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Loads a corpus file; documents are indexed in file order.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = path.display().to_string();
    let mut records = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec: DocumentRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: file.clone(),
            line,
            message: e.to_string(),
        })?;
        let title = tokenize(&rec.title);
        let body = tokenize(&rec.body);
        if title.is_empty() || body.is_empty() {
            return Err(Error::Parse {
                file: file.clone(),
                line,
                message: "title and body must be non-empty".into(),
            });
        }
        records.push((rec.id, title, body));
    }
    Corpus::new(records)
}

pub fn save_queries(queries: &[Query], corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for q in queries {
        let rec = QueryRecord {
            id: q.id.clone(),
            text: q.text.join(" "),
            gold: corpus.document(q.gold_doc).external_id.clone(),
            origin: q.origin,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<Query>> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec: QueryRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: file.clone(),
            line,
            message: e.to_string(),
        })?;
        let gold_doc = corpus.index_of(&rec.gold).ok_or_else(|| Error::Parse {
            file: file.clone(),
            line,
            message: format!("unknown gold document `{}`", rec.gold),
        })?;
        out.push(Query {
            id: rec.id,
            text: tokenize(&rec.text),
            gold_doc,
            origin: rec.origin,
        });
    }
    Ok(out)
}

/// Deterministic stratified train/test split.
///
/// The test set has `round(n · test_fraction)` queries (at least one, at most
/// `n − 1`). Queries are visited in seeded random order and moved to the test
/// set only while their document keeps at least one training query; if that
/// cannot fill the quota, remaining slots are filled in the same order.
pub fn split(queries: &[Query], test_fraction: f64, seed: u64) -> Result<(Vec<Query>, Vec<Query>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let n = queries.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 queries to split".into()));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));

    let mut remaining: HashMap<usize, usize> = HashMap::new();
    for q in queries {
        *remaining.entry(q.gold_doc).or_default() += 1;
    }
    let mut is_test = vec![false; n];
    let mut taken = 0;
    for &i in &order {
        if taken == n_test {
            break;
        }
        let left = remaining.get_mut(&queries[i].gold_doc).unwrap();
        if *left > 1 {
            *left -= 1;
            is_test[i] = true;
            taken += 1;
        }
    }
    for &i in &order {
        if taken == n_test {
            break;
        }
        if !is_test[i] {
            is_test[i] = true;
            taken += 1;
        }
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (q, t) in queries.iter().zip(is_test) {
        if t {
            test.push(q.clone());
        } else {
            train.push(q.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn doc(body_len: usize) -> Document {
        Document {
            index: 0,
            external_id: "d".into(),
            title: toks("the title"),
            body: (0..body_len).map(|i| format!("w{i}")).collect(),
        }
    }

    #[test]
    fn truncation_lengths() {
        assert_eq!(truncate_document(&doc(5), 100).len(), 2 + 5);
        let t = truncate_document(&doc(150), 100);
        assert_eq!(t.len(), 2 + 100);
        assert_eq!(t[2], "w0");
        assert_eq!(t.last().unwrap(), "w99");
        assert_eq!(truncate_document(&doc(150), 1).len(), 3);
    }

    #[test]
    fn truncation_is_idempotent() {
        let d = doc(150);
        let once = truncate_document(&d, 100);
        let again = Document {
            body: once[2..].to_vec(),
            ..d
        };
        assert_eq!(truncate_document(&again, 100), once);
    }

    #[test]
    fn load_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"d1\",\"title\":\"t\",\"body\":\"a b\"}\n").unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.len(), 1);
        for w in ["t", "a", "b"] {
            assert!(c.vocabulary().contains(w));
        }
        assert_eq!(c.vocabulary().token(UNK), "<unk>");
        assert_eq!(c.vocabulary().token(EOS), "<eos>");
        assert_eq!(c.vocabulary().id("zzz"), UNK);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_corpus(&empty), Err(Error::EmptyCorpus)));
        assert_eq!(load_corpus(&empty).unwrap_err().to_string(), "empty corpus");

        let bad = dir.path().join("b.jsonl");
        std::fs::write(&bad, "{\"id\":\"d1\",\"title\":\"t\",\"body\":\"a\"}\nnot json\n").unwrap();
        match load_corpus(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let dup = dir.path().join("d.jsonl");
        std::fs::write(
            &dup,
            "{\"id\":\"d1\",\"title\":\"t\",\"body\":\"a\"}\n{\"id\":\"d1\",\"title\":\"u\",\"body\":\"b\"}\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&dup), Err(Error::DuplicateExternalId(_))));
    }

    #[test]
    fn corpus_round_trip_preserves_indices() {
        let c = Corpus::new(vec![
            ("x".into(), toks("alpha beta"), toks("gamma delta alpha")),
            ("y".into(), toks("beta"), toks("eps zeta")),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        c.save(&p).unwrap();
        let back = load_corpus(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.vocabulary().id("zeta"), c.vocabulary().id("zeta"));
    }

    #[test]
    fn query_file_round_trip() {
        let c = Corpus::new(vec![("x".into(), toks("a"), toks("b"))]).unwrap();
        let qs = vec![Query {
            id: "q1".into(),
            text: toks("a b c"),
            gold_doc: 0,
            origin: Origin::Augmented,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        save_queries(&qs, &c, &p).unwrap();
        assert_eq!(load_queries(&p, &c).unwrap(), qs);
    }

    fn queries(per_doc: usize, docs: usize) -> Vec<Query> {
        (0..docs * per_doc)
            .map(|i| Query {
                id: format!("q{i}"),
                text: toks("x"),
                gold_doc: i / per_doc,
                origin: Origin::Supervised,
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let qs = queries(1, 10);
        let (train, test) = split(&qs, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(split(&qs, 0.2, 3).unwrap(), (train, test));
        assert!(split(&qs[..1], 0.5, 1).is_err());
        assert!(split(&qs, 1.0, 1).is_err());
    }

    #[test]
    fn split_keeps_a_training_query_per_document() {
        let qs = queries(5, 40);
        let (train, test) = split(&qs, 0.2, 11).unwrap();
        assert_eq!(train.len() + test.len(), qs.len());
        for d in 0..40 {
            assert!(train.iter().any(|q| q.gold_doc == d), "doc {d} lost all training queries");
        }
        let mut ids: Vec<&str> = train.iter().chain(&test).map(|q| q.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), qs.len());
    }
}
