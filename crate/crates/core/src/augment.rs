//! Query perturbation: a phonetic confusion table drives substitutions,
//! plus random deletions and insertions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, Corpus, Origin, Query, RESERVED};
use crate::error::{Error, Result};
use crate::eval::metrics::corpus_wer;
use crate::seed::{derive_indexed, rng, Rng};

const EMPTY_RETRIES: usize = 10;

/// Coarse sound class of a word. Similar-sounding consonants and vowels
/// collapse onto the same symbol.
pub fn phonetic_key(word: &str) -> String {
    word.chars()
        .filter_map(|c| {
            let c = c.to_ascii_lowercase();
            Some(match c {
                'b' | 'p' | 'f' | 'v' => 'B',
                'd' | 't' => 'D',
                'g' | 'k' | 'c' | 'q' | 'x' | 'j' => 'G',
                's' | 'z' => 'S',
                'm' | 'n' => 'M',
                'l' | 'r' => 'L',
                'a' => 'A',
                'e' | 'i' | 'y' => 'E',
                'o' | 'u' | 'w' => 'O',
                'h' => return None,
                other => other,
            })
        })
        .collect()
}

/// Groups of vocabulary words that share a phonetic key.
#[derive(Clone, Debug, Default)]
pub struct ConfusionTable {
    groups: Vec<Vec<String>>,
    group_of: HashMap<String, usize>,
    words: Vec<String>,
}

impl ConfusionTable {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut by_key: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut all: Vec<String> = Vec::new();
        for w in words {
            if RESERVED.contains(&w) {
                continue;
            }
            all.push(w.to_string());
            by_key.entry(phonetic_key(w)).or_default().push(w.to_string());
        }
        all.sort();
        all.dedup();
        let mut groups = Vec::new();
        let mut group_of = HashMap::new();
        for (_, mut members) in by_key {
            members.sort();
            members.dedup();
            if members.len() < 2 {
                continue;
            }
            for m in &members {
                group_of.insert(m.clone(), groups.len());
            }
            groups.push(members);
        }
        ConfusionTable {
            groups,
            group_of,
            words: all,
        }
    }

    pub fn build(corpus: &Corpus) -> Self {
        Self::from_words(corpus.vocabulary().words().iter().map(String::as_str))
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Confusable alternatives for `word` (excluding itself).
    pub fn neighbours(&self, word: &str) -> Vec<&str> {
        match self.group_of.get(word) {
            Some(&g) => self.groups[g].iter().filter(|w| *w != word).map(String::as_str).collect(),
            None => Vec::new(),
        }
    }

    /// Fraction of words that belong to a group of two or more.
    pub fn coverage(&self) -> f64 {
        if self.words.is_empty() {
            return 0.0;
        }
        self.group_of.len() as f64 / self.words.len() as f64
    }

    fn random_word<'a>(&'a self, rng: &mut Rng, avoid: Option<&str>) -> Option<&'a str> {
        let candidates = self.words.len() - usize::from(avoid.is_some_and(|a| self.words.iter().any(|w| w == a)));
        if candidates == 0 {
            return None;
        }
        loop {
            let w = &self.words[rng.gen_range(0..self.words.len())];
            if Some(w.as_str()) != avoid {
                return Some(w);
            }
        }
    }

    fn substitute<'a>(&'a self, word: &str, rng: &mut Rng) -> Option<&'a str> {
        let near = self.neighbours(word);
        if near.is_empty() {
            self.random_word(rng, Some(word))
        } else {
            Some(near[rng.gen_range(0..near.len())])
        }
    }
}

/// Per-token error probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub n_augments: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_sub: 0.10,
            p_del: 0.03,
            p_ins: 0.03,
            n_augments: 3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_sub) || !ok(self.p_del) || !ok(self.p_ins) || self.p_sub + self.p_del > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "noise probabilities out of range: sub {}, del {}, ins {}",
                self.p_sub, self.p_del, self.p_ins
            )));
        }
        Ok(())
    }

    /// Error budget `b` split 6:2:2 across substitution, deletion, insertion.
    pub fn from_budget(b: f64) -> Self {
        NoiseConfig {
            p_sub: 0.6 * b,
            p_del: 0.2 * b,
            p_ins: 0.2 * b,
            n_augments: 1,
        }
    }
}

/// One noisy pass over `tokens`. Each token is substituted with `p_sub`,
/// deleted with `p_del`, and a random word is inserted into each gap
/// (including both ends) with `p_ins`.
pub fn corrupt(tokens: &[String], table: &ConfusionTable, noise: &NoiseConfig, rng: &mut Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    let insert = |out: &mut Vec<String>, rng: &mut Rng| {
        if rng.gen::<f64>() < noise.p_ins {
            if let Some(w) = table.random_word(rng, None) {
                out.push(w.to_string());
            }
        }
    };
    for tok in tokens {
        insert(&mut out, rng);
        let u: f64 = rng.gen();
        if u < noise.p_sub {
            match table.substitute(tok, rng) {
                Some(w) => out.push(w.to_string()),
                None => out.push(tok.clone()),
            }
        } else if u >= noise.p_sub + noise.p_del {
            out.push(tok.clone());
        }
    }
    insert(&mut out, rng);
    out
}

fn corrupt_non_empty(tokens: &[String], table: &ConfusionTable, noise: &NoiseConfig, rng: &mut Rng) -> Vec<String> {
    for _ in 0..EMPTY_RETRIES {
        let out = corrupt(tokens, table, noise, rng);
        if !out.is_empty() {
            return out;
        }
    }
    tokens.to_vec()
}

/// `n_augments` independent noisy copies of `query`, each with origin
/// `Augmented` and the same gold document.
pub fn augment_query(query: &Query, table: &ConfusionTable, noise: &NoiseConfig, seed: u64) -> Result<Vec<Query>> {
    noise.validate()?;
    if query.text.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok((0..noise.n_augments)
        .map(|j| {
            let mut r = rng(derive_indexed(seed, j as u64));
            Query {
                id: format!("{}~da{j}", query.id),
                text: corrupt_non_empty(&query.text, table, noise, &mut r),
                gold_doc: query.gold_doc,
                origin: Origin::Augmented,
            }
        })
        .collect())
}

/// Augments every query; copies for query `i` use `derive_indexed(seed, i)`.
pub fn augment_queries(queries: &[Query], table: &ConfusionTable, noise: &NoiseConfig, seed: u64) -> Result<Vec<Query>> {
    let mut out = Vec::with_capacity(queries.len() * noise.n_augments);
    for (i, q) in queries.iter().enumerate() {
        out.extend(augment_query(q, table, noise, derive_indexed(seed, i as u64))?);
    }
    Ok(out)
}

/// Record written next to a noisy test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisySetMeta {
    pub target_wer: f64,
    pub achieved_wer: f64,
    pub noise: NoiseConfig,
    pub iterations: usize,
    pub seed: u64,
    pub n_queries: usize,
}

#[derive(Clone, Debug)]
pub struct NoisyTestSet {
    /// Same ids and gold documents as the clean set, in the same order.
    pub queries: Vec<Query>,
    pub meta: NoisySetMeta,
}

impl NoisyTestSet {
    pub fn save(&self, corpus: &Corpus, queries_path: &Path) -> Result<()> {
        crate::corpus::save_queries(&self.queries, corpus, queries_path)?;
        let sidecar = sidecar_path(queries_path);
        write_file(&sidecar, serde_json::to_string_pretty(&self.meta)?.as_bytes())
    }
}

/// `<queries file>.meta.json`.
pub fn sidecar_path(queries_path: &Path) -> std::path::PathBuf {
    let mut name = queries_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    queries_path.with_file_name(name)
}

pub fn load_noisy_meta(queries_path: &Path) -> Result<NoisySetMeta> {
    let p = sidecar_path(queries_path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn noisy_pass(queries: &[Query], table: &ConfusionTable, noise: &NoiseConfig, seed: u64) -> Result<(Vec<Query>, f64)> {
    let noisy: Vec<Query> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut r = rng(derive_indexed(seed, i as u64));
            Query {
                id: q.id.clone(),
                text: corrupt_non_empty(&q.text, table, noise, &mut r),
                gold_doc: q.gold_doc,
                origin: Origin::Augmented,
            }
        })
        .collect();
    let pairs: Vec<(&[String], &[String])> = queries
        .iter()
        .zip(&noisy)
        .map(|(c, n)| (c.text.as_slice(), n.text.as_slice()))
        .collect();
    let achieved = corpus_wer(&pairs)?;
    Ok((noisy, achieved))
}

/// Calibration stops early once this close to the target.
const CALIBRATION_AIM: f64 = 0.005;
/// Largest acceptable gap between achieved and target WER.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;
const MAX_CALIBRATION_STEPS: usize = 20;
const MAX_BUDGET: f64 = 1.25;

/// Noisy copy of a test set whose corpus-level WER is calibrated to
/// `target_wer`. The error budget is searched with a ratio update that
/// falls back to bisection inside the current bracket.
pub fn make_noisy_testset(queries: &[Query], target_wer: f64, table: &ConfusionTable, seed: u64) -> Result<NoisyTestSet> {
    if !(0.0..=1.0).contains(&target_wer) {
        return Err(Error::InvalidArgument(format!("target WER {target_wer} outside [0, 1]")));
    }
    if queries.iter().any(|q| q.text.is_empty()) {
        return Err(Error::EmptyQuery);
    }
    let meta = |noise: NoiseConfig, achieved: f64, iterations: usize| NoisySetMeta {
        target_wer,
        achieved_wer: achieved,
        noise,
        iterations,
        seed,
        n_queries: queries.len(),
    };
    if target_wer == 0.0 {
        let noisy = queries
            .iter()
            .map(|q| Query {
                origin: Origin::Augmented,
                ..q.clone()
            })
            .collect();
        return Ok(NoisyTestSet {
            queries: noisy,
            meta: meta(NoiseConfig::from_budget(0.0), 0.0, 0),
        });
    }

    let (mut lo, mut hi) = (0.0, MAX_BUDGET);
    let mut budget = target_wer.min(MAX_BUDGET);
    let mut best: Option<(f64, NoiseConfig, Vec<Query>, f64)> = None;
    let mut iterations = 0;
    while iterations < MAX_CALIBRATION_STEPS {
        iterations += 1;
        let noise = NoiseConfig::from_budget(budget);
        let (noisy, achieved) = noisy_pass(queries, table, &noise, seed)?;
        let gap = (achieved - target_wer).abs();
        log::debug!("calibration step {iterations}: budget {budget:.4} -> WER {achieved:.4}");
        if best.as_ref().is_none_or(|b| gap < b.0) {
            best = Some((gap, noise, noisy, achieved));
        }
        if gap <= CALIBRATION_AIM {
            break;
        }
        if achieved < target_wer {
            lo = budget;
        } else {
            hi = budget;
        }
        let ratio = if achieved > 0.0 {
            budget * target_wer / achieved
        } else {
            budget * 2.0
        };
        budget = if ratio > lo && ratio < hi { ratio } else { 0.5 * (lo + hi) };
    }
    let (gap, noise, noisy, achieved) = best.expect("at least one calibration step");
    if gap > CALIBRATION_TOLERANCE {
        return Err(Error::Calibration {
            target: target_wer,
            best: achieved,
        });
    }
    Ok(NoisyTestSet {
        queries: noisy,
        meta: meta(noise, achieved, iterations),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;
    use crate::corpus::SyntheticConfig;
    use crate::eval::metrics::align;
    use crate::eval::metrics::Edit;

    fn data() -> crate::corpus::SyntheticData {
        generate_synthetic_corpus(7, 60, 3, &SyntheticConfig::default()).unwrap()
    }

    #[test]
    fn phonetic_key_merges_similar_sounds() {
        assert_eq!(phonetic_key("bata"), phonetic_key("pada"));
        assert_eq!(phonetic_key("kimo"), phonetic_key("gemu"));
        assert_ne!(phonetic_key("bata"), phonetic_key("mata"));
    }

    #[test]
    fn table_covers_most_words() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        assert!(table.coverage() >= 0.6, "coverage {}", table.coverage());
        for g in table.groups() {
            assert!(g.len() >= 2);
            let k = phonetic_key(&g[0]);
            assert!(g.iter().all(|w| phonetic_key(w) == k));
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        let noise = NoiseConfig {
            p_sub: 0.0,
            p_del: 0.0,
            p_ins: 0.0,
            n_augments: 2,
        };
        for q in d.queries.iter().take(20) {
            for a in augment_query(q, &table, &noise, 3).unwrap() {
                assert_eq!(a.text, q.text);
                assert_eq!(a.gold_doc, q.gold_doc);
                assert_eq!(a.origin, Origin::Augmented);
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_keeps_gold() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        let noise = NoiseConfig::default();
        let a = augment_queries(&d.queries, &table, &noise, 11).unwrap();
        let b = augment_queries(&d.queries, &table, &noise, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), d.queries.len() * noise.n_augments);
        for (i, q) in a.iter().enumerate() {
            assert_eq!(q.gold_doc, d.queries[i / noise.n_augments].gold_doc);
            assert!(!q.text.is_empty());
        }
        let c = augment_queries(&d.queries, &table, &noise, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_error_rates_match_configuration() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        let noise = NoiseConfig {
            p_sub: 0.2,
            p_del: 0.1,
            p_ins: 0.05,
            n_augments: 1,
        };
        let (mut subs, mut dels, mut ins, mut words, mut gaps) = (0usize, 0usize, 0usize, 0usize, 0usize);
        for rep in 0..10u64 {
            let aug = augment_queries(&d.queries, &table, &noise, rep).unwrap();
            for (q, a) in d.queries.iter().zip(&aug) {
                words += q.text.len();
                gaps += q.text.len() + 1;
                for e in align(&q.text, &a.text) {
                    match e {
                        Edit::Substitute { .. } => subs += 1,
                        Edit::Delete { .. } => dels += 1,
                        Edit::Insert { .. } => ins += 1,
                        Edit::Match { .. } => {}
                    }
                }
            }
        }
        // The alignment can merge an insertion and a deletion into one
        // substitution, so compare total edits against the expected count.
        let expected = noise.p_sub * words as f64 + noise.p_del * words as f64 + noise.p_ins * gaps as f64;
        let total = (subs + dels + ins) as f64;
        assert!((total - expected).abs() / expected < 0.1, "edits {total} vs {expected}");
        assert!(subs as f64 / words as f64 > 0.15);
    }

    #[test]
    fn calibration_hits_targets() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        for target in [0.10, 0.15, 0.23] {
            let set = make_noisy_testset(&d.queries, target, &table, 5).unwrap();
            assert!((set.meta.achieved_wer - target).abs() <= CALIBRATION_TOLERANCE);
            assert_eq!(set.queries.len(), d.queries.len());
            for (c, n) in d.queries.iter().zip(&set.queries) {
                assert_eq!(c.id, n.id);
                assert_eq!(c.gold_doc, n.gold_doc);
            }
        }
        let zero = make_noisy_testset(&d.queries, 0.0, &table, 5).unwrap();
        assert_eq!(zero.meta.achieved_wer, 0.0);
        assert!(zero.queries.iter().zip(&d.queries).all(|(a, b)| a.text == b.text));
    }

    #[test]
    fn noisy_set_sidecar_round_trip() {
        let d = data();
        let table = ConfusionTable::build(&d.corpus);
        let set = make_noisy_testset(&d.queries, 0.15, &table, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.wer15.jsonl");
        set.save(&d.corpus, &p).unwrap();
        assert_eq!(load_noisy_meta(&p).unwrap(), set.meta);
        let back = crate::corpus::load_queries(&p, &d.corpus).unwrap();
        assert_eq!(back, set.queries);
    }
}
