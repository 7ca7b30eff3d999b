//! Hits@k, word error rate, and entity error rate.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use crate::corpus::write_file;
use crate::error::{Error, Result};

/// Percentage of queries whose gold document is among the first `k` results.
pub fn hits_at_k(ranked: &[Vec<usize>], gold: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ranked.len() != gold.len() {
        return Err(Error::InvalidArgument("need one ranked list per query".into()));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let hits = ranked
        .iter()
        .zip(gold)
        .filter(|(list, g)| list.iter().take(k).any(|d| d == *g))
        .count();
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

/// Two-decimal percent, e.g. `52.73`.
pub fn format_percent(p: f64) -> String {
    format!("{p:.2}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    Match { reference: usize, hypothesis: usize },
    Substitute { reference: usize, hypothesis: usize },
    Delete { reference: usize },
    /// Inserted hypothesis token, placed before reference position `before`.
    Insert { hypothesis: usize, before: usize },
}

impl Edit {
    pub fn is_error(&self) -> bool {
        !matches!(self, Edit::Match { .. })
    }
}

/// Minimum edit-distance alignment with unit costs. On ties the backtrace
/// prefers match/substitution, then deletion, then insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Vec<Edit> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    let mut edits = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if dp[i][j] == dp[i - 1][j - 1] + usize::from(!same) {
                edits.push(if same {
                    Edit::Match {
                        reference: i - 1,
                        hypothesis: j - 1,
                    }
                } else {
                    Edit::Substitute {
                        reference: i - 1,
                        hypothesis: j - 1,
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            edits.push(Edit::Delete { reference: i - 1 });
            i -= 1;
        } else {
            edits.push(Edit::Insert {
                hypothesis: j - 1,
                before: i,
            });
            j -= 1;
        }
    }
    edits.reverse();
    edits
}

/// Number of substitutions + deletions + insertions in a minimal alignment.
pub fn edit_count<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> usize {
    align(reference, hypothesis).iter().filter(|e| e.is_error()).count()
}

/// `(S + D + I) / |reference|`.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(edit_count(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference tokens.
pub fn corpus_wer<S: AsRef<str>>(pairs: &[(&[S], &[S])]) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::InvalidArgument("empty reference".into()));
        }
        edits += edit_count(r, h);
        words += r.len();
    }
    if words == 0 {
        return Ok(0.0);
    }
    Ok(edits as f64 / words as f64)
}

/// Entities as token sequences (multi-word allowed).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    entities: Vec<Vec<String>>,
    longest: usize,
}

impl EntityLexicon {
    pub fn new(entities: impl IntoIterator<Item = Vec<String>>) -> Self {
        let mut seen = HashSet::new();
        let entities: Vec<Vec<String>> = entities
            .into_iter()
            .filter(|e| !e.is_empty() && seen.insert(e.clone()))
            .collect();
        let longest = entities.iter().map(Vec::len).max().unwrap_or(0);
        EntityLexicon { entities, longest }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn entities(&self) -> &[Vec<String>] {
        &self.entities
    }

    /// Non-overlapping entity spans, greedy longest match from the left.
    pub fn find<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Range<usize>> {
        let set: HashSet<Vec<&str>> = self
            .entities
            .iter()
            .map(|e| e.iter().map(String::as_str).collect())
            .collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let found = (1..=max).rev().find(|&len| {
                let cand: Vec<&str> = tokens[i..i + len].iter().map(AsRef::as_ref).collect();
                set.contains(&cand)
            });
            match found {
                Some(len) => {
                    spans.push(i..i + len);
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    pub fn to_text(&self) -> String {
        self.entities.iter().map(|e| e.join(" ") + "\n").collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(EntityLexicon::new(text.lines().map(|l| {
            l.split_whitespace().map(str::to_string).collect::<Vec<_>>()
        })))
    }
}

/// Whether the noisy transcript alters any entity span of the clean one:
/// a span is altered when one of its tokens is substituted or deleted, or a
/// token is inserted strictly inside it.
pub fn entity_corrupted<S: AsRef<str>>(clean: &[S], noisy: &[S], lexicon: &EntityLexicon) -> bool {
    let spans = lexicon.find(clean);
    if spans.is_empty() {
        return false;
    }
    let edits = align(clean, noisy);
    spans.iter().any(|span| {
        edits.iter().any(|e| match *e {
            Edit::Substitute { reference, .. } | Edit::Delete { reference } => span.contains(&reference),
            Edit::Insert { before, .. } => before > span.start && before < span.end,
            Edit::Match { .. } => false,
        })
    })
}

pub fn has_entity<S: AsRef<str>>(clean: &[S], lexicon: &EntityLexicon) -> bool {
    !lexicon.find(clean).is_empty()
}

/// Utterance-level entity error rate: among utterances whose clean text
/// mentions an entity, the fraction whose noisy version alters one.
pub fn eer<S: AsRef<str>>(pairs: &[(&[S], &[S])], lexicon: &EntityLexicon) -> f64 {
    if lexicon.is_empty() {
        log::warn!("entity lexicon is empty; EER reported as 0");
        return 0.0;
    }
    let mut bearing = 0usize;
    let mut corrupted = 0usize;
    for (clean, noisy) in pairs {
        if has_entity(clean, lexicon) {
            bearing += 1;
            if entity_corrupted(clean, noisy, lexicon) {
                corrupted += 1;
            }
        }
    }
    if bearing == 0 {
        0.0
    } else {
        corrupted as f64 / bearing as f64
    }
}

/// Partitions utterance indices into (entity-noise, non-entity) subsets.
pub fn split_entity_noise<S: AsRef<str>>(pairs: &[(&[S], &[S])], lexicon: &EntityLexicon) -> (Vec<usize>, Vec<usize>) {
    let mut entity = Vec::new();
    let mut other = Vec::new();
    for (i, (clean, noisy)) in pairs.iter().enumerate() {
        if entity_corrupted(clean, noisy, lexicon) {
            entity.push(i);
        } else {
            other.push(i);
        }
    }
    (entity, other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// Plain Levenshtein distance, independent of the backtrace code.
    fn dp_distance(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                cur[j] = (prev[j - 1] + c).min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn hits_fixture() {
        let gold = vec![0, 0, 0, 0];
        // gold ranks 1, 2, 11, 3
        let mut ranked = Vec::new();
        for rank in [1usize, 2, 11, 3] {
            let mut list: Vec<usize> = (1..=12).collect();
            list.insert(rank - 1, 0);
            ranked.push(list);
        }
        assert_eq!(hits_at_k(&ranked, &gold, 1).unwrap(), 25.0);
        assert_eq!(hits_at_k(&ranked, &gold, 10).unwrap(), 75.0);
        assert_eq!(hits_at_k(&[vec![3], vec![4]], &[3, 4], 1).unwrap(), 100.0);
        assert!(hits_at_k(&ranked, &gold, 0).is_err());
        assert_eq!(format_percent(52.7299999), "52.73");
    }

    #[test]
    fn wer_fixtures() {
        assert_eq!(wer(&t("a b c d"), &t("a b c d")).unwrap(), 0.0);
        assert_eq!(wer(&t("a b c d"), &t("a x c d")).unwrap(), 0.25);
        assert_eq!(wer(&t("a b c d"), &t("a b c d e")).unwrap(), 0.25);
        assert_eq!(wer(&t("a b"), &t("x y z w")).unwrap(), 2.0);
        assert!(wer::<String>(&[], &t("a")).is_err());
    }

    #[test]
    fn eer_fixture() {
        let lex = EntityLexicon::new([t("new york"), t("paris")]);
        let c1 = t("flights to new york today");
        let n1 = t("flights to new yolk today");
        let c2 = t("hotels in paris cheap");
        let n2 = t("hotel in paris cheap");
        let pairs: Vec<(&[String], &[String])> = vec![(&c1, &n1), (&c2, &n2)];
        assert_eq!(eer(&pairs, &lex), 0.5);
        let clean: Vec<(&[String], &[String])> = vec![(&c1, &c1), (&c2, &c2)];
        assert_eq!(eer(&clean, &lex), 0.0);
        assert_eq!(eer(&pairs, &EntityLexicon::default()), 0.0);
    }

    #[test]
    fn insertion_inside_entity_counts() {
        let lex = EntityLexicon::new([t("new york")]);
        assert!(entity_corrupted(&t("to new york"), &t("to new big york"), &lex));
        assert!(!entity_corrupted(&t("to new york"), &t("big to new york"), &lex));
    }

    #[test]
    fn entity_split_counts() {
        let lex = EntityLexicon::new([t("kabo"), t("limu")]);
        let mut pairs = Vec::new();
        for i in 0..10 {
            let clean = t(&format!("find kabo near w{i}"));
            let noisy = if i < 4 {
                t(&format!("find kapo near w{i}"))
            } else if i < 7 {
                t(&format!("find kabo ner w{i}"))
            } else {
                clean.clone()
            };
            pairs.push((clean, noisy));
        }
        let refs: Vec<(&[String], &[String])> = pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let (ent, non) = split_entity_noise(&refs, &lex);
        assert_eq!((ent.len(), non.len()), (4, 6));
        let mut all: Vec<usize> = ent.iter().chain(&non).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let clean_only: Vec<(&[String], &[String])> = pairs.iter().map(|(a, _)| (a.as_slice(), a.as_slice())).collect();
        assert_eq!(split_entity_noise(&clean_only, &lex).0.len(), 0);
    }

    #[test]
    fn lexicon_file_round_trip() {
        let lex = EntityLexicon::new([t("new york"), t("paris"), t("paris")]);
        assert_eq!(lex.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("entities.txt");
        lex.save(&p).unwrap();
        assert_eq!(EntityLexicon::load(&p).unwrap(), lex);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..10)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn alignment_matches_dp_oracle(a in seq(), b in seq()) {
            prop_assert_eq!(edit_count(&a, &b), dp_distance(&a, &b));
            let edits = align(&a, &b);
            let refs = edits.iter().filter(|e| !matches!(e, Edit::Insert { .. })).count();
            let hyps = edits.iter().filter(|e| !matches!(e, Edit::Delete { .. })).count();
            prop_assert_eq!(refs, a.len());
            prop_assert_eq!(hyps, b.len());
        }

        #[test]
        fn hits_monotone_in_k(lists in prop::collection::vec(prop::collection::vec(0usize..20, 0..15), 1..20), k in 1usize..15) {
            let gold: Vec<usize> = (0..lists.len()).map(|i| i % 20).collect();
            let a = hits_at_k(&lists, &gold, k).unwrap();
            let b = hits_at_k(&lists, &gold, k + 1).unwrap();
            prop_assert!(a <= b);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
