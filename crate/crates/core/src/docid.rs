//! Semantic document identifiers.
//!
//! Documents are embedded as hashed character-trigram TF-IDF vectors,
//! clustered by recursive k-means, and named by their root-to-leaf path
//! followed by a fixed-width position inside their leaf. Digits are base `k`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;

use crate::corpus::{write_file, Corpus};
use crate::error::{Error, Result};
use crate::seed;

pub const EMBEDDING_DIM: usize = 256;
const NGRAM: usize = 3;
const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_TOL: f64 = 1e-6;

/// Token ids shared by docids and the decoder: digits `0..radix`, then EOS, then BOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DocidVocab {
    radix: usize,
}

impl DocidVocab {
    pub fn new(radix: usize) -> Self {
        assert!(radix >= 1);
        DocidVocab { radix }
    }

    pub fn radix(&self) -> usize {
        self.radix
    }

    pub fn eos(&self) -> usize {
        self.radix
    }

    pub fn bos(&self) -> usize {
        self.radix + 1
    }

    /// Tokens the decoder can emit (digits + EOS).
    pub fn output_size(&self) -> usize {
        self.radix + 1
    }

    /// Tokens the decoder can read (digits + EOS + BOS).
    pub fn input_size(&self) -> usize {
        self.radix + 2
    }
}

/// Digit sequence naming one document; EOS is implied at the end.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Docid(pub Vec<usize>);

impl Docid {
    pub fn digits(&self) -> &[usize] {
        &self.0
    }

    /// Digits followed by the terminal EOS token.
    pub fn tokens(&self, vocab: DocidVocab) -> Vec<usize> {
        let mut t = self.0.clone();
        t.push(vocab.eos());
        t
    }

    pub fn parse(s: &str) -> Result<Self> {
        let digits = s
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad docid `{s}`: {e}")))?;
        if digits.is_empty() {
            return Err(Error::InvalidArgument("empty docid".into()));
        }
        Ok(Docid(digits))
    }
}

impl fmt::Display for Docid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Bijection between document indices and docids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocidMap {
    radix: usize,
    forward: Vec<Docid>,
    reverse: HashMap<Docid, usize>,
}

impl DocidMap {
    pub fn new(radix: usize, forward: Vec<Docid>) -> Result<Self> {
        if radix < 2 {
            return Err(Error::InvalidArgument("docid radix must be at least 2".into()));
        }
        let mut reverse = HashMap::with_capacity(forward.len());
        for (i, d) in forward.iter().enumerate() {
            if d.0.is_empty() || d.0.iter().any(|&x| x >= radix) {
                return Err(Error::InvalidArgument(format!("docid `{d}` not over radix {radix}")));
            }
            if reverse.insert(d.clone(), i).is_some() {
                return Err(Error::DuplicateDocid(d.to_string()));
            }
        }
        Ok(DocidMap {
            radix,
            forward,
            reverse,
        })
    }

    pub fn radix(&self) -> usize {
        self.radix
    }

    pub fn vocab(&self) -> DocidVocab {
        DocidVocab::new(self.radix)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn docid(&self, doc: usize) -> &Docid {
        &self.forward[doc]
    }

    pub fn document(&self, docid: &Docid) -> Option<usize> {
        self.reverse.get(docid).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Docid)> {
        self.forward.iter().enumerate()
    }

    /// `document_index<TAB>docid digits`, one line per document.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, d) in self.iter() {
            s.push_str(&format!("{i}\t{d}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str, radix: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                file: "docid map".into(),
                line: n + 1,
                message,
            };
            let (idx, digits) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `index<TAB>docid`".into()))?;
            let idx: usize = idx.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
            let docid = Docid::parse(digits).map_err(|e| parse_err(e.to_string()))?;
            rows.push((idx, docid));
        }
        rows.sort_by_key(|(i, _)| *i);
        if rows.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::InvalidArgument("docid map indices must be 0..N-1".into()));
        }
        DocidMap::new(radix, rows.into_iter().map(|(_, d)| d).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path, radix: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DocidMap::from_tsv(&text, radix)
    }
}

// ---------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------

fn bucket(gram: &[char]) -> usize {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for c in gram {
        for b in c.to_string().bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    (h % EMBEDDING_DIM as u64) as usize
}

fn ngram_counts(tokens: &[String]) -> Vec<f64> {
    let mut counts = vec![0.0; EMBEDDING_DIM];
    for t in tokens {
        let chars: Vec<char> = std::iter::once('#').chain(t.chars()).chain(std::iter::once('#')).collect();
        for g in chars.windows(NGRAM) {
            counts[bucket(g)] += 1.0;
        }
    }
    counts
}

/// Unit-norm hashed character-trigram TF-IDF vector of each truncated document.
pub fn embed_documents(corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let counts: Vec<Vec<f64>> = (0..corpus.len()).map(|i| ngram_counts(&corpus.truncated(i))).collect();
    let n = counts.len() as f64;
    let mut df = vec![0.0; EMBEDDING_DIM];
    for c in &counts {
        for (d, &v) in df.iter_mut().zip(c) {
            if v > 0.0 {
                *d += 1.0;
            }
        }
    }
    let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d)).ln() + 1.0).collect();
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut v: Vec<f64> = c
                .iter()
                .zip(&idf)
                .map(|(&tf, &w)| if tf > 0.0 { (1.0 + tf.ln()) * w } else { 0.0 })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroEmbedding(corpus.document(i).external_id.clone()));
            }
            v.iter_mut().for_each(|x| *x /= norm);
            Ok(v)
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// ---------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // all remaining mass is zero: duplicate the first centroid
            0
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeded Lloyd iterations. Returns one cluster label per point
/// (labels in `0..min(k, n)`, possibly with empty clusters).
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Vec<usize> {
    assert!(!points.is_empty() && k >= 1);
    let k = k.min(points.len());
    let dim = points[0].len();
    let mut rng = seed::rng(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            dists[i] = d;
        }
        // refill empty clusters with the farthest point
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&c| sizes[c] += 1);
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[labels[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                if dists[i] > 0.0 {
                    sizes[labels[i]] -= 1;
                    labels[i] = c;
                    sizes[c] = 1;
                    dists[i] = 0.0;
                }
            }
        }
        let mut next = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&labels) {
            for (a, b) in next[c].iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if sizes[c] == 0 {
                next[c] = centroids[c].clone();
                continue;
            }
            next[c].iter_mut().for_each(|v| *v /= sizes[c] as f64);
            shift = shift.max(sq_dist(&next[c], &centroids[c]).sqrt());
        }
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(p, &centroids).0;
    }
    labels
}

// ---------------------------------------------------------------------
// Cluster tree
// ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClusterNode {
    /// Documents in index order.
    Leaf(Vec<usize>),
    Internal(Vec<ClusterNode>),
}

impl ClusterNode {
    pub fn depth(&self) -> usize {
        match self {
            ClusterNode::Leaf(_) => 0,
            ClusterNode::Internal(c) => 1 + c.iter().map(ClusterNode::depth).max().unwrap_or(0),
        }
    }

    pub fn documents(&self) -> Vec<usize> {
        match self {
            ClusterNode::Leaf(d) => d.clone(),
            ClusterNode::Internal(c) => c.iter().flat_map(ClusterNode::documents).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterTree {
    pub root: ClusterNode,
    pub radix: usize,
}

/// Recursive k-means: split into at most `k` children, recurse into every
/// child with more than `leaf_cap` members. A split that leaves everything
/// in one child turns the node into a leaf.
pub fn hierarchical_cluster(embeddings: &[Vec<f64>], k: usize, leaf_cap: usize, seed: u64) -> Result<ClusterTree> {
    if k < 2 || leaf_cap < 1 {
        return Err(Error::InvalidArgument("need k >= 2 and leaf_cap >= 1".into()));
    }
    if embeddings.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let members: Vec<usize> = (0..embeddings.len()).collect();
    let root = build_node(embeddings, members, k, leaf_cap, seed);
    Ok(ClusterTree { root, radix: k })
}

fn build_node(emb: &[Vec<f64>], members: Vec<usize>, k: usize, leaf_cap: usize, node_seed: u64) -> ClusterNode {
    if members.len() <= leaf_cap {
        return ClusterNode::Leaf(members);
    }
    let points: Vec<&[f64]> = members.iter().map(|&i| emb[i].as_slice()).collect();
    let labels = kmeans(&points, k, node_seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (&m, &l) in members.iter().zip(&labels) {
        groups[l].push(m);
    }
    groups.retain(|g| !g.is_empty());
    if groups.len() <= 1 {
        return ClusterNode::Leaf(members);
    }
    ClusterNode::Internal(
        groups
            .into_iter()
            .enumerate()
            .map(|(c, g)| build_node(emb, g, k, leaf_cap, seed::derive_indexed(node_seed, c as u64)))
            .collect(),
    )
}

/// Number of base-`radix` digits needed for positions `0..n`.
fn position_width(n: usize, radix: usize) -> usize {
    let mut width = 1;
    let mut cap = radix;
    while cap < n {
        cap *= radix;
        width += 1;
    }
    width
}

fn to_base(mut v: usize, radix: usize, width: usize) -> Vec<usize> {
    let mut out = vec![0; width];
    for slot in out.iter_mut().rev() {
        *slot = v % radix;
        v /= radix;
    }
    out
}

/// Path digits followed by zero-padded within-leaf position digits.
pub fn assign_docids(tree: &ClusterTree) -> Result<DocidMap> {
    let n = tree.root.documents().len();
    let mut forward: Vec<Option<Docid>> = vec![None; n];
    let mut stack = vec![(&tree.root, Vec::new())];
    while let Some((node, path)) = stack.pop() {
        match node {
            ClusterNode::Leaf(docs) => {
                let width = position_width(docs.len(), tree.radix);
                for (pos, &d) in docs.iter().enumerate() {
                    let mut digits = path.clone();
                    digits.extend(to_base(pos, tree.radix, width));
                    if d >= n || forward[d].is_some() {
                        return Err(Error::InvalidArgument(format!("document {d} reached twice")));
                    }
                    forward[d] = Some(Docid(digits));
                }
            }
            ClusterNode::Internal(children) => {
                for (c, child) in children.iter().enumerate().rev() {
                    let mut p = path.clone();
                    p.push(c);
                    stack.push((child, p));
                }
            }
        }
    }
    let forward = forward
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidArgument("cluster tree does not cover every document".into()))?;
    DocidMap::new(tree.radix, forward)
}

/// Embeds, clusters and names every document of `corpus`.
pub fn build_docids(corpus: &Corpus, k: usize, leaf_cap: usize, seed: u64) -> Result<DocidMap> {
    let emb = embed_documents(corpus)?;
    let tree = hierarchical_cluster(&emb, k, leaf_cap, seed)?;
    assign_docids(&tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(docs: &[(&str, &str)]) -> Corpus {
        Corpus::new(
            docs.iter()
                .enumerate()
                .map(|(i, (t, b))| (format!("d{i}"), toks(t), toks(b)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let c = corpus(&[("alpha", "beta gamma"), ("alpha", "beta gamma"), ("zulu", "yankee xray")]);
        let e = embed_documents(&c).unwrap();
        assert_eq!(e[0], e[1]);
        for v in &e {
            assert_eq!(v.len(), EMBEDDING_DIM);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn near_duplicates_are_closer_than_unrelated() {
        let c = corpus(&[
            ("river delta", "the muddy river floods the delta every spring season"),
            ("river delta", "the muddy river floods the delta every autumn season"),
            ("quantum spin", "entangled photons exhibit nonlocal correlations in experiments"),
        ]);
        let e = embed_documents(&c).unwrap();
        let near = cosine(&e[0], &e[1]);
        let far = cosine(&e[0], &e[2]);
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn small_input_is_a_single_leaf() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let tree = hierarchical_cluster(&emb, 4, 3, 1).unwrap();
        assert_eq!(tree.root, ClusterNode::Leaf(vec![0, 1, 2]));
        let map = assign_docids(&tree).unwrap();
        let ids: Vec<String> = (0..3).map(|i| map.docid(i).to_string()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn identical_embeddings_terminate() {
        let emb = vec![vec![0.6, 0.8]; 50];
        let tree = hierarchical_cluster(&emb, 4, 8, 9).unwrap();
        assert_eq!(tree.root.depth(), 0);
        let map = assign_docids(&tree).unwrap();
        assert_eq!(map.len(), 50);
        // 50 positions need 3 base-4 digits
        assert!(map.iter().all(|(_, d)| d.0.len() == 3));
    }

    #[test]
    fn sibling_leaves_do_not_share_first_token() {
        let tree = ClusterTree {
            root: ClusterNode::Internal(vec![ClusterNode::Leaf(vec![1]), ClusterNode::Leaf(vec![0])]),
            radix: 4,
        };
        let map = assign_docids(&tree).unwrap();
        assert_ne!(map.docid(0).0[0], map.docid(1).0[0]);
        assert_eq!(map.docid(1).to_string(), "0 0");
        assert_eq!(map.docid(0).to_string(), "1 0");
    }

    #[test]
    fn position_digits() {
        assert_eq!(position_width(1, 4), 1);
        assert_eq!(position_width(4, 4), 1);
        assert_eq!(position_width(5, 4), 2);
        assert_eq!(position_width(16, 4), 2);
        assert_eq!(position_width(17, 4), 3);
        assert_eq!(to_base(6, 4, 2), vec![1, 2]);
    }

    #[test]
    fn tsv_round_trip() {
        let map = DocidMap::new(4, vec![Docid(vec![0, 1]), Docid(vec![1, 0]), Docid(vec![2])]).unwrap();
        assert_eq!(DocidMap::from_tsv(&map.to_tsv(), 4).unwrap(), map);
        assert!(map.to_tsv().starts_with("0\t0 1\n"));
    }

    #[test]
    fn duplicate_docids_rejected() {
        let err = DocidMap::new(4, vec![Docid(vec![1]), Docid(vec![1])]).unwrap_err();
        assert!(matches!(err, Error::DuplicateDocid(_)));
    }
}
