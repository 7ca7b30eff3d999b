//! Generative retrieval over synthetic corpora: docid construction, a
//! seq2seq retriever with trie-constrained decoding, noise augmentation,
//! contrastive encoder pretraining, a BM25 baseline, and evaluation.

pub mod augment;
pub mod bm25;
pub mod config;
pub mod corpus;
pub mod docid;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod qgen;
pub mod scl;
pub mod seed;
pub mod trie;

pub use config::ExperimentConfig;
pub use corpus::{Corpus, Document, Origin, Query, Vocabulary};
pub use docid::{Docid, DocidMap, DocidVocab};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{ModelConfig, Seq2SeqModel};
pub use pipeline::{Benchmark, System};
pub use trie::{constrained_beam_search, Hit, PrefixTrie};
