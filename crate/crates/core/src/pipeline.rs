//! End-to-end recipe: corpus, docids, training sets, the six compared
//! systems, noisy test conditions, and the evaluation matrix.

use std::collections::BTreeMap;

use crate::augment::{augment_queries, make_noisy_testset, ConfusionTable, NoisySetMeta};
use crate::bm25::{bm25_search, InvertedIndex};
use crate::config::ExperimentConfig;
use crate::corpus::{generate_synthetic_corpus, split, Corpus, Query};
use crate::docid::{build_docids, DocidMap};
use crate::error::{Error, Result};
use crate::eval::metrics::{corpus_wer, eer, hits_at_k, split_entity_noise, EntityLexicon};
use crate::eval::report::{ConditionSummary, EvalReport, Scores, SystemResult};
use crate::model::{train, Seq2SeqModel, TrainConfig, TrainReport, TrainingExample};
use crate::qgen::build_training_set;
use crate::scl::{labelled_queries, pretrain_encoder, PretrainReport};
use crate::seed::derive;
use crate::trie::{constrained_beam_search, PrefixTrie};

/// The compared retrieval systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum System {
    Bm25,
    /// Supervised queries plus full document texts, no pseudo-queries.
    Dsi,
    /// Supervised and pseudo-queries.
    DsiQg,
    /// Contrastive pretraining and fine-tuning on clean queries only.
    NoDa,
    /// Fine-tuning on clean and augmented queries, no pretraining.
    NoScl,
    /// Contrastive pretraining and fine-tuning on clean and augmented queries.
    Full,
}

impl System {
    pub const ALL: [System; 6] = [System::Bm25, System::Dsi, System::DsiQg, System::NoDa, System::NoScl, System::Full];

    pub fn name(self) -> &'static str {
        match self {
            System::Bm25 => "bm25",
            System::Dsi => "dsi",
            System::DsiQg => "dsi-qg",
            System::NoDa => "no-da",
            System::NoScl => "no-scl",
            System::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            System::Bm25 => "BM25",
            System::Dsi => "DSI",
            System::DsiQg => "DSI-QG",
            System::NoDa => "w/o Data Augm.",
            System::NoScl => "w/o SCL",
            System::Full => "Full",
        }
    }

    pub fn from_name(name: &str) -> Result<System> {
        System::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown system `{name}`")))
    }

    pub fn is_generative(self) -> bool {
        self != System::Bm25
    }

    pub fn uses_scl(self) -> bool {
        matches!(self, System::NoDa | System::Full)
    }

    pub fn uses_augmentation(self) -> bool {
        matches!(self, System::NoScl | System::Full)
    }
}

pub const CLEAN: &str = "clean";

pub fn condition_name(target_wer: f64) -> String {
    if target_wer == 0.0 {
        CLEAN.to_string()
    } else {
        format!("wer-{target_wer:.2}")
    }
}

/// Generated corpus and its query split.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    /// Vocabulary covers truncated documents and the training queries.
    pub corpus: Corpus,
    pub train: Vec<Query>,
    pub test: Vec<Query>,
    pub lexicon: EntityLexicon,
}

pub fn generate_corpus(config: &ExperimentConfig) -> Result<CorpusSplit> {
    let seed = config.master_seed()?;
    let c = &config.corpus;
    let data = generate_synthetic_corpus(derive(seed, "corpus"), c.docs, c.queries_per_doc, &c.synthetic)?;
    let (train, test) = split(&data.queries, c.test_fraction, derive(seed, "split"))?;
    let corpus = data.corpus.with_body_limit(c.max_body_tokens)?.with_query_vocabulary(&train);
    Ok(CorpusSplit {
        corpus,
        train,
        test,
        lexicon: EntityLexicon::new(data.entities),
    })
}

pub fn docid_map(config: &ExperimentConfig, corpus: &Corpus) -> Result<DocidMap> {
    build_docids(corpus, config.docid.k, config.docid.leaf_cap, derive(config.master_seed()?, "docids"))
}

/// `Q_seq`: supervised queries followed by pseudo-queries.
pub fn pseudo_query_set(config: &ExperimentConfig, corpus: &Corpus, supervised: &[Query]) -> Result<Vec<Query>> {
    build_training_set(supervised, corpus, config.qgen, derive(config.master_seed()?, "qgen"))
}

/// `Q_da`: `n_augments` noisy copies of every query of `q_seq`.
pub fn augmented_set(config: &ExperimentConfig, corpus: &Corpus, q_seq: &[Query]) -> Result<Vec<Query>> {
    let table = ConfusionTable::build(corpus);
    augment_queries(q_seq, &table, &config.augment, derive(config.master_seed()?, "augment"))
}

/// Everything the systems are trained and evaluated on.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub split: CorpusSplit,
    pub docids: DocidMap,
    pub q_seq: Vec<Query>,
    pub q_da: Vec<Query>,
}

impl Benchmark {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let split = generate_corpus(config)?;
        let docids = docid_map(config, &split.corpus)?;
        let q_seq = pseudo_query_set(config, &split.corpus, &split.train)?;
        let q_da = augmented_set(config, &split.corpus, &q_seq)?;
        Ok(Benchmark {
            split,
            docids,
            q_seq,
            q_da,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.split.corpus
    }

    /// `Q = Q_seq ∪ Q_da`.
    pub fn full_training_set(&self) -> Vec<Query> {
        self.q_seq.iter().chain(&self.q_da).cloned().collect()
    }

    /// Training queries of a generative system (the DSI baseline also gets
    /// document-text examples, see [`training_examples`]).
    pub fn training_queries(&self, system: System) -> Vec<Query> {
        match system {
            System::Bm25 => Vec::new(),
            System::Dsi => self.split.train.clone(),
            System::DsiQg | System::NoDa => self.q_seq.clone(),
            System::NoScl | System::Full => self.full_training_set(),
        }
    }

    pub fn training_examples(&self, system: System) -> Vec<TrainingExample> {
        let mut out = query_examples(self.corpus(), &self.docids, &self.training_queries(system));
        if system == System::Dsi {
            out.extend(indexing_examples(self.corpus(), &self.docids));
        }
        out
    }
}

pub fn query_examples(corpus: &Corpus, docids: &DocidMap, queries: &[Query]) -> Vec<TrainingExample> {
    let vocab = docids.vocab();
    queries
        .iter()
        .map(|q| TrainingExample {
            query: corpus.vocabulary().encode(&q.text),
            docid: docids.docid(q.gold_doc).tokens(vocab),
        })
        .collect()
}

/// One (truncated document text → docid) example per document.
pub fn indexing_examples(corpus: &Corpus, docids: &DocidMap) -> Vec<TrainingExample> {
    let vocab = docids.vocab();
    (0..corpus.len())
        .map(|i| TrainingExample {
            query: corpus.vocabulary().encode(&corpus.truncated(i)),
            docid: docids.docid(i).tokens(vocab),
        })
        .collect()
}

/// Freshly initialized model; every system starts from the same weights.
pub fn init_model(config: &ExperimentConfig, corpus: &Corpus, docids: &DocidMap) -> Result<Seq2SeqModel> {
    let mc = config.model.model_config(corpus.vocabulary().len(), docids.radix());
    Seq2SeqModel::new(mc, derive(config.master_seed()?, "model-init"))
}

pub fn pretrain(config: &ExperimentConfig, model: &mut Seq2SeqModel, corpus: &Corpus, queries: &[Query]) -> Result<PretrainReport> {
    let labelled = labelled_queries(queries, corpus.vocabulary());
    pretrain_encoder(model, &labelled, &config.scl, derive(config.master_seed()?, "scl"))
}

pub fn finetune(config: &ExperimentConfig, model: &mut Seq2SeqModel, examples: &[TrainingExample]) -> Result<TrainReport> {
    let tc = TrainConfig {
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        seed: derive(config.master_seed()?, "train"),
        adam: config.train.adam.clone(),
    };
    train(model, examples, &tc)
}

/// Trains one generative system from scratch (contrastive pretraining first
/// when the system uses it). Returns `None` for BM25.
pub fn train_system(config: &ExperimentConfig, bench: &Benchmark, system: System) -> Result<Option<Seq2SeqModel>> {
    if !system.is_generative() {
        return Ok(None);
    }
    let mut model = init_model(config, bench.corpus(), &bench.docids)?;
    if system.uses_scl() {
        pretrain(config, &mut model, bench.corpus(), &bench.training_queries(system))?;
    }
    finetune(config, &mut model, &bench.training_examples(system))?;
    Ok(Some(model))
}

/// A test set under one noise condition; query order and ids match the clean set.
#[derive(Clone, Debug)]
pub struct TestCondition {
    pub name: String,
    pub target_wer: f64,
    pub achieved_wer: f64,
    pub queries: Vec<Query>,
    /// Calibration record of a noisy condition.
    pub meta: Option<NoisySetMeta>,
}

/// The clean test set plus one calibrated noisy copy per WER target.
pub fn test_conditions(config: &ExperimentConfig, bench: &Benchmark) -> Result<Vec<TestCondition>> {
    let seed = config.master_seed()?;
    let table = ConfusionTable::build(bench.corpus());
    let mut out = vec![TestCondition {
        name: CLEAN.to_string(),
        target_wer: 0.0,
        achieved_wer: 0.0,
        queries: bench.split.test.clone(),
        meta: None,
    }];
    for &target in &config.eval.wer_targets {
        let set = make_noisy_testset(&bench.split.test, target, &table, derive(seed, &condition_name(target)))?;
        out.push(TestCondition {
            name: condition_name(target),
            target_wer: target,
            achieved_wer: set.meta.achieved_wer,
            queries: set.queries,
            meta: Some(set.meta),
        });
    }
    Ok(out)
}

/// Ranked document indices of one query for one system.
pub fn rank_documents(
    config: &ExperimentConfig,
    bench: &Benchmark,
    index: &InvertedIndex,
    model: Option<&Seq2SeqModel>,
    trie: &PrefixTrie,
    query: &Query,
) -> Result<Vec<usize>> {
    match model {
        None => Ok(bm25_search(index, &query.text, config.eval.top_k, config.bm25)?
            .into_iter()
            .map(|(d, _)| d)
            .collect()),
        Some(m) => {
            let tokens = bench.corpus().vocabulary().encode(&query.text);
            Ok(constrained_beam_search(m, &tokens, trie, config.eval.beam, config.eval.top_k)?
                .into_iter()
                .map(|h| h.doc)
                .collect())
        }
    }
}

fn scores(ranked: &[Vec<usize>], gold: &[usize], subset: &[usize]) -> Result<Scores> {
    let r: Vec<Vec<usize>> = subset.iter().map(|&i| ranked[i].clone()).collect();
    let g: Vec<usize> = subset.iter().map(|&i| gold[i]).collect();
    Ok(Scores {
        queries: subset.len(),
        hits_at_1: hits_at_k(&r, &g, 1)?,
        hits_at_10: hits_at_k(&r, &g, 10)?,
    })
}

/// Evaluates every configured system on every condition. Generative
/// systems must have a model in `models`; missing ones are listed in the error.
pub fn run_experiment_matrix(
    config: &ExperimentConfig,
    bench: &Benchmark,
    conditions: &[TestCondition],
    models: &BTreeMap<System, Seq2SeqModel>,
) -> Result<EvalReport> {
    let systems = config
        .eval
        .systems
        .iter()
        .map(|s| System::from_name(s))
        .collect::<Result<Vec<_>>>()?;
    let missing: Vec<String> = systems
        .iter()
        .filter(|s| s.is_generative() && !models.contains_key(s))
        .map(|s| s.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSystems(missing));
    }
    let clean = &bench.split.test;
    let gold: Vec<usize> = clean.iter().map(|q| q.gold_doc).collect();
    let index = InvertedIndex::build(bench.corpus());
    let trie = PrefixTrie::build(&bench.docids)?;
    let lexicon = &bench.split.lexicon;

    let mut summaries = Vec::new();
    let mut subsets = Vec::new();
    for cond in conditions {
        let pairs: Vec<(&[String], &[String])> = clean
            .iter()
            .zip(&cond.queries)
            .map(|(c, n)| (c.text.as_slice(), n.text.as_slice()))
            .collect();
        let (entity, non_entity) = split_entity_noise(&pairs, lexicon);
        summaries.push(ConditionSummary {
            name: cond.name.clone(),
            target_wer: cond.target_wer,
            wer: corpus_wer(&pairs)?,
            eer_utterance_level: eer(&pairs, lexicon),
            queries: pairs.len(),
            entity_noise_queries: entity.len(),
            non_entity_queries: non_entity.len(),
        });
        subsets.push((entity, non_entity));
    }

    let all: Vec<usize> = (0..clean.len()).collect();
    let mut results = Vec::new();
    for &system in &systems {
        let model = models.get(&system);
        for (cond, (entity, non_entity)) in conditions.iter().zip(&subsets) {
            let ranked = cond
                .queries
                .iter()
                .map(|q| rank_documents(config, bench, &index, model, &trie, q))
                .collect::<Result<Vec<_>>>()?;
            results.push(SystemResult {
                system: system.name().to_string(),
                label: system.label().to_string(),
                condition: cond.name.clone(),
                all: scores(&ranked, &gold, &all)?,
                entity_noise: scores(&ranked, &gold, entity)?,
                non_entity: scores(&ranked, &gold, non_entity)?,
            });
        }
    }
    Ok(EvalReport {
        seeds: vec![config.master_seed()?],
        config_hash: config.hash(),
        conditions: summaries,
        results,
    })
}

/// Builds the benchmark, trains every configured system and evaluates them.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<EvalReport> {
    let bench = Benchmark::build(config)?;
    let mut models = BTreeMap::new();
    for name in &config.eval.systems {
        let system = System::from_name(name)?;
        if let Some(m) = train_system(config, &bench, system)? {
            models.insert(system, m);
        }
    }
    let conditions = test_conditions(config, &bench)?;
    run_experiment_matrix(config, &bench, &conditions, &models)
}
