//! Experiment configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::NoiseConfig;
use crate::bm25::Bm25Params;
use crate::corpus::{SyntheticConfig, DEFAULT_MAX_BODY_TOKENS};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, ModelConfig};
use crate::qgen::QgenConfig;
use crate::scl::SclConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub docs: usize,
    pub queries_per_doc: usize,
    pub test_fraction: f64,
    pub max_body_tokens: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            docs: 200,
            queries_per_doc: 5,
            test_fraction: 0.2,
            max_body_tokens: DEFAULT_MAX_BODY_TOKENS,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DocidSection {
    pub k: usize,
    pub leaf_cap: usize,
}

impl Default for DocidSection {
    fn default() -> Self {
        DocidSection { k: 4, leaf_cap: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            d_ff: 128,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, radix: usize) -> ModelConfig {
        let mut c = ModelConfig::new(vocab_size, radix);
        c.d_model = self.d_model;
        c.enc_layers = self.enc_layers;
        c.dec_layers = self.dec_layers;
        c.heads = self.heads;
        c.d_ff = self.d_ff;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub wer_targets: Vec<f64>,
    pub beam: usize,
    pub top_k: usize,
    pub systems: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            wer_targets: vec![0.10, 0.15, 0.23],
            beam: 10,
            top_k: 10,
            systems: crate::pipeline::System::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

/// Pipeline stages in dependency order. An artifact of a stage depends on
/// the config sections of that stage and of every earlier one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Corpus,
    Docids,
    Qgen,
    Augment,
    Pretrain,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Corpus,
        Stage::Docids,
        Stage::Qgen,
        Stage::Augment,
        Stage::Pretrain,
        Stage::Train,
        Stage::Eval,
    ];

    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Corpus => &["seed", "corpus"],
            Stage::Docids => &["docid"],
            Stage::Qgen => &["qgen"],
            Stage::Augment => &["augment"],
            Stage::Pretrain => &["model", "scl"],
            Stage::Train => &["train"],
            Stage::Eval => &["eval", "bm25"],
        }
    }
}

/// Every tunable of the pipeline. `seed` is the master seed from which all
/// stage seeds are derived; it has no default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub docid: DocidSection,
    pub qgen: QgenConfig,
    pub augment: NoiseConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub scl: SclConfig,
    pub bm25: Bm25Params,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_toml()?.as_bytes())
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a master seed is required (set `seed` or pass --seed)".into()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        let c = &self.corpus;
        if c.docs == 0 || c.queries_per_doc < 2 || !(0.0..1.0).contains(&c.test_fraction) || c.max_body_tokens == 0 {
            return Err(Error::Config(
                "corpus needs docs >= 1, queries_per_doc >= 2, 0 <= test_fraction < 1, max_body_tokens >= 1".into(),
            ));
        }
        if self.docid.k < 2 || self.docid.leaf_cap < 1 {
            return Err(Error::Config("docid needs k >= 2 and leaf_cap >= 1".into()));
        }
        self.qgen.validate()?;
        self.augment.validate()?;
        self.scl.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train needs epochs >= 1 and batch_size >= 1".into()));
        }
        if self.eval.top_k == 0 || self.eval.beam < self.eval.top_k {
            return Err(Error::Config("eval needs beam >= top_k >= 1".into()));
        }
        if self.eval.wer_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("WER targets must lie in [0, 1]".into()));
        }
        for s in &self.eval.systems {
            crate::pipeline::System::from_name(s)?;
        }
        self.model.model_config(8, self.docid.k).validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_sha(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of the sections that artifacts of `stage` depend on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let full = serde_json::to_value(self).expect("config serializes");
        let mut kept = serde_json::Map::new();
        for s in Stage::ALL.iter().filter(|s| **s <= stage) {
            for key in s.sections() {
                kept.insert((*key).to_string(), full[*key].clone());
            }
        }
        short_sha(&serde_json::to_vec(&kept).expect("config serializes"))
    }
}

fn short_sha(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Config hashes of the artifacts in an output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: std::collections::BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: Stage,
    pub config_hash: String,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    /// Reads `dir/manifest.json`; an absent file is an empty manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::corpus::write_file(&dir.join(Self::FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn record(&mut self, artifact: &str, stage: Stage, config: &ExperimentConfig) {
        self.artifacts.insert(
            artifact.to_string(),
            ManifestEntry {
                stage,
                config_hash: config.stage_hash(stage),
            },
        );
    }

    /// Errors unless `artifact` is recorded with the hash `config` gives its stage.
    pub fn check(&self, artifact: &str, config: &ExperimentConfig) -> Result<()> {
        let entry = self.artifacts.get(artifact).ok_or_else(|| {
            Error::Config(format!("artifact `{artifact}` is missing; run the stage that produces it first"))
        })?;
        let expected = config.stage_hash(entry.stage);
        if entry.config_hash != expected {
            return Err(Error::ConfigMismatch {
                artifact: artifact.to_string(),
                expected,
                found: entry.config_hash.clone(),
            });
        }
        Ok(())
    }
}
