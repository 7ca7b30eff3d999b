use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genret::augment::NoisyTestSet;
use genret::bm25::{bm25_search, InvertedIndex};
use genret::config::{ExperimentConfig, Manifest, Stage};
use genret::corpus::{load_corpus, load_queries, save_queries, Corpus, Query};
use genret::docid::DocidMap;
use genret::eval::EntityLexicon;
use genret::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Seq2SeqModel, FLAG_SCL_PRETRAINED};
use genret::pipeline::{self, Benchmark, CorpusSplit, System, TestCondition};
use genret::trie::{constrained_beam_search, PrefixTrie};

use crate::{Cli, Command, SearchArgs};

const CONFIG: &str = "config.toml";
const CORPUS: &str = "corpus.jsonl";
const TRAIN: &str = "train.jsonl";
const TEST: &str = "test.jsonl";
const ENTITIES: &str = "entities.txt";
const DOCIDS: &str = "docids.tsv";
const QSEQ: &str = "qseq.jsonl";
const Q: &str = "q.jsonl";
const REPORT: &str = "report.json";

fn checkpoint_name(system: System) -> String {
    format!("{}.ckpt", system.name())
}

fn pretrained_name(system: System) -> String {
    format!("pretrained-{}.ckpt", system.name())
}

/// Output directory, resolved config and manifest of one invocation.
struct Workspace {
    dir: PathBuf,
    config: ExperimentConfig,
    manifest: Manifest,
}

impl Workspace {
    fn open(cli: &Cli) -> Result<Self> {
        std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
        let saved = cli.out_dir.join(CONFIG);
        let mut config = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None if saved.exists() => ExperimentConfig::load(&saved)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = Some(seed);
        }
        Ok(Workspace {
            dir: cli.out_dir.clone(),
            config,
            manifest: Manifest::load(&cli.out_dir)?,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, artifacts: &[&str]) -> Result<()> {
        for a in artifacts {
            self.manifest.check(a, &self.config)?;
        }
        Ok(())
    }

    fn record(&mut self, artifact: &str, stage: Stage) {
        self.manifest.record(artifact, stage, &self.config);
    }

    /// Persists the resolved config and the manifest.
    fn commit(&self) -> Result<()> {
        self.config.save(&self.path(CONFIG))?;
        self.manifest.save(&self.dir)?;
        Ok(())
    }

    fn split(&self) -> Result<CorpusSplit> {
        self.require(&[CORPUS, TRAIN, TEST, ENTITIES])?;
        let corpus = load_corpus(&self.path(CORPUS))?.with_body_limit(self.config.corpus.max_body_tokens)?;
        let train = load_queries(&self.path(TRAIN), &corpus)?;
        let test = load_queries(&self.path(TEST), &corpus)?;
        let corpus = corpus.with_query_vocabulary(&train);
        let lexicon = EntityLexicon::load(&self.path(ENTITIES))?;
        Ok(CorpusSplit {
            corpus,
            train,
            test,
            lexicon,
        })
    }

    fn docids(&self) -> Result<DocidMap> {
        self.require(&[DOCIDS])?;
        Ok(DocidMap::load(&self.path(DOCIDS), self.config.docid.k)?)
    }

    fn queries(&self, name: &str, corpus: &Corpus) -> Result<Vec<Query>> {
        self.require(&[name])?;
        Ok(load_queries(&self.path(name), corpus)?)
    }

    /// Benchmark with the query sets that exist so far.
    fn benchmark(&self) -> Result<Benchmark> {
        let split = self.split()?;
        let docids = self.docids()?;
        let optional = |name: &str| -> Result<Vec<Query>> {
            if self.manifest.artifacts.contains_key(name) {
                self.queries(name, &split.corpus)
            } else {
                Ok(Vec::new())
            }
        };
        let q_seq = optional(QSEQ)?;
        let q = optional(Q)?;
        let q_da = q.get(q_seq.len()..).map(<[Query]>::to_vec).unwrap_or_default();
        Ok(Benchmark {
            split,
            docids,
            q_seq,
            q_da,
        })
    }

    fn load_model(&self, name: &str, stage: Stage) -> Result<(Seq2SeqModel, CheckpointMeta)> {
        let path = self.path(name);
        let (model, meta) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        let expected = self.config.stage_hash(stage);
        if meta.config_hash != expected {
            return Err(genret::Error::ConfigMismatch {
                artifact: name.to_string(),
                expected,
                found: meta.config_hash,
            }
            .into());
        }
        Ok((model, meta))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut ws = Workspace::open(&cli)?;
    match cli.command {
        Command::GenCorpus {
            docs,
            queries_per_doc,
            test_fraction,
        } => {
            if let Some(d) = docs {
                ws.config.corpus.docs = d;
            }
            if let Some(q) = queries_per_doc {
                ws.config.corpus.queries_per_doc = q;
            }
            if let Some(f) = test_fraction {
                ws.config.corpus.test_fraction = f;
            }
            gen_corpus(&mut ws)
        }
        Command::BuildDocids { k, leaf_cap } => {
            if let Some(k) = k {
                ws.config.docid.k = k;
            }
            if let Some(c) = leaf_cap {
                ws.config.docid.leaf_cap = c;
            }
            build_docids(&mut ws)
        }
        Command::Qgen { per_doc } => {
            if let Some(n) = per_doc {
                ws.config.qgen.per_doc = n;
            }
            qgen(&mut ws)
        }
        Command::PrepareTraining { no_da, n_augments } => {
            if let Some(n) = n_augments {
                ws.config.augment.n_augments = n;
            }
            if no_da {
                ws.config.augment.n_augments = 0;
            }
            prepare_training(&mut ws)
        }
        Command::Pretrain { system, steps } => {
            if let Some(s) = steps {
                ws.config.scl.steps = s;
            }
            pretrain(&mut ws, System::from_name(&system)?)
        }
        Command::Train { which, epochs } => {
            if let Some(e) = epochs {
                ws.config.train.epochs = e;
            }
            let systems = match which.system {
                Some(s) => vec![System::from_name(&s)?],
                None => System::ALL.into_iter().filter(|s| s.is_generative()).collect(),
            };
            train(&mut ws, &systems, which.all)
        }
        Command::Search(args) => search(&ws, &args),
        Command::Eval { output } => eval(&mut ws, output),
    }
}

fn validated(ws: &Workspace) -> Result<()> {
    ws.config.validate()?;
    Ok(())
}

fn gen_corpus(ws: &mut Workspace) -> Result<()> {
    validated(ws)?;
    let split = pipeline::generate_corpus(&ws.config)?;
    split.corpus.save(&ws.path(CORPUS))?;
    save_queries(&split.train, &split.corpus, &ws.path(TRAIN))?;
    save_queries(&split.test, &split.corpus, &ws.path(TEST))?;
    split.lexicon.save(&ws.path(ENTITIES))?;
    for a in [CORPUS, TRAIN, TEST, ENTITIES] {
        ws.record(a, Stage::Corpus);
    }
    ws.commit()?;
    println!(
        "{} documents, {} training and {} test queries, {} entities in {}",
        split.corpus.len(),
        split.train.len(),
        split.test.len(),
        split.lexicon.len(),
        ws.dir.display()
    );
    Ok(())
}

fn build_docids(ws: &mut Workspace) -> Result<()> {
    validated(ws)?;
    let split = ws.split()?;
    let map = pipeline::docid_map(&ws.config, &split.corpus)?;
    map.save(&ws.path(DOCIDS))?;
    ws.record(DOCIDS, Stage::Docids);
    ws.commit()?;
    let longest = map.iter().map(|(_, d)| d.digits().len()).max().unwrap_or(0);
    println!("{} docids, longest {} digits", map.len(), longest);
    Ok(())
}

fn qgen(ws: &mut Workspace) -> Result<()> {
    validated(ws)?;
    let split = ws.split()?;
    let q_seq = pipeline::pseudo_query_set(&ws.config, &split.corpus, &split.train)?;
    save_queries(&q_seq, &split.corpus, &ws.path(QSEQ))?;
    ws.record(QSEQ, Stage::Qgen);
    ws.commit()?;
    println!("{} queries ({} pseudo)", q_seq.len(), q_seq.len() - split.train.len());
    Ok(())
}

fn prepare_training(ws: &mut Workspace) -> Result<()> {
    validated(ws)?;
    let split = ws.split()?;
    let q_seq = ws.queries(QSEQ, &split.corpus)?;
    let q_da = pipeline::augmented_set(&ws.config, &split.corpus, &q_seq)?;
    let q: Vec<Query> = q_seq.iter().chain(&q_da).cloned().collect();
    save_queries(&q, &split.corpus, &ws.path(Q))?;
    ws.record(Q, Stage::Augment);
    ws.commit()?;
    println!("{} training queries ({} augmented)", q.len(), q_da.len());
    Ok(())
}

fn pretrain(ws: &mut Workspace, system: System) -> Result<()> {
    validated(ws)?;
    if !system.uses_scl() {
        bail!("system `{}` does not use contrastive pretraining", system.name());
    }
    let bench = ws.benchmark()?;
    ws.require(&[if system.uses_augmentation() { Q } else { QSEQ }])?;
    run_pretrain(ws, &bench, system)?;
    ws.commit()
}

fn run_pretrain(ws: &mut Workspace, bench: &Benchmark, system: System) -> Result<Seq2SeqModel> {
    let mut model = pipeline::init_model(&ws.config, bench.corpus(), &bench.docids)?;
    let report = pipeline::pretrain(&ws.config, &mut model, bench.corpus(), &bench.training_queries(system))?;
    let (start, end) = report.start_end(50);
    println!("{}: contrastive loss {start:.4} -> {end:.4}", system.name());
    let meta = CheckpointMeta {
        config_hash: ws.config.stage_hash(Stage::Pretrain),
        flags: vec![FLAG_SCL_PRETRAINED.to_string()],
        label: system.name().to_string(),
    };
    let name = pretrained_name(system);
    save_checkpoint(&model, &meta, &ws.path(&name))?;
    ws.record(&name, Stage::Pretrain);
    Ok(model)
}

fn train(ws: &mut Workspace, systems: &[System], pretrain_missing: bool) -> Result<()> {
    validated(ws)?;
    let bench = ws.benchmark()?;
    for &system in systems {
        if !system.is_generative() {
            bail!("`{}` has no trainable model", system.name());
        }
        match system {
            System::DsiQg | System::NoDa => ws.require(&[QSEQ])?,
            System::NoScl | System::Full => ws.require(&[Q])?,
            _ => {}
        }
        let mut model = if system.uses_scl() {
            let name = pretrained_name(system);
            if ws.manifest.artifacts.contains_key(&name) {
                ws.require(&[&name])?;
                ws.load_model(&name, Stage::Pretrain)?.0
            } else if pretrain_missing {
                run_pretrain(ws, &bench, system)?
            } else {
                bail!("no pretrained encoder for `{}`; run `pretrain --system {}` first", system.name(), system.name());
            }
        } else {
            pipeline::init_model(&ws.config, bench.corpus(), &bench.docids)?
        };
        let report = pipeline::finetune(&ws.config, &mut model, &bench.training_examples(system))?;
        let mut flags = Vec::new();
        if system.uses_scl() {
            flags.push(FLAG_SCL_PRETRAINED.to_string());
        }
        let meta = CheckpointMeta {
            config_hash: ws.config.stage_hash(Stage::Train),
            flags,
            label: system.name().to_string(),
        };
        let name = checkpoint_name(system);
        save_checkpoint(&model, &meta, &ws.path(&name))?;
        ws.record(&name, Stage::Train);
        ws.commit()?;
        println!(
            "{}: {} steps, final epoch loss {:.4}",
            system.name(),
            report.steps,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// One query of a batch file: `id<TAB>text` or a JSON record with `id` and `text`.
fn parse_query_line(line: &str, n: usize) -> Result<(String, String)> {
    if line.trim_start().starts_with('{') {
        #[derive(serde::Deserialize)]
        struct Rec {
            id: String,
            text: String,
        }
        let r: Rec = serde_json::from_str(line).with_context(|| format!("query line {n}"))?;
        return Ok((r.id, r.text));
    }
    match line.split_once('\t') {
        Some((id, text)) => Ok((id.to_string(), text.to_string())),
        None => Ok((format!("q{n}"), line.to_string())),
    }
}

struct Searcher {
    corpus: Corpus,
    docids: DocidMap,
    trie: PrefixTrie,
    index: Option<InvertedIndex>,
    model: Option<Seq2SeqModel>,
    bm25: genret::bm25::Bm25Params,
    top_k: usize,
    beam: usize,
}

impl Searcher {
    /// `(external id, score)` pairs, best first.
    fn search(&self, text: &str) -> Result<Vec<(String, f64)>> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let ext = |d: usize| self.corpus.document(d).external_id.clone();
        match (&self.model, &self.index) {
            (Some(model), _) => {
                let ids = self.corpus.vocabulary().encode(&tokens);
                Ok(constrained_beam_search(model, &ids, &self.trie, self.beam, self.top_k)?
                    .into_iter()
                    .map(|h| (ext(h.doc), h.score()))
                    .collect())
            }
            (None, Some(index)) => Ok(bm25_search(index, &tokens, self.top_k, self.bm25)?
                .into_iter()
                .map(|(d, s)| (ext(d), s))
                .collect()),
            (None, None) => unreachable!("searcher has a model or an index"),
        }
    }
}

fn search(ws: &Workspace, args: &SearchArgs) -> Result<()> {
    let split = ws.split()?;
    let docids = ws.docids()?;
    let trie = PrefixTrie::build(&docids)?;
    let system = System::from_name(&args.system)?;
    let (model, index) = match (&args.checkpoint, system) {
        (Some(path), _) => (Some(load_checkpoint(path)?.0), None),
        (None, System::Bm25) => (None, Some(InvertedIndex::build(&split.corpus))),
        (None, s) => {
            let name = checkpoint_name(s);
            ws.require(&[&name])?;
            (Some(ws.load_model(&name, Stage::Train)?.0), None)
        }
    };
    if let Some(m) = &model {
        if m.config().vocab_size != split.corpus.vocabulary().len() || m.config().docid_radix != docids.radix() {
            bail!("checkpoint does not match the corpus vocabulary or docid radix in {}", ws.dir.display());
        }
    }
    let searcher = Searcher {
        corpus: split.corpus,
        docids,
        trie,
        index,
        model,
        bm25: ws.config.bm25,
        top_k: args.top_k,
        beam: args.beam.max(args.top_k),
    };
    let print = |out: &mut dyn Write, hits: &[(String, f64)]| -> Result<()> {
        for (rank, (id, score)) in hits.iter().enumerate() {
            let docid = searcher.corpus.index_of(id).map(|d| searcher.docids.docid(d).to_string());
            writeln!(out, "{}\t{id}\t{score:.6e}\t{}", rank + 1, docid.unwrap_or_default())?;
        }
        Ok(())
    };
    let stdout = std::io::stdout();
    if let Some(q) = &args.query {
        print(&mut stdout.lock(), &searcher.search(q)?)?;
    } else if let Some(path) = &args.queries {
        let run_path = args.run.as_ref().expect("clap enforces --run");
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut out = String::new();
        let mut n = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, q) = parse_query_line(line, i + 1)?;
            for (rank, (ext, score)) in searcher.search(&q)?.iter().enumerate() {
                out.push_str(&format!("{id}\t{}\t{ext}\t{score:.6e}\n", rank + 1));
            }
            n += 1;
        }
        write_text(run_path, &out)?;
        println!("{n} queries ranked into {}", run_path.display());
    } else if args.repl {
        let stdin = std::io::stdin();
        eprint!("> ");
        for line in stdin.lock().lines() {
            let line = line?;
            if !line.trim().is_empty() {
                match searcher.search(&line) {
                    Ok(hits) => print(&mut stdout.lock(), &hits)?,
                    Err(e) => eprintln!("error: {e}"),
                }
            }
            eprint!("> ");
        }
        eprintln!();
    } else {
        bail!("give --query, --queries with --run, or --repl");
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn noisy_file(cond: &TestCondition) -> String {
    format!("test.{}.jsonl", cond.name)
}

fn eval(ws: &mut Workspace, output: Option<PathBuf>) -> Result<()> {
    validated(ws)?;
    let bench = ws.benchmark()?;
    let conditions = pipeline::test_conditions(&ws.config, &bench)?;
    for cond in &conditions {
        if let Some(meta) = &cond.meta {
            let set = NoisyTestSet {
                queries: cond.queries.clone(),
                meta: meta.clone(),
            };
            set.save(bench.corpus(), &ws.path(&noisy_file(cond)))?;
        }
    }
    let mut models = BTreeMap::new();
    for name in &ws.config.eval.systems {
        let system = System::from_name(name)?;
        let ckpt = checkpoint_name(system);
        if system.is_generative() && ws.manifest.artifacts.contains_key(&ckpt) {
            ws.require(&[&ckpt])?;
            models.insert(system, ws.load_model(&ckpt, Stage::Train)?.0);
        }
    }
    let report = pipeline::run_experiment_matrix(&ws.config, &bench, &conditions, &models)?;
    let path = output.unwrap_or_else(|| ws.path(REPORT));
    report.save(&path)?;
    write_text(&path.with_extension("txt"), &report.to_table())?;
    ws.record(REPORT, Stage::Eval);
    ws.commit()?;
    print!("{}", report.to_table());
    Ok(())
}
