use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use genret::bm25::{bm25_search, Bm25Params, InvertedIndex};
use genret::config::ExperimentConfig;
use genret::model::seq_loss_and_grads;
use genret::pipeline::{init_model, Benchmark, System};
use genret::trie::{constrained_beam_search, PrefixTrie};

fn setup() -> (ExperimentConfig, Benchmark) {
    let config = ExperimentConfig::default().with_seed(1);
    let bench = Benchmark::build(&config).expect("benchmark");
    (config, bench)
}

fn retrieval(c: &mut Criterion) {
    let (config, bench) = setup();
    let model = init_model(&config, bench.corpus(), &bench.docids).unwrap();
    let trie = PrefixTrie::build(&bench.docids).unwrap();
    let query = bench.corpus().vocabulary().encode(&bench.split.test[0].text);
    c.bench_function("beam_search_b10", |b| {
        b.iter(|| constrained_beam_search(&model, black_box(&query), &trie, 10, 10).unwrap())
    });

    let index = InvertedIndex::build(bench.corpus());
    let text = &bench.split.test[0].text;
    c.bench_function("bm25_top10", |b| {
        b.iter(|| bm25_search(&index, black_box(text), 10, Bm25Params::default()).unwrap())
    });

    let examples = bench.training_examples(System::Full);
    let batch: Vec<(&[usize], &[usize])> = examples[..32]
        .iter()
        .map(|e| (e.query.as_slice(), e.docid.as_slice()))
        .collect();
    c.bench_function("train_step_batch32", |b| {
        b.iter(|| seq_loss_and_grads(&model, black_box(&batch)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = retrieval
}
criterion_main!(benches);
