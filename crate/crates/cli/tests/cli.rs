use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
docs = 24

[model]
d_model = 16
d_ff = 32

[train]
epochs = 2

[scl]
steps = 10
batch_size = 8

[eval]
wer_targets = [0.15]
"#;

fn genret(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genret"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = genret(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_chain(dir: &Path) {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let cfg = config.to_str().unwrap();
    ok(dir, &["--config", cfg, "--seed", "5", "gen-corpus"]);
    ok(dir, &["build-docids"]);
    ok(dir, &["qgen"]);
    ok(dir, &["prepare-training"]);
    ok(dir, &["pretrain", "--system", "full"]);
    ok(dir, &["train", "--all"]);
    ok(dir, &["eval"]);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_chain_is_reproducible_and_writes_run_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_chain(a.path());
    run_chain(b.path());

    let fa = artifacts(a.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["corpus.jsonl", "docids.tsv", "q.jsonl", "full.ckpt", "report.json", "manifest.json"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(fa, artifacts(b.path()), "artifacts differ between identical runs");

    let report = fs::read_to_string(a.path().join("report.json")).unwrap();
    assert!(report.contains("\"wer-0.15\""));

    let top = ok(a.path(), &["search", "--system", "bm25", "--query", "the", "--top-k", "3"]);
    assert!(top.lines().count() <= 3);

    let queries = a.path().join("queries.tsv");
    let test = fs::read_to_string(a.path().join("test.jsonl")).unwrap();
    let mut tsv = String::new();
    for line in test.lines().take(4) {
        let q: serde_json::Value = serde_json::from_str(line).unwrap();
        tsv.push_str(&format!("{}\t{}\n", q["id"].as_str().unwrap(), q["text"].as_str().unwrap()));
    }
    fs::write(&queries, tsv).unwrap();
    let run = a.path().join("full.run");
    ok(
        a.path(),
        &["search", "--queries", queries.to_str().unwrap(), "--run", run.to_str().unwrap(), "--top-k", "5"],
    );
    let run = fs::read_to_string(run).unwrap();
    let lines: Vec<&str> = run.lines().collect();
    assert_eq!(lines.len(), 20);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert_eq!(fields[1].parse::<usize>().unwrap(), i % 5 + 1);
        assert!(fields[3].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = genret(dir.path(), &["gen-corpus", "--docs", "8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn stale_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "1", "gen-corpus", "--docs", "12"]);
    let out = genret(dir.path(), &["--seed", "2", "build-docids"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("corpus.jsonl"), "{err}");
}
