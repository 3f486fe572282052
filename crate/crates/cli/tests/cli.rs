use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn csdr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csdr"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CSDR_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn csdr")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = csdr(args, cwd);
    assert!(
        out.status.success(),
        "csdr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    csdr(args, cwd).status.code().expect("exit code")
}

/// A small synthetic dataset under `<tmp>/data`.
fn dataset() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["gen-synthetic", "--topics", "3", "--vocab-size", "60", "--pairs", "120", "--seed", "5", "--out", "data"],
        tmp.path(),
    );
    tmp
}

const TRAIN: &[&str] = &[
    "--corpus",
    "data/corpus.txt",
    "--pairs",
    "data/pairs.tsv",
    "--embed-dim",
    "8",
    "--pretrain-epochs",
    "1",
    "--finetune-epochs",
    "2",
    "--batch-size",
    "16",
];

fn finetune(cwd: &Path, run_dir: &str, extra: &[&str]) {
    let mut args = vec!["finetune", "--run-dir", run_dir];
    args.extend_from_slice(TRAIN);
    args.extend_from_slice(extra);
    ok(&args, cwd);
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const RUN_FILES: &[&str] = &[
    "checkpoint.bin",
    "config.resolved.json",
    "history.jsonl",
    "history.pretrain.jsonl",
    "report.json",
    "table.txt",
    "vocab.txt",
];

#[test]
fn same_seed_runs_are_byte_identical() {
    let tmp = dataset();
    finetune(tmp.path(), "a", &["--seed", "7"]);
    finetune(tmp.path(), "b", &["--seed", "7"]);
    finetune(tmp.path(), "c", &["--seed", "8"]);
    for f in RUN_FILES {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)), "{f}");
    }
    assert_ne!(
        read(tmp.path().join("a/checkpoint.bin")),
        read(tmp.path().join("c/checkpoint.bin"))
    );
}

#[test]
fn resolved_config_replays_identically() {
    let tmp = dataset();
    let data = tmp.path().join("data");
    let abs = |f: &str| data.join(f).to_str().unwrap().to_owned();
    let (corpus, pairs) = (abs("corpus.txt"), abs("pairs.tsv"));
    ok(
        &[
            "finetune", "--run-dir", "first", "--corpus", &corpus, "--pairs", &pairs,
            "--embed-dim", "8", "--pretrain-epochs", "1", "--finetune-epochs", "2",
            "--batch-size", "16", "--seed", "11", "--best-threshold",
        ],
        tmp.path(),
    );
    let out = Command::new(env!("CARGO_BIN_EXE_csdr"))
        .args(["finetune", "--config", "first/config.resolved.json", "--run-dir", "second"])
        .current_dir(tmp.path())
        .env("CSDR_SEED", "999")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in RUN_FILES {
        assert_eq!(
            read(tmp.path().join("first").join(f)),
            read(tmp.path().join("second").join(f)),
            "{f}"
        );
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = dataset();
    let mut args = vec!["finetune", "--run-dir", "env", "--no-pretrain", "--no-knn"];
    args.extend_from_slice(TRAIN);
    let out = Command::new(env!("CARGO_BIN_EXE_csdr"))
        .args(&args)
        .current_dir(tmp.path())
        .env("CSDR_SEED", "31")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: serde_json::Value =
        serde_json::from_slice(&read(tmp.path().join("env/config.resolved.json"))).unwrap();
    assert_eq!(cfg["seed"], 31);
    assert_eq!(cfg["use_pretrain"], false);
    assert_eq!(cfg["use_knn"], false);
    assert!(!tmp.path().join("env/history.pretrain.jsonl").exists());
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let meta = fs::metadata(&p).unwrap();
            (p.clone(), fs::read(&p).unwrap(), meta.modified().unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn inputs_are_not_modified() {
    let tmp = dataset();
    let data = tmp.path().join("data");
    let before = snapshot(&data);
    finetune(tmp.path(), "run", &["--seed", "2"]);
    ok(&["pretrain", "--run-dir", "pre", "--corpus", "data/corpus.txt", "--embed-dim", "8", "--pretrain-epochs", "1"], tmp.path());
    ok(&["evaluate", "--run-dir", "ev", "--model", "run", "--pairs", "data/pairs.tsv", "--seed", "2"], tmp.path());
    ok(&["index", "--run-dir", "idx", "--model", "run", "--docs", "data/corpus.txt"], tmp.path());
    ok(&["query", "--index", "idx", "--k", "2", "anything"], tmp.path());
    ok(&["build-vocab", "--corpus", "data/corpus.txt", "--out", "v.txt"], tmp.path());
    let model_before = snapshot(&tmp.path().join("run"));
    ok(&["finetune", "--run-dir", "ft2", "--model", "run", "--pairs", "data/pairs.tsv", "--finetune-epochs", "1"], tmp.path());
    assert_eq!(snapshot(&data), before);
    assert_eq!(snapshot(&tmp.path().join("run")), model_before);
}

#[test]
fn exit_codes_per_subcommand() {
    let tmp = dataset();
    let p = tmp.path();
    // usage errors
    assert_eq!(code(&[], p), 2);
    assert_eq!(code(&["frobnicate"], p), 2);
    assert_eq!(code(&["finetune", "--bogus"], p), 2);
    assert_eq!(code(&["query", "--index", "x"], p), 2);
    // missing or bad inputs
    assert_eq!(code(&["build-vocab", "--corpus", "missing.txt", "--out", "v.txt"], p), 2);
    assert_eq!(code(&["gen-synthetic", "--topics", "1", "--out", "g"], p), 2);
    assert_eq!(code(&["pretrain", "--run-dir", "r"], p), 2);
    assert_eq!(code(&["finetune", "--run-dir", "r", "--pairs", "missing.tsv", "--no-pretrain"], p), 2);
    assert_eq!(code(&["finetune", "--run-dir", "r", "--pairs", "data/pairs.tsv"], p), 2);
    assert_eq!(code(&["evaluate", "--run-dir", "r"], p), 2);
    assert_eq!(code(&["index", "--run-dir", "r", "--model", "nowhere", "--docs", "data/corpus.txt"], p), 2);
    assert_eq!(code(&["query", "--index", "nowhere", "text"], p), 2);
    assert_eq!(code(&["ablate", "--run-dir", "r", "--pairs", "data/pairs.tsv"], p), 2);
    fs::write(p.join("bad.json"), r#"{"sed": 3}"#).unwrap();
    assert_eq!(code(&["finetune", "--run-dir", "r", "--config", "bad.json"], p), 2);
    fs::write(p.join("bad.tsv"), "only one column\n").unwrap();
    assert_eq!(code(&["finetune", "--run-dir", "r", "--pairs", "bad.tsv", "--no-pretrain"], p), 2);
    assert!(!p.join("r").exists(), "input errors must not create the run directory");

    // runtime failure: a best threshold is undefined on single-class pairs
    finetune(p, "model", &[]);
    let positives: String = fs::read_to_string(p.join("data/pairs.tsv"))
        .unwrap()
        .lines()
        .filter(|l| l.ends_with("\t1"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(p.join("pos.tsv"), positives).unwrap();
    let args = ["evaluate", "--run-dir", "fail", "--model", "model", "--eval-pairs", "pos.tsv", "--best-threshold"];
    assert_eq!(code(&args, p), 1);
    assert!(p.join("fail/FAILED").exists());
    // a later successful run in the same directory clears the sentinel
    ok(&["evaluate", "--run-dir", "fail", "--model", "model", "--eval-pairs", "pos.tsv"], p);
    assert!(!p.join("fail/FAILED").exists());
}

#[test]
fn query_with_k_beyond_index_size_returns_everything() {
    let tmp = dataset();
    finetune(tmp.path(), "run", &[]);
    let corpus = fs::read_to_string(tmp.path().join("data/corpus.txt")).unwrap();
    let docs: Vec<&str> = corpus.lines().take(3).collect();
    fs::write(tmp.path().join("docs.txt"), docs.join("\n")).unwrap();
    ok(&["index", "--run-dir", "idx", "--model", "run", "--docs", "docs.txt"], tmp.path());
    let out = ok(&["query", "--index", "idx", "--k", "10", docs[1]], tmp.path());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "rank\tscore\tdoc_id\ttext");
    assert_eq!(lines.len(), 4);
    let first: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[2], "1");
    assert_eq!(first[3], docs[1]);
}

#[test]
fn gen_synthetic_is_balanced_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        ok(&["gen-synthetic", "--topics", "4", "--vocab-size", "100", "--pairs", "50", "--seed", "9", "--out", dir], tmp.path());
    }
    for f in ["corpus.txt", "pairs.tsv", "manifest.json"] {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)), "{f}");
    }
    let pairs = fs::read_to_string(tmp.path().join("a/pairs.tsv")).unwrap();
    let labels: Vec<&str> = pairs.lines().map(|l| l.rsplit('\t').next().unwrap()).collect();
    assert_eq!(labels.len(), 50);
    assert_eq!(labels.iter().filter(|&&l| l == "1").count(), 25);
}

#[test]
fn build_vocab_reruns_identically() {
    let tmp = dataset();
    let p = tmp.path();
    let out = ok(&["build-vocab", "--corpus", "data/corpus.txt", "--out", "v1.txt"], p);
    assert!(out.contains("tokens"));
    ok(&["build-vocab", "--corpus", "data/corpus.txt", "--out", "v2.txt"], p);
    assert_eq!(read(p.join("v1.txt")), read(p.join("v2.txt")));
    let vocab = fs::read_to_string(p.join("v1.txt")).unwrap();
    assert_eq!(vocab.lines().next(), Some("[PAD]"));
}

#[test]
fn ablate_writes_six_rows() {
    let tmp = dataset();
    let mut args = vec!["ablate", "--run-dir", "abl", "--seed", "4"];
    args.extend_from_slice(TRAIN);
    let out = ok(&args, tmp.path());
    let table = fs::read_to_string(tmp.path().join("abl/table.txt")).unwrap();
    assert_eq!(out, table);
    assert_eq!(table.lines().count(), 8);
    let rows: serde_json::Value =
        serde_json::from_slice(&read(tmp.path().join("abl/report.json"))).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);
}

#[test]
fn selftest_passes_and_writes_junit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["selftest", "--trials", "3", "--repeats", "1", "--junit", "report.xml"], tmp.path());
    assert!(out.contains("selftest passed"));
    let xml = fs::read_to_string(tmp.path().join("report.xml")).unwrap();
    assert!(xml.starts_with("<?xml"));
    assert!(xml.contains("failures=\"0\""));
}
