use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[synth]
n_artists = 15
n_songs_per_artist = 3
word_inventory = 120
n_train = 400
n_heldout = 30
n_test = 30

[ngram]
folds = 3

[reranker]
d_emb = 6
lstm_dim = 6
d_m = 2
d_f = 2
d_xp = 2
d_ip = 2
d_hidden = 6

[train]
lr = 0.2
max_epochs = 2

[lstm_lm]
d_emb = 6
hidden = 8

[lstm_lm.train]
max_epochs = 2
"#;

fn kbrerank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbrerank"))
        .args(args)
        .arg("--config")
        .arg(dir.join("small.toml"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kbrerank(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = kbrerank(dir, args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn stages_then_evaluate() {
    let dir = setup();
    let d = dir.path();
    for stage in [
        "synth-world",
        "build-vocab",
        "build-kb-index",
        "train-ngram",
        "gen-negatives",
        "extract-features",
        "train-reranker",
        "train-lstm-lm",
    ] {
        ok(d, &[stage]);
    }
    let summary = ok(d, &["evaluate"]);
    for row in ["first-pass", "ngram", "lstm", "reranker", "reranker+lstm", "oracle"] {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{row} "))), "{row} missing:\n{summary}");
    }
    let reranked = ok(d, &["rerank", "--input", d.join("out/test.jsonl").to_str().unwrap()]);
    assert_eq!(reranked.lines().count(), 30);
    assert!(failure(d, &["rerank", "--input", "x.jsonl", "--mode", "bogus"]).starts_with("error:"));

    // A vocabulary rebuilt differently no longer matches the trained models.
    ok(d, &["build-vocab", "--set", "vocab.min_count=3"]);
    assert!(failure(d, &["evaluate"]).contains("vocabulary hash mismatch"));
}

#[test]
fn pipeline_rerun_is_identical() {
    let a = setup();
    let b = setup();
    let sa = ok(a.path(), &["pipeline"]);
    let sb = ok(b.path(), &["pipeline"]);
    assert_eq!(sa, sb);
    for f in ["reranker.bin", "lstm_lm.bin", "ngram.bin", "report.csv", "summary.txt", "negatives.jsonl"] {
        let fa = std::fs::read(a.path().join("out").join(f)).unwrap();
        let fb = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(fa == fb, "{f} differs");
    }
    let other = ok(a.path(), &["pipeline", "--seed", "6"]);
    assert_ne!(other, "");
}

#[test]
fn evaluate_requires_references() {
    let dir = setup();
    let d = dir.path();
    let nbest = r#"{"id":"u1","hypotheses":[{"tokens":["play","x"],"first_pass_score":0.0}]}"#;
    std::fs::write(d.join("noref.jsonl"), format!("{nbest}\n")).unwrap();
    let p = d.join("noref.jsonl");
    let heldout = format!("paths.heldout={}", toml_str(&p));
    let test = format!("paths.test={}", toml_str(&p));
    let err = failure(d, &["evaluate", "--set", &heldout, "--set", &test]);
    assert!(err.contains("references required"), "{err}");
}

fn toml_str(p: &Path) -> String {
    format!("\"{}\"", p.display())
}

#[test]
fn bad_config_is_a_one_line_error() {
    let dir = setup();
    let d = dir.path();
    let err = failure(d, &["build-vocab", "--set", "train.learning_rate=2"]);
    assert!(err.starts_with("error:"));
    let err = failure(d, &["build-vocab"]);
    assert!(err.contains("train.txt"), "{err}");
}
