//! End-to-end tests of the `multiverb` binary: every subcommand, the
//! documented exit-code contract, and idempotent outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multiverb"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = bin().args(args).output().expect("spawn multiverb");
    assert!(
        output.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn run_err(args: &[&str]) -> String {
    let output = bin().args(args).output().expect("spawn multiverb");
    assert!(
        !output.status.success(),
        "command {:?} unexpectedly succeeded:\n{}",
        args,
        String::from_utf8_lossy(&output.stdout)
    );
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn path_str(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

/// synth -> build-labels -> split -> train -> eval -> retrieve, end to end.
#[test]
fn full_pipeline_through_the_binary() {
    let dir = TempDir::new().unwrap();
    let synth = dir.path().join("synth");
    let spec = configs_dir().join("synth_separable.json");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&synth),
    ]);

    let vocab = synth.join("vocab.txt");
    let votes = synth.join("votes.txt");
    let features = synth.join("features.txt");

    let labels = dir.path().join("labels");
    let output = run_ok(&[
        "build-labels",
        "--vocab",
        &path_str(&vocab),
        "--votes",
        &path_str(&votes),
        "--out",
        &path_str(&labels),
    ]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    for scheme in ["sl", "ml", "saml"] {
        assert!(stdout.contains(&format!("labels_{scheme}.txt")));
        assert!(labels.join(format!("labels_{scheme}.txt")).exists());
    }

    let folds = dir.path().join("folds.txt");
    run_ok(&[
        "split",
        "--features",
        &path_str(&features),
        "--folds",
        "5",
        "--seed",
        "3",
        "--out",
        &path_str(&folds),
    ]);
    let fold_text = std::fs::read_to_string(&folds).unwrap();
    assert_eq!(fold_text.lines().count(), 80);

    let model = dir.path().join("model.txt");
    run_ok(&[
        "train",
        "--features",
        &path_str(&features),
        "--vocab",
        &path_str(&vocab),
        "--votes",
        &path_str(&votes),
        "--scheme",
        "SAML",
        "--seed",
        "5",
        "--folds-file",
        &path_str(&folds),
        "--holdout",
        "0",
        "--out",
        &path_str(&model),
    ]);
    assert!(model.exists());
    let log = std::fs::read_to_string(model.with_extension("log")).unwrap();
    assert_eq!(log.lines().count(), 101, "header plus one line per epoch");

    let eval_out = dir.path().join("eval");
    let output = run_ok(&[
        "eval",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&features),
        "--vocab",
        &path_str(&vocab),
        "--votes",
        &path_str(&votes),
        "--scheme",
        "SAML",
        "--out",
        &path_str(&eval_out),
    ]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("overlap_saml_alpha0.5"));
    assert!(eval_out.join("overlap_saml_alpha0.5.tsv").exists());
    assert!(eval_out.join("overlap_saml_alpha0.5.json").exists());
    assert!(eval_out.join("v2t_single_verb_saml.tsv").exists());

    // rank verbs for one video
    let v2t = dir.path().join("v2t.tsv");
    run_ok(&[
        "retrieve",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&features),
        "--vocab",
        &path_str(&vocab),
        "--mode",
        "v2t",
        "--video",
        "pour-oil_000",
        "--out",
        &path_str(&v2t),
    ]);
    let ranked = std::fs::read_to_string(&v2t).unwrap();
    assert!(ranked.lines().next().unwrap().contains("pour-oil_000"));
    assert!(
        ranked.lines().nth(2).unwrap().starts_with("1\tpour"),
        "zero-noise SAML model should rank 'pour' first:\n{ranked}"
    );

    // rank videos for a two-verb text query
    let t2v = dir.path().join("t2v.tsv");
    run_ok(&[
        "retrieve",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&features),
        "--vocab",
        &path_str(&vocab),
        "--mode",
        "t2v",
        "--query",
        "pour,fill",
        "--limit",
        "25",
        "--out",
        &path_str(&t2v),
    ]);
    let ranked = std::fs::read_to_string(&t2v).unwrap();
    assert!(
        ranked.lines().nth(2).unwrap().contains("pour-oil"),
        "closest video to the pour+fill query should be a pour-oil segment:\n{ranked}"
    );

    // rank videos against a query video
    let v2v = dir.path().join("v2v.tsv");
    run_ok(&[
        "retrieve",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&features),
        "--vocab",
        &path_str(&vocab),
        "--mode",
        "v2v",
        "--video",
        "stir-pan_004",
        "--out",
        &path_str(&v2v),
    ]);
    let ranked = std::fs::read_to_string(&v2v).unwrap();
    // zero noise makes all stir-pan videos identical, so one of them (the
    // query's clone set) is first at distance 0
    let first = ranked.lines().nth(2).unwrap();
    assert!(first.starts_with("1\tstir-pan_"), "{first}");
    assert!(
        first.ends_with("\t0"),
        "exact match must be at distance 0: {first}"
    );
}

#[test]
fn synth_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let spec = configs_dir().join("synth_separable.json");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&out_a),
    ]);
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&out_b),
    ]);
    for file in ["features.txt", "votes.txt", "vocab.txt"] {
        assert_eq!(
            std::fs::read(out_a.join(file)).unwrap(),
            std::fs::read(out_b.join(file)).unwrap(),
            "{file} differs between identical synth runs"
        );
    }
}

#[test]
fn run_subcommand_writes_manifest_and_clears_stale_marker() {
    let dir = TempDir::new().unwrap();
    let synth = dir.path().join("synth");
    let spec = configs_dir().join("synth_separable.json");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&synth),
    ]);
    let out = dir.path().join("run");
    run_ok(&[
        "run",
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--votes",
        &path_str(&synth.join("votes.txt")),
        "--features",
        &path_str(&synth.join("features.txt")),
        "--out",
        &path_str(&out),
        "--epochs",
        "10",
        "--seed",
        "11",
    ]);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("reports.json").exists());
    assert!(out.join("accuracy.txt").exists());
    assert!(
        !out.join("STALE").exists(),
        "stale marker must be removed on success"
    );
}

#[test]
fn missing_vocab_file_fails_before_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("labels");
    let stderr = run_err(&[
        "build-labels",
        "--vocab",
        &path_str(&dir.path().join("nope.txt")),
        "--votes",
        &path_str(&dir.path().join("votes.txt")),
        "--out",
        &path_str(&out),
    ]);
    assert!(stderr.contains("vocabulary"), "stderr: {stderr}");
    assert!(!out.exists(), "no partial output on failure");
}

#[test]
fn ml_threshold_failure_names_the_class() {
    let dir = TempDir::new().unwrap();
    let vocab = dir.path().join("vocab.txt");
    let votes = dir.path().join("votes.txt");
    std::fs::write(&vocab, "hold\nturn\n").unwrap();
    std::fs::write(&votes, "weak-class 10 hold:2 turn:3\n").unwrap();
    let stderr = run_err(&[
        "build-labels",
        "--vocab",
        &path_str(&vocab),
        "--votes",
        &path_str(&votes),
        "--out",
        &path_str(&dir.path().join("labels")),
    ]);
    assert!(
        stderr.contains("weak-class"),
        "stderr must name the class: {stderr}"
    );
}

#[test]
fn unknown_query_verb_is_rejected() {
    let dir = TempDir::new().unwrap();
    let synth = dir.path().join("synth");
    let spec = configs_dir().join("synth_separable.json");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&synth),
    ]);
    let model = dir.path().join("model.txt");
    run_ok(&[
        "train",
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--votes",
        &path_str(&synth.join("votes.txt")),
        "--scheme",
        "SL",
        "--epochs",
        "2",
        "--out",
        &path_str(&model),
    ]);
    let stderr = run_err(&[
        "retrieve",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--mode",
        "t2v",
        "--query",
        "pour,zzz",
    ]);
    assert!(
        stderr.contains("zzz"),
        "stderr must name the verb: {stderr}"
    );
}

#[test]
fn cross_dataset_exclusion_on_single_corpus_fails() {
    let dir = TempDir::new().unwrap();
    let synth = dir.path().join("synth");
    let spec = configs_dir().join("synth_separable.json");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&synth),
    ]);
    let model = dir.path().join("model.txt");
    run_ok(&[
        "train",
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--votes",
        &path_str(&synth.join("votes.txt")),
        "--scheme",
        "SAML",
        "--epochs",
        "2",
        "--out",
        &path_str(&model),
    ]);
    // the whole corpus shares one dataset tag, so excluding it empties it
    let stderr = run_err(&[
        "retrieve",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--mode",
        "v2v",
        "--video",
        "open-jar_000",
        "--cross-dataset",
    ]);
    assert!(stderr.contains("empty"), "stderr: {stderr}");
}

#[test]
fn model_trained_on_other_vocabulary_is_rejected() {
    let dir = TempDir::new().unwrap();
    let synth = dir.path().join("synth");
    let spec = configs_dir().join("synth_separable.json");
    run_ok(&[
        "synth",
        "--spec",
        &path_str(&spec),
        "--out",
        &path_str(&synth),
    ]);
    let model = dir.path().join("model.txt");
    run_ok(&[
        "train",
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&synth.join("vocab.txt")),
        "--votes",
        &path_str(&synth.join("votes.txt")),
        "--scheme",
        "SL",
        "--epochs",
        "2",
        "--out",
        &path_str(&model),
    ]);
    // same size, different verbs: fingerprint check must fire
    let other_vocab = dir.path().join("other_vocab.txt");
    std::fs::write(&other_vocab, "a\nb\nc\nd\ne\nf\ng\nh\n").unwrap();
    let stderr = run_err(&[
        "eval",
        "--model",
        &path_str(&model),
        "--features",
        &path_str(&synth.join("features.txt")),
        "--vocab",
        &path_str(&other_vocab),
        "--votes",
        &path_str(&synth.join("votes.txt")),
        "--scheme",
        "SL",
        "--out",
        &path_str(&dir.path().join("eval")),
    ]);
    assert!(stderr.contains("vocabulary"), "stderr: {stderr}");
}
