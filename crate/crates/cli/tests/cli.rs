use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stylex::data::{load_corpus, StyleTask};
use stylex::encoder::EncoderConfig;
use stylex::model::StyleModel;
use stylex::tokenize::Vocabulary;

const TINY: &str = r#"
task = "politeness"
seed = 5

[pipeline]
seed_epochs = 3
joint_epochs = 2

[pipeline.encoder]
hidden_size = 16
num_layers = 1
num_heads = 2
intermediate_size = 32
max_seq_len = 32

[pipeline.optimizer]
learning_rate = 3e-3
batch_size = 8

[classifier.encoder]
hidden_size = 16
num_layers = 1
num_heads = 2
intermediate_size = 32
max_seq_len = 32

[classifier.train]
epochs = 2

[eval]
ig_steps = 8
"#;

fn stylex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylex"))
        .args(args)
        .current_dir(dir)
        .env_remove("STYLEX_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest_metrics(path: PathBuf) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    serde_json::to_string(&v["metrics"]).unwrap()
}

/// Synthetic corpora of 80 train (30 seed) and 30 test sentences.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = stylex(
        dir.path(),
        &["make-synthetic", "-c", "tiny.toml", "--output-dir", "data", "--n", "80", "--test-n", "30", "--seed-size", "30"],
    );
    ok(&out);
    dir
}

#[test]
fn unknown_subcommand_exits_2_with_help() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylex(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("train-seed") && text.contains("make-synthetic"), "{text}");
}

#[test]
fn missing_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylex(dir.path(), &["train-seed", "--seed-corpus", "nope.jsonl", "--output-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let out = stylex(dir.path(), &["train-seed", "--output-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = \"x\"\n").unwrap();
    let out = stylex(dir.path(), &["make-synthetic", "-c", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = stylex(dir.path(), &["make-synthetic", "--task", "formality"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthetic_output_follows_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stylex"))
        .args(["make-synthetic", "--n", "10", "--test-n", "4", "--seed-size", "4"])
        .current_dir(dir.path())
        .env("STYLEX_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed = 42"), "{stdout}");
    assert!(stdout.contains("resolved config:"));
    let base = dir.path().join("from-env");
    let task = StyleTask::builtin("politeness").unwrap();
    assert_eq!(load_corpus(base.join("seed.jsonl"), &task).unwrap().len(), 4);
    assert_eq!(load_corpus(base.join("unlabeled.jsonl"), &task).unwrap().len(), 6);
    assert!(load_corpus(base.join("unlabeled.jsonl"), &task).unwrap().iter().all(|s| s.word_scores.is_none()));
    assert!(base.join("manifest-make-synthetic.json").exists());
}

#[test]
fn train_seed_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    for run in ["a", "b"] {
        ok(&stylex(d, &["train-seed", "-c", "tiny.toml", "--seed-corpus", "data/seed.jsonl", "--output-dir", run]));
        assert!(d.join(run).join("scorer.json").exists());
        assert!(d.join(run).join("manifest-train-seed.json").exists());
    }
    let (a, b) = (
        manifest_metrics(d.join("a/manifest-train-seed.json")),
        manifest_metrics(d.join("b/manifest-train-seed.json")),
    );
    assert_eq!(a, b);
    assert_eq!(std::fs::read(d.join("a/scorer.json")).unwrap(), std::fs::read(d.join("b/scorer.json")).unwrap());
    let manifest = std::fs::read_to_string(d.join("a/manifest-train-seed.json")).unwrap();
    assert!(manifest.contains("\"seed\": 5"));
}

#[test]
fn full_pipeline_and_evaluations() {
    let dir = setup();
    let d = dir.path();
    let input_before = std::fs::read(d.join("data/seed.jsonl")).unwrap();
    let base = ["-c", "tiny.toml", "--output-dir", "run"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(with(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = stylex(d, &refs);
        ok(&out);
        out
    };

    run("train-seed", &["--seed-corpus", "data/seed.jsonl"]);
    run("pseudo-label", &["--checkpoint", "run/scorer.json", "--corpus", "data/unlabeled.jsonl"]);
    let pseudo = load_corpus(d.join("run/pseudo.jsonl"), &StyleTask::builtin("politeness").unwrap()).unwrap();
    assert_eq!(pseudo.len(), 50);
    run(
        "train-joint",
        &["--checkpoint", "run/scorer.json", "--seed-corpus", "data/seed.jsonl", "--pseudo-corpus", "run/pseudo.jsonl"],
    );
    let joint = ["--checkpoint", "run/joint.json"];
    run("explain", &[&joint[..], &["--corpus", "data/test.jsonl"]].concat());
    run("attribute", &[&joint[..], &["--corpus", "data/test.jsonl", "--steps", "4"]].concat());
    run("eval-f1", &[&joint[..], &["--test-corpus", "data/test.jsonl"]].concat());
    run(
        "eval-sufficiency",
        &["--explainer", "random", "--k-fraction", "0.3", "--corpus", "data/train.jsonl", "--test-corpus", "data/test.jsonl"],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/sufficiency.json")).unwrap()).unwrap();
    assert_eq!(report["k_fraction"], 0.3);
    let train = load_corpus(d.join("data/train.jsonl"), &StyleTask::builtin("politeness").unwrap()).unwrap();
    let avg = train.iter().map(|s| s.words.len()).sum::<usize>() as f64 / train.len() as f64;
    assert_eq!(report["avg_sentence_length"].as_f64().unwrap(), avg);

    std::fs::write(d.join("politeness.txt"), "great\nthanks\nplease\nkindly\n").unwrap();
    run("eval-plausibility", &[&joint[..], &["--test-corpus", "data/test.jsonl", "--lexicon", "politeness.txt"]].concat());
    run("eval-overlap", &["--explainer", "oracle", "--corpus", "data/train.jsonl", "--lexicon", "politeness.txt"]);
    run("export-pairs", &[&joint[..], &["--test-corpus", "data/test.jsonl", "--n", "20"]].concat());
    let pairs = std::fs::read_to_string(d.join("run/pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 20);
    run("render-html", &[&joint[..], &["--corpus", "data/test.jsonl", "--with-baseline"]].concat());
    let html = std::fs::read_to_string(d.join("run/explanations.html")).unwrap();
    assert!(html.contains("class=\"legend\"") && html.contains("baseline"));

    for file in [
        "explanations.jsonl",
        "attributions.jsonl",
        "f1.json",
        "plausibility.json",
        "overlap.json",
        "pairs_key.json",
        "manifest-eval-overlap.json",
    ] {
        assert!(d.join("run").join(file).exists(), "{file}");
    }
    assert_eq!(std::fs::read(d.join("data/seed.jsonl")).unwrap(), input_before);

    // A checkpoint for another task is a configuration error.
    let out = stylex(d, &["eval-f1", "--task", "anger", "--checkpoint", "run/joint.json", "--test-corpus", "data/test.jsonl", "--output-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

fn stub_checkpoint(dir: &Path, favored: usize) -> PathBuf {
    let task = StyleTask::builtin("politeness").unwrap();
    let vocab = Vocabulary::build(&[vec!["x".to_string()]], 1);
    let cfg = EncoderConfig {
        hidden_size: 8,
        num_layers: 1,
        num_heads: 2,
        intermediate_size: 16,
        max_seq_len: 32,
        ..EncoderConfig::default()
    };
    let mut model = StyleModel::new(task, vocab, cfg, 0.05, 0).unwrap();
    let bias = model.params.get_mut(model.heads.sentence_b);
    bias[[0, favored]] = 50.0;
    bias[[0, 1 - favored]] = -50.0;
    let path = dir.join(format!("stub{favored}.json"));
    stylex::checkpoint::save(&model, &path).unwrap();
    path
}

#[test]
fn eval_f1_delegates_to_the_metric() {
    let dir = setup();
    let d = dir.path();
    let test = load_corpus(d.join("data/test.jsonl"), &StyleTask::builtin("politeness").unwrap()).unwrap();
    let gold: Vec<usize> = test.iter().map(|s| s.sentence_label).collect();
    for favored in [0, 1] {
        let ckpt = stub_checkpoint(d, favored);
        let out_dir = format!("f{favored}");
        ok(&stylex(
            d,
            &["eval-f1", "--checkpoint", ckpt.to_str().unwrap(), "--test-corpus", "data/test.jsonl", "--output-dir", &out_dir],
        ));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(&out_dir).join("f1.json")).unwrap()).unwrap();
        let expected = stylex::eval::f1(&vec![favored; gold.len()], &gold, 0).unwrap();
        assert_eq!(report["f1"].as_f64().unwrap(), expected);
        if favored == 1 {
            assert_eq!(expected, 0.0);
        }
    }
}
