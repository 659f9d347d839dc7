use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tensorized::attention::{compression_ratio_rank, AttentionKind, AttentionMode};
use tensorized::checkpoint::save_checkpoint;
use tensorized::model::{build_model, ModelConfig};
use tensorized::training::{Adam, AdamConfig, VocabSpec, Vocabulary};
use tensorized::Matrix;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tensorized"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

const TEXT: &str = "the quick brown fox jumps over the lazy dog.\n\
                    a stitch in time saves nine; look before you leap.\n\
                    all that glitters is not gold, but the fox knows.\n";

fn corpus(dir: &Path) -> PathBuf {
    let p = dir.join("corpus.txt");
    std::fs::write(&p, TEXT.repeat(6)).unwrap();
    p
}

fn small_config(dir: &Path, attention: &str) -> PathBuf {
    let p = dir.join(format!("{attention}.json"));
    let cfg = serde_json::json!({
        "corpus": corpus(dir),
        "out_dir": dir.join(attention),
        "val_fraction": 0.2,
        "model": {
            "layers": 1, "d_model": 16, "d": 8, "heads": 2, "rank": 6, "d_ff": 32,
            "dropout": 0.1, "attention": attention
        },
        "train": {
            "batch_size": 4, "seq_len": 16, "epochs": 2, "warmup_steps": 20,
            "max_steps": 12, "seed": 3
        }
    });
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn analyze_reports_headline_ratio() {
    let o = run(&["analyze", "--heads", "8", "--d-model", "512"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text
        .lines()
        .find(|l| l.starts_with("compression.ratio_full_rank_formula"))
        .unwrap();
    let ratio: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(format!("{ratio:.2}"), "7.96");
}

#[test]
fn analyze_ptb_twins_and_format_parity() {
    let args = ["analyze", "--d-model", "256", "--heads", "2", "--d", "40", "--rank", "40", "--layers", "3", "--d-ff", "2100"];
    let j = json(&run(&[&args[..], &["--format", "json"]].concat()));
    assert_eq!(j["attention.multi_head.projection_params"], 61440);
    assert_eq!(j["attention.multi_linear.projection_params"], 30800);
    let csv_out = stdout(&run(&[&args[..], &["--format", "csv"]].concat()));
    let mut reader = csv::Reader::from_reader(csv_out.as_bytes());
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let v = &j[&rec[0]];
        let shown = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        assert_eq!(shown, &rec[1], "{}", &rec[0]);
        n += 1;
    }
    assert_eq!(n, j.as_object().unwrap().len());
}

#[test]
fn analyze_rejects_invalid_dims() {
    let o = run(&["analyze", "--d", "40", "--rank", "41"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["analyze", "--heads", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_all_passes() {
    let o = run(&["verify", "--suite", "all", "--trials", "100", "--seed", "7"]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("properties passed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn verify_selector_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--suite", "corollary", "--trials", "10", "--format", "json", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let j = json(&o);
    let results = j["results"].as_array().unwrap();
    assert!(!results.is_empty());
    assert!(results.iter().all(|r| r["suite"] == "corollary"));
    assert_eq!(read_json(&dir.path().join("verify.json")), j);

    let o = run(&["verify", "--suite", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["verify", "--suite", "span", "--trials", "5", "--format", "csv"]);
    assert!(stdout(&o).starts_with("suite,property,trials,max_error,tolerance,passed"));
}

#[test]
fn train_then_eval_reproduces_validation_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "multi_linear");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("multi_linear");
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["steps"], 12);
    assert_eq!(summary["config"]["train"]["deterministic"], true);
    assert_eq!(summary["params"]["total"], summary["params"]["embedding"].as_u64().unwrap()
        + summary["params"]["attention"].as_u64().unwrap()
        + summary["params"]["ffn"].as_u64().unwrap()
        + summary["params"]["norms"].as_u64().unwrap()
        + summary["params"]["output"].as_u64().unwrap());
    assert!(out.join("model.ttlm").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,train_loss,val_ppl,elapsed_s\n"));
    assert_eq!(metrics.lines().count(), 13);

    let model = out.join("model.ttlm");
    let corpus = dir.path().join("corpus.txt");
    let e = json(&run(&[
        "eval", "--checkpoint", model.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(),
        "--split", "val", "--val-fraction", "0.2", "--format", "json",
    ]));
    assert_eq!(e["ppl"].as_f64().unwrap().to_bits(), summary["val"]["ppl"].as_f64().unwrap().to_bits());
    assert_eq!(e["tokens"], summary["val"]["tokens"]);

    // Same seed, same run.
    let again = dir.path().join("again");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    let a = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let b = std::fs::read_to_string(again.join("metrics.csv")).unwrap();
    let strip = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(std::fs::read(out.join("model.ttlm")).unwrap(), std::fs::read(again.join("model.ttlm")).unwrap());
}

#[test]
fn twin_summaries_match_rank_formula() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for kind in ["multi_linear", "multi_head"] {
        let cfg = small_config(dir.path(), "multi_linear");
        let out = dir.path().join(format!("twin-{kind}"));
        let o = run(&[
            "train", "--config", cfg.to_str().unwrap(), "--attention", kind, "--out",
            out.to_str().unwrap(), "--max-steps", "2", "--format", "json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s = read_json(&out.join("summary.json"));
        assert_eq!(s["model"]["attention"], kind);
        counts.push(s["attention_projection_params"].as_u64().unwrap() as f64);
    }
    let formula = compression_ratio_rank(2, 16, 8, 6).unwrap();
    assert!((counts[1] / counts[0] - formula).abs() < 1e-12);
}

#[test]
fn missing_corpus_and_bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = run(&["train", "--corpus", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.txt"), "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"layers": 1, "unknown_knob": 2}}"#).unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_knob"));

    let o = run(&["train", "--corpus", missing.to_str().unwrap(), "--rank", "99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rank 99"));
}

#[test]
fn zero_epochs_write_summary_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "multi_linear");
    let first = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(first.status.success());
    let ck = dir.path().join("multi_linear/model.ttlm");
    let before = std::fs::read(&ck).unwrap();

    let mut rc = read_json(&cfg);
    rc["checkpoint"] = ck.to_str().unwrap().into();
    rc["out_dir"] = dir.path().join("resume").to_str().unwrap().into();
    let resume = dir.path().join("resume.json");
    std::fs::write(&resume, serde_json::to_vec(&rc).unwrap()).unwrap();
    let o = run(&["train", "--config", resume.to_str().unwrap(), "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("resume");
    assert!(out.join("summary.json").exists());
    assert!(!out.join("model.ttlm").exists());
    assert!(!out.join("metrics.csv").exists());
    assert_eq!(std::fs::read(&ck).unwrap(), before);
    assert_eq!(read_json(&out.join("summary.json"))["steps"], 0);
}

fn fixture_checkpoint(dir: &Path, uniform: bool) -> (PathBuf, Vocabulary) {
    let vocab = Vocabulary::build(TEXT, VocabSpec::char()).unwrap();
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        d: 4,
        heads: 2,
        rank: 4,
        d_ff: 8,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        dropout: 0.0,
        attention: AttentionKind::MultiLinear,
        mode: AttentionMode::Chunked,
        tie_embeddings: false,
        scale_embeddings: true,
        seed: 1,
    };
    let mut m = build_model::<f32>(&cfg).unwrap();
    if uniform {
        let id = m.params().find("output").unwrap();
        *m.params_mut().get_mut(id) = Matrix::zeros(8, vocab.len());
    }
    let adam = Adam::new(m.params(), AdamConfig::default());
    let p = dir.join("fixture.ttlm");
    save_checkpoint(&p, &m, &adam, Some(&vocab)).unwrap();
    (p, vocab)
}

#[test]
fn uniform_fixture_has_vocab_size_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, vocab) = fixture_checkpoint(dir.path(), true);
    let c = corpus(dir.path());
    let e = json(&run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--corpus", c.to_str().unwrap(), "--format", "json"]));
    assert!((e["ppl"].as_f64().unwrap() - vocab.len() as f64).abs() < 1e-6);
    assert_eq!(e["vocab_fingerprint"], vocab.fingerprint());
}

#[test]
fn prefix_and_full_corpus_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = fixture_checkpoint(dir.path(), false);
    let full = corpus(dir.path());
    let prefix = dir.path().join("prefix.txt");
    std::fs::write(&prefix, &TEXT[..100]).unwrap();
    let f = json(&run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--corpus", full.to_str().unwrap(), "--format", "json"]));
    let p = json(&run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--corpus", prefix.to_str().unwrap(), "--format", "json"]));
    assert_eq!(p["tokens"], 99);
    assert_eq!(f["tokens"], TEXT.len() * 6 - 1);
    assert!(f["ppl"].as_f64().unwrap().is_finite() && p["ppl"].as_f64().unwrap().is_finite());
}

#[test]
fn incompatible_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, vocab) = fixture_checkpoint(dir.path(), false);
    let other = dir.path().join("other.txt");
    std::fs::write(&other, "QXZ! unseen characters\n").unwrap();
    let o = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--corpus", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains(&vocab.fingerprint()), "{err}");
    let corpus_fp = Vocabulary::build("QXZ! unseen characters\n", VocabSpec::char()).unwrap().fingerprint();
    assert!(err.contains(&corpus_fp), "{err}");

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[4] = 2;
    let future = dir.path().join("future.ttlm");
    std::fs::write(&future, &bytes).unwrap();
    let c = corpus(dir.path());
    let o = run(&["eval", "--checkpoint", future.to_str().unwrap(), "--corpus", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    bytes[4] = 1;
    bytes[0] = b'X';
    std::fs::write(&future, &bytes).unwrap();
    let o = run(&["eval", "--checkpoint", future.to_str().unwrap(), "--corpus", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}
