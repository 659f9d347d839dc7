//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the lines always reach stdout in order. The
//! desk-scale training criterion dominates the runtime; set
//! `ACCEPTANCE_TRAIN_STEPS` to shorten it for a smoke run.

use std::process::ExitCode;
use std::time::Instant;

use tensorized::attention::{
    compression_ratio_rank, count_attention_params, AttentionKind, AttentionMode,
};
use tensorized::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use tensorized::model::{build_model, ModelConfig};
use tensorized::training::{
    evaluate_ppl, load_corpus, split_ids, train, Adam, AdamConfig, TrainConfig, VocabSpec,
};
use tensorized::verify::{run_suite, PropertyResult, Suite};

const SEED: u64 = 7;
const TRIALS: usize = 100;
const DEFAULT_TRAIN_STEPS: u64 = 1200;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

/// Runs one suite and checks the selected properties, their minimum trial
/// counts and the runtime limit.
fn suite_criterion(suite: Suite, select: &[&str], min_trials: usize, limit_secs: f64) -> Outcome {
    let start = Instant::now();
    let report = match run_suite(suite, SEED, TRIALS) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("suite {suite} failed to run: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let chosen: Vec<&PropertyResult> = report
        .results
        .iter()
        .filter(|r| select.is_empty() || select.iter().any(|s| r.name.starts_with(s)))
        .collect();
    let mut problems = Vec::new();
    if chosen.is_empty() {
        problems.push("no properties selected".to_string());
    }
    for r in &chosen {
        if !r.passed {
            problems.push(format!("{} error {:.3e} > {:.0e}", r.name, r.max_error, r.tolerance));
        }
        // Single closed-form checks record one trial by design.
        if r.trials > 1 && r.trials < min_trials {
            problems.push(format!("{} ran {} trials < {min_trials}", r.name, r.trials));
        }
    }
    if secs >= limit_secs {
        problems.push(format!("runtime {secs:.2}s >= {limit_secs}s"));
    }
    let worst = chosen
        .iter()
        .map(|r| if r.tolerance > 0.0 { r.max_error / r.tolerance } else { r.max_error })
        .fold(0.0f64, f64::max);
    let summary = format!("{} properties, worst error/tolerance {worst:.3e}, {secs:.2}s", chosen.len());
    if problems.is_empty() {
        Outcome::new(true, summary)
    } else {
        Outcome::new(false, format!("{summary}; {}", problems.join("; ")))
    }
}

fn desk_config(kind: AttentionKind, vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 3,
        d_model: 128,
        d: 40,
        heads: 2,
        rank: 40,
        d_ff: 512,
        vocab_size: vocab,
        max_seq_len: 64,
        dropout: 0.1,
        attention: kind,
        mode: AttentionMode::Chunked,
        tie_embeddings: false,
        scale_embeddings: true,
        seed: 1,
    }
}

fn desk_training() -> Outcome {
    let steps = std::env::var("ACCEPTANCE_TRAIN_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_TRAIN_STEPS);
    let corpus = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");
    let (vocab, ids) = match load_corpus(corpus, VocabSpec::char()) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("corpus: {e}")),
    };
    let (train_ids, val_ids) = match split_ids(&ids, 0.1) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("split: {e}")),
    };
    // Identical budget for both models: same steps, batches and schedule.
    // The wall-clock guard keeps each run inside 30 CPU-minutes.
    let tc = TrainConfig {
        batch_size: 16,
        seq_len: 64,
        epochs: 100,
        warmup_steps: 400,
        max_steps: Some(steps),
        time_budget_secs: Some(30.0 * 60.0),
        ..TrainConfig::default()
    };

    let mut ppl = Vec::new();
    let mut attention = Vec::new();
    let mut times = Vec::new();
    for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
        let cfg = desk_config(kind, vocab.len());
        let start = Instant::now();
        let run = build_model::<f32>(&cfg).and_then(|mut model| {
            let mut adam = Adam::new(model.params(), AdamConfig::default());
            let report = train(&mut model, &mut adam, train_ids, None, &tc, |_, _, _| Ok(()))?;
            let eval = evaluate_ppl(&model, val_ids, tc.seq_len)?;
            Ok((report, eval, model.count_parameters()))
        });
        let (report, eval, counts) = match run {
            Ok(v) => v,
            Err(e) => return Outcome::new(false, format!("{kind}: {e}")),
        };
        times.push((report.steps, start.elapsed().as_secs_f64()));
        ppl.push(eval.ppl);
        attention.push(counts.attention);
    }
    let (ml, mh) = (ppl[0], ppl[1]);
    let uniform = vocab.len() as f64;

    let dims = desk_config(AttentionKind::MultiLinear, vocab.len()).attention_dims();
    let projection_ratio = count_attention_params(AttentionKind::MultiHead, dims, false) as f64
        / count_attention_params(AttentionKind::MultiLinear, dims, false) as f64;
    let formula = compression_ratio_rank(2, 128, 40, 40).unwrap_or(f64::NAN);

    let a = ml * 5.0 <= uniform;
    let b = ml <= mh * 1.15;
    let c = attention[0] < attention[1] && (projection_ratio - formula).abs() <= 1e-9;
    let detail = format!(
        "(a) {} val ppl {ml:.3} vs uniform {uniform} / 5 = {:.3}; \
         (b) {} twin ppl {mh:.3}, ratio {:.3} (limit 1.15); \
         (c) {} attention params {} vs {}, projection ratio {projection_ratio:.6} vs formula {formula:.6}; \
         steps {} / {}, {:.0}s / {:.0}s",
        if a { "ok" } else { "FAIL" },
        uniform / 5.0,
        if b { "ok" } else { "FAIL" },
        ml / mh,
        if c { "ok" } else { "FAIL" },
        attention[0],
        attention[1],
        times[0].0,
        times[1].0,
        times[0].1,
        times[1].1,
    );
    Outcome::new(a && b && c, detail)
}

fn checkpoint_round_trip() -> Outcome {
    let start = Instant::now();
    let text: String = "the quick brown fox jumps over the lazy dog. ".repeat(40);
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, format!("tempdir: {e}")),
    };
    let corpus = dir.path().join("c.txt");
    let path = dir.path().join("m.ttlm");
    let run = (|| {
        std::fs::write(&corpus, &text).map_err(|e| e.to_string())?;
        let (vocab, ids) = load_corpus(&corpus, VocabSpec::char()).map_err(|e| e.to_string())?;
        let mut cfg = desk_config(AttentionKind::MultiLinear, vocab.len());
        cfg.layers = 1;
        cfg.d_model = 16;
        cfg.d = 8;
        cfg.rank = 8;
        cfg.d_ff = 32;
        cfg.max_seq_len = 16;
        let mut model = build_model::<f32>(&cfg).map_err(|e| e.to_string())?;
        let mut adam = Adam::new(model.params(), AdamConfig::default());
        let tc = TrainConfig {
            batch_size: 4,
            seq_len: 16,
            warmup_steps: 10,
            max_steps: Some(5),
            ..TrainConfig::default()
        };
        train(&mut model, &mut adam, &ids, None, &tc, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
        let before = evaluate_ppl(&model, &ids, 16).map_err(|e| e.to_string())?;
        save_checkpoint(&path, &model, &adam, Some(&vocab)).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let after = evaluate_ppl(&loaded.model, &ids, 16).map_err(|e| e.to_string())?;

        let bytes = encode_checkpoint(&model, &adam, Some(&vocab)).map_err(|e| e.to_string())?;
        let mut rejected = 0;
        let mut corruptions = 0;
        for (i, flip) in [(0usize, 0x01u8), (4, 0x02), (8, 0x80), (12, 0x20)] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            corruptions += 1;
            if decode_checkpoint(&bad).is_err() {
                rejected += 1;
            }
        }
        Ok::<_, String>((before.ppl, after.ppl, rejected, corruptions))
    })();
    let secs = start.elapsed().as_secs_f64();
    match run {
        Ok((before, after, rejected, corruptions)) => {
            let same = before.to_bits() == after.to_bits();
            let passed = same && rejected == corruptions && secs < 5.0;
            Outcome::new(
                passed,
                format!(
                    "ppl before {before:?} after {after:?} (bit-identical: {same}), \
                     {rejected}/{corruptions} corrupted headers rejected, {secs:.2}s"
                ),
            )
        }
        Err(e) => Outcome::new(false, e),
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; only listing needs
    // handling.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        (
            "compression formula",
            Box::new(|| {
                suite_criterion(
                    Suite::Compression,
                    &["compression_ratio(h=8", "enumerated_storage_ratio_matches_formula"],
                    1,
                    1.0,
                )
            }),
        ),
        (
            "rank formula",
            Box::new(|| {
                suite_criterion(
                    Suite::Compression,
                    &["compression_ratio_rank", "rank_ratio_strictly_decreasing"],
                    1,
                    1.0,
                )
            }),
        ),
        ("block-term / Tucker equivalence", Box::new(|| suite_criterion(Suite::Tucker, &[], 100, 10.0))),
        ("row-coupled reconstruction", Box::new(|| suite_criterion(Suite::Corollary, &[], 100, 10.0))),
        ("block collapse", Box::new(|| suite_criterion(Suite::Collapse, &[], 50, 10.0))),
        ("span property", Box::new(|| suite_criterion(Suite::Span, &["scaled_dot"], 50, 5.0))),
        ("gradient correctness", Box::new(|| suite_criterion(Suite::Gradient, &[], 1, 60.0))),
        ("causality and permutation equivariance", Box::new(|| suite_criterion(Suite::Invariants, &[], 50, 10.0))),
        ("desk-scale training", Box::new(desk_training)),
        ("checkpoint round trip", Box::new(checkpoint_round_trip)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check();
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict}: {name}: {}", i + 1, outcome.detail);
        if !outcome.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
