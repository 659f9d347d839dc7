//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use tensorized::attention::{
    compression_ratio, compression_ratio_rank, count_attention_params, AttentionDims, AttentionKind,
};
use tensorized::checkpoint::{load_checkpoint, save_checkpoint};
use tensorized::model::{
    build_model, estimate_flops, expected_parameters, FlopBreakdown, ModelConfig, ParamBreakdown,
};
use tensorized::training::{
    self, evaluate_ppl, load_corpus, read_corpus, split_ids, Adam, Evaluation, Level, MetricsRow,
    VocabSpec, Vocabulary,
};
use tensorized::verify::{run_suite, VerifyReport};

use crate::config::{Format, ModelSection, RunConfig};
use crate::report::{plain, Report};
use crate::{AnalyzeArgs, EvalArgs, Failure, ModelOverrides, Split, TrainArgs, VerifyArgs};

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

impl ModelOverrides {
    fn apply(&self, m: &mut ModelSection) {
        if let Some(v) = self.d_model {
            m.d_model = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.rank {
            m.rank = v;
        }
        if let Some(v) = self.layers {
            m.layers = v;
        }
        if let Some(v) = self.attention {
            m.attention = v.into();
        }
        if let Some(v) = self.mode {
            m.mode = v.into();
        }
    }
}

/// Refuses a corpus the checkpoint's vocabulary cannot encode faithfully.
fn check_vocab(vocab: &Vocabulary, text: &str) -> Result<(), Failure> {
    if vocab.level() == Level::Char {
        let unknown = vocab.unknown_count(text);
        if unknown > 0 {
            let corpus_vocab = Vocabulary::build(text, VocabSpec::char())?;
            return Err(Failure::compat(format!(
                "vocabulary mismatch: corpus has {unknown} characters outside the checkpoint vocabulary \
                 (checkpoint fingerprint {}, corpus fingerprint {})",
                vocab.fingerprint(),
                corpus_vocab.fingerprint()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    config: RunConfig,
    model: ModelConfig,
    vocab_size: usize,
    vocab_fingerprint: String,
    params: ParamBreakdown,
    twin_params: ParamBreakdown,
    /// Q/K/V projections plus cores, all layers, `Wo` excluded.
    attention_projection_params: usize,
    twin_attention_projection_params: usize,
    /// Multi-head over multi-linear projection parameters.
    compression_ratio_vs_twin: f64,
    compression_ratio_rank_formula: f64,
    seq_len: usize,
    steps: u64,
    epochs_completed: usize,
    stopped_early: bool,
    elapsed_seconds: f64,
    final_train_loss: Option<f64>,
    best_val_ppl: Option<f64>,
    val: Option<Evaluation>,
    resumed_from: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = a.corpus {
        rc.corpus = Some(c);
    }
    if let Some(o) = a.out {
        rc.out_dir = o;
    }
    if let Some(f) = a.format {
        rc.format = f;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if a.deterministic {
        rc.train.deterministic = true;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        rc.train.max_steps = Some(m);
    }
    if let Some(t) = a.time_budget {
        rc.train.time_budget_secs = Some(t);
    }
    a.model.apply(&mut rc.model);
    rc.validate()?;

    let corpus = rc.corpus.clone().expect("validated");
    let tc = rc.train.clone();
    let (mut model, mut optimizer, vocab, ids) = match &rc.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let vocab = ck
                .vocabulary
                .ok_or_else(|| Failure::compat(format!("checkpoint {} carries no vocabulary", path.display())))?;
            let text = read_corpus(&corpus)?;
            check_vocab(&vocab, &text)?;
            let ids = vocab.encode(&text);
            (ck.model, ck.optimizer, vocab, ids)
        }
        None => {
            let (vocab, ids) = load_corpus(&corpus, rc.vocab)?;
            let cfg = rc.model.resolve(vocab.len(), tc.seq_len, tc.seed);
            let model = build_model::<f32>(&cfg)?;
            let optimizer = Adam::new(model.params(), tc.adam);
            (model, optimizer, vocab, ids)
        }
    };
    tc.validate(model.config().max_seq_len)?;
    let (train_ids, val_ids) = split_ids(&ids, rc.val_fraction)?;
    let val_ids = (val_ids.len() > tc.seq_len).then_some(val_ids);

    let out = rc.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let report = training::train(&mut model, &mut optimizer, train_ids, val_ids, &tc, |epoch, m, opt| {
        save_checkpoint(out.join(format!("checkpoint-epoch-{}.ttlm", epoch + 1)), m, opt, Some(&vocab))
    })?;

    if report.steps > 0 {
        save_checkpoint(out.join("model.ttlm"), &model, &optimizer, Some(&vocab))?;
        let path = out.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        for row in &report.metrics {
            w.serialize(row).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| io_failure(&path, e))?;
    }

    let cfg = model.config().clone();
    let val = val_ids.map(|v| evaluate_ppl(&model, v, tc.seq_len)).transpose()?;
    let twin = cfg.twin();
    let projections = |c: &ModelConfig| c.layers * count_attention_params(c.attention, c.attention_dims(), false);
    let (ours, theirs) = (projections(&cfg), projections(&twin));
    let (mh, ml) = match cfg.attention {
        AttentionKind::MultiHead => (ours, theirs),
        AttentionKind::MultiLinear => (theirs, ours),
    };
    let summary = TrainSummary {
        model: cfg.clone(),
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        params: model.count_parameters(),
        twin_params: expected_parameters(&twin),
        attention_projection_params: ours,
        twin_attention_projection_params: theirs,
        compression_ratio_vs_twin: mh as f64 / ml as f64,
        compression_ratio_rank_formula: compression_ratio_rank(cfg.heads, cfg.d_model, cfg.d, cfg.rank)?,
        seq_len: tc.seq_len,
        steps: report.steps,
        epochs_completed: report.epochs_completed,
        stopped_early: report.stopped_early,
        elapsed_seconds: report.elapsed_seconds,
        final_train_loss: report.metrics.last().map(|m: &MetricsRow| m.train_loss),
        best_val_ppl: report.best_val_ppl,
        val,
        resumed_from: rc.checkpoint.clone(),
        config: rc,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), json.as_bytes())?;

    let mut r = Report::default();
    r.push("out_dir", out.display().to_string());
    r.push("attention", cfg.attention.to_string());
    r.push("steps", summary.steps);
    r.push("epochs_completed", summary.epochs_completed);
    r.push("final_train_loss", summary.final_train_loss);
    r.push("val_ppl", summary.val.map(|v| v.ppl));
    r.push("val_tokens", summary.val.map(|v| v.tokens));
    r.push_fields("params", &summary.params);
    r.push("attention_projection_params", summary.attention_projection_params);
    r.push("twin_attention_projection_params", summary.twin_attention_projection_params);
    r.push("compression_ratio_vs_twin", summary.compression_ratio_vs_twin);
    r.push("elapsed_seconds", summary.elapsed_seconds);
    print!("{}", r.render(summary.config.format)?);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = ck
        .vocabulary
        .ok_or_else(|| Failure::compat(format!("checkpoint {} carries no vocabulary", a.checkpoint.display())))?;
    let cfg = ck.model.config();
    if vocab.len() != cfg.vocab_size {
        return Err(Failure::compat(format!(
            "checkpoint vocabulary has {} entries but the model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let text = read_corpus(&a.corpus)?;
    check_vocab(&vocab, &text)?;
    let ids = vocab.encode(&text);
    let (train_part, val_part) = split_ids(&ids, a.val_fraction)?;
    let part = match a.split {
        Split::All => &ids[..],
        Split::Train => train_part,
        Split::Val => val_part,
    };
    let seq_len = a.seq_len.unwrap_or(cfg.max_seq_len);
    let e = evaluate_ppl(&ck.model, part, seq_len)?;
    let mut r = Report::default();
    r.push("checkpoint", a.checkpoint.display().to_string());
    r.push("corpus", a.corpus.display().to_string());
    r.push("split", format!("{:?}", a.split).to_lowercase());
    r.push("seq_len", seq_len);
    r.push("tokens", e.tokens);
    r.push("mean_nll", e.mean_nll);
    r.push("ppl", e.ppl);
    r.push("vocab_fingerprint", vocab.fingerprint());
    print!("{}", r.render(a.format)?);
    Ok(())
}

fn render_verify(report: &VerifyReport, format: Format) -> Result<String, Failure> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(report).expect("json") + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| Failure::config(format!("csv: {e}"));
            w.write_record(["suite", "property", "trials", "max_error", "tolerance", "passed"])
                .map_err(err)?;
            for p in &report.results {
                w.write_record([
                    p.suite.name(),
                    &p.name,
                    &p.trials.to_string(),
                    &plain(&json!(p.max_error)),
                    &plain(&json!(p.tolerance)),
                    &p.passed.to_string(),
                ])
                .map_err(err)?;
            }
            let bytes = w.into_inner().map_err(|e| Failure::config(format!("csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("utf-8"))
        }
        Format::Text => {
            let mut s = String::new();
            for p in &report.results {
                s += &format!(
                    "{}  {}/{}  max_error={:.3e}  tolerance={:.1e}  trials={}\n",
                    if p.passed { "PASS" } else { "FAIL" },
                    p.suite,
                    p.name,
                    p.max_error,
                    p.tolerance,
                    p.trials
                );
            }
            let passed = report.results.iter().filter(|p| p.passed).count();
            s += &format!("{passed}/{} properties passed\n", report.results.len());
            Ok(s)
        }
    }
}

pub fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let report = run_suite(a.suite, a.seed, a.trials)?;
    print!("{}", render_verify(&report, a.format)?);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        let json = serde_json::to_string_pretty(&report).expect("json");
        write_file(&dir.join("verify.json"), json.as_bytes())?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failures().map(|p| format!("{}/{}", p.suite, p.name)).collect();
        Err(Failure::property(format!("{} properties failed: {}", names.len(), names.join(", "))))
    }
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let from_config = a.config.is_some();
    let mut m = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelSection::default(),
    };
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.heads {
        m.heads = v;
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.d_ff {
        m.d_ff = v;
    }
    if let Some(v) = a.mode {
        m.mode = v.into();
    }
    if m.heads == 0 || m.d_model == 0 {
        return Err(Failure::config("d_model and heads must be positive"));
    }
    m.d = match a.d {
        Some(d) => d,
        None if from_config => m.d,
        None => m.d_model / m.heads,
    };
    m.rank = match a.rank {
        Some(r) => r,
        None if from_config && a.d.is_none() => m.rank,
        None => m.d,
    };
    m.max_seq_len = Some(a.seq_len);
    let cfg = m.resolve(a.vocab, a.seq_len, 0);
    cfg.validate()?;

    let dims: AttentionDims = cfg.attention_dims();
    let mut r = Report::default();
    r.push("config.d_model", cfg.d_model);
    r.push("config.d", cfg.d);
    r.push("config.heads", cfg.heads);
    r.push("config.rank", cfg.rank);
    r.push("config.layers", cfg.layers);
    r.push("config.d_ff", cfg.d_ff);
    r.push("config.vocab", cfg.vocab_size);
    r.push("config.seq_len", a.seq_len);
    r.push("config.mode", cfg.mode.to_string());
    let mh = count_attention_params(AttentionKind::MultiHead, dims, false);
    let ml = count_attention_params(AttentionKind::MultiLinear, dims, false);
    r.push("attention.multi_head.projection_params", mh);
    r.push("attention.multi_linear.projection_params", ml);
    r.push(
        "attention.multi_head.params_with_output",
        count_attention_params(AttentionKind::MultiHead, dims, true),
    );
    r.push(
        "attention.multi_linear.params_with_output",
        count_attention_params(AttentionKind::MultiLinear, dims, true),
    );
    r.push("compression.ratio_full_rank_formula", compression_ratio(cfg.heads, cfg.d_model));
    r.push(
        "compression.ratio_rank_formula",
        compression_ratio_rank(cfg.heads, cfg.d_model, cfg.d, cfg.rank)?,
    );
    r.push("compression.ratio_enumerated", mh as f64 / ml as f64);
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiLinear] {
        let mut c = cfg.clone();
        c.attention = kind;
        let p: ParamBreakdown = expected_parameters(&c);
        r.push_fields(&format!("model.{kind}"), &p);
        let f: FlopBreakdown = estimate_flops(&c, a.seq_len);
        r.push_fields(&format!("flops.{kind}"), &f);
    }
    print!("{}", r.render(a.format)?);
    Ok(())
}
