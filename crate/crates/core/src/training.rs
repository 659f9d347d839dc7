//! Corpus loading, batching, loss, learning-rate schedule, Adam, the training
//! loop and perplexity evaluation.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{label_smoothed_ce_parts, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{s, Matrix, Scalar};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Char,
    Word,
}

/// How to build a vocabulary from raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub level: Level,
    /// Word level: tokens seen fewer times map to `<unk>`.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    1
}

impl VocabSpec {
    pub fn char() -> Self {
        Self {
            level: Level::Char,
            min_count: 1,
        }
    }

    pub fn word(min_count: usize) -> Self {
        Self {
            level: Level::Word,
            min_count,
        }
    }
}

/// Token ↔ id bijection. Ids 0, 1, 2 are `<pad>`, `<unk>`, `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabRecord", try_from = "VocabRecord")]
pub struct Vocabulary {
    level: Level,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRecord {
    level: Level,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        Self {
            level: v.level,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabRecord> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocabulary::from_tokens(r.level, r.tokens)
    }
}

impl Vocabulary {
    /// Builds from a full token list, reserved entries first.
    pub fn from_tokens(level: Level, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("vocabulary must start with <pad>, <unk>, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { level, tokens, index })
    }

    /// Char level: distinct code points in code-point order. Word level:
    /// whitespace tokens with count ≥ `min_count`, by descending count then
    /// lexicographically.
    pub fn build(text: &str, spec: VocabSpec) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        match spec.level {
            Level::Char => {
                for c in text.chars() {
                    *counts.entry(c.to_string()).or_default() += 1;
                }
            }
            Level::Word => {
                for w in text.split_whitespace() {
                    *counts.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= spec.min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        match spec.level {
            Level::Char => entries.sort_by(|a, b| a.0.cmp(&b.0)),
            Level::Word => entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0))),
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(spec.level, tokens)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Char level maps each code point; word level splits each line on
    /// whitespace and appends `<eos>` per line.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.level {
            Level::Char => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| self.id(c.encode_utf8(&mut buf))).collect()
            }
            Level::Word => text
                .lines()
                .flat_map(|line| {
                    line.split_whitespace()
                        .map(|w| self.id(w))
                        .chain(std::iter::once(EOS))
                })
                .collect(),
        }
    }

    /// Number of ids that fell back to `<unk>` when encoding `text`.
    pub fn unknown_count(&self, text: &str) -> usize {
        match self.level {
            Level::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .filter(|c| !self.index.contains_key(c.encode_utf8(&mut buf) as &str))
                    .count()
            }
            Level::Word => text
                .split_whitespace()
                .filter(|w| !self.index.contains_key(*w))
                .count(),
        }
    }

    /// Hex SHA-256 over the level and the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.level {
            Level::Char => b"char".as_slice(),
            Level::Word => b"word".as_slice(),
        });
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Reads a UTF-8 corpus with CRLF line endings normalized to LF.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok(text.replace("\r\n", "\n"))
}

/// Reads a UTF-8 corpus, builds its vocabulary and encodes it.
pub fn load_corpus(path: impl AsRef<Path>, spec: VocabSpec) -> Result<(Vocabulary, Vec<usize>)> {
    let text = read_corpus(path)?;
    let vocab = Vocabulary::build(&text, spec)?;
    let ids = vocab.encode(&text);
    Ok((vocab, ids))
}

/// Encodes a corpus with an existing vocabulary.
pub fn load_corpus_with(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<usize>> {
    Ok(vocab.encode(&read_corpus(path)?))
}

/// Splits ids into a leading training part and a trailing validation part.
pub fn split_ids(ids: &[usize], val_fraction: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::arg(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let cut = ids.len() - (ids.len() as f64 * val_fraction).round() as usize;
    Ok(ids.split_at(cut))
}

/// One `(batch_size, N)` block of inputs and next-token targets, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Contiguous-lane LM batching.
///
/// The stream is cut into `batch_size` equal lanes (tail dropped); each lane
/// yields `⌊lane / (N + 1)⌋` blocks at stride `N`, block `j` covering
/// inputs `lane[jN .. jN + N]` and targets shifted by one.
pub fn batches(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::arg("batch size and sequence length must be positive"));
    }
    let need = batch_size * (seq_len + 1);
    if ids.len() < need {
        return Err(Error::Input(format!(
            "corpus of {} tokens is too small: need at least {need} for batch {batch_size} × length {seq_len}",
            ids.len()
        )));
    }
    let lane = ids.len() / batch_size;
    let blocks = lane / (seq_len + 1);
    let mut out = Vec::with_capacity(blocks);
    for j in 0..blocks {
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for b in 0..batch_size {
            let start = b * lane + j * seq_len;
            inputs.extend_from_slice(&ids[start..start + seq_len]);
            targets.extend_from_slice(&ids[start + 1..start + seq_len + 1]);
        }
        out.push(Batch {
            inputs,
            targets,
            batch_size,
            seq_len,
        });
    }
    Ok(out)
}

/// Mean over positions of `−Σ_v q_v log p_v` with `q` putting `1 − ε` on
/// the target and `ε / (V − 1)` elsewhere.
pub fn label_smoothed_ce<T: Scalar>(logits: &Matrix<T>, targets: &[usize], smoothing: f64) -> Result<T> {
    Ok(label_smoothed_ce_parts(logits, targets, smoothing, None)?.0)
}

/// [`label_smoothed_ce`] over positions whose target is not `pad`.
pub fn label_smoothed_ce_masked<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
    smoothing: f64,
    pad: usize,
) -> Result<T> {
    Ok(label_smoothed_ce_parts(logits, targets, smoothing, Some(pad))?.0)
}

/// Entropy of the smoothed target distribution; a lower bound for
/// [`label_smoothed_ce`].
pub fn smoothed_target_entropy(vocab: usize, smoothing: f64) -> f64 {
    let mut h = 0.0;
    if smoothing < 1.0 {
        h -= (1.0 - smoothing) * (1.0 - smoothing).ln();
    }
    if smoothing > 0.0 && vocab > 1 {
        let off = smoothing / (vocab - 1) as f64;
        h -= smoothing * off.ln();
    }
    h
}

/// `scale · d_model^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2})`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step < 1 {
        return Err(Error::arg("learning-rate step must be at least 1"));
    }
    if warmup < 1 {
        return Err(Error::arg("warmup must be at least 1"));
    }
    let st = step as f64;
    let decay = st.powf(-0.5);
    let ramp = st * (warmup as f64).powf(-1.5);
    Ok(scale * (d_model as f64).powf(-0.5) * decay.min(ramp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments, one pair per parameter, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter with a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &crate::autodiff::Gradients<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2): (T, T) = (s(beta1), s(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size: T = s(lr / c1);
        let c2_sqrt: T = s(c2.sqrt());
        let eps: T = s(eps);
        for (id, g) in grads.iter() {
            let i = id.0;
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for parameter {i}")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    16
}
fn default_seq_len() -> usize {
    64
}
fn default_epochs() -> usize {
    1
}
fn default_warmup() -> u64 {
    4000
}
fn default_scale() -> f64 {
    1.0
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_clip() -> Option<f64> {
    Some(0.25)
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_scale")]
    pub lr_scale: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    /// Stop after this many updates in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Stop once this much wall time has elapsed.
    #[serde(default)]
    pub time_budget_secs: Option<f64>,
    /// Evaluate validation perplexity every this many steps (and at the end
    /// of each epoch).
    #[serde(default)]
    pub eval_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.seq_len == 0 || self.seq_len > max_seq_len {
            problems.push(format!("seq_len {} outside 1..={max_seq_len}", self.seq_len));
        }
        if self.warmup_steps < 1 {
            problems.push("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            problems.push("lr_scale must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                problems.push("grad_clip must be positive".into());
            }
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            problems.push("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
    #[serde(rename = "elapsed_s")]
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    pub steps: u64,
    pub epochs_completed: usize,
    /// Set when a step or time budget ended the run early.
    pub stopped_early: bool,
    pub best_val_ppl: Option<f64>,
    pub elapsed_seconds: f64,
}

/// Loss of one batch in training mode.
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &Batch,
    smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Result<crate::autodiff::NodeId> {
    let logits = model.forward_tape(tape, &batch.inputs, batch.seq_len, Some(rng))?;
    tape.cross_entropy(logits, &batch.targets, smoothing, Some(PAD))
}

/// Trains in place.
///
/// Each step runs forward with dropout, label-smoothed loss, backward,
/// optional global-norm clipping and an Adam update at [`lr_at`] of the
/// optimizer's step count. `on_epoch` runs after every completed epoch.
/// Training is single-threaded, so a fixed seed always reproduces the run
/// bit for bit.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    train_ids: &[usize],
    val_ids: Option<&[usize]>,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model<T>, &Adam<T>) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate(model.config().max_seq_len)?;
    let start = Instant::now();
    let mut report = TrainReport {
        metrics: Vec::new(),
        steps: 0,
        epochs_completed: 0,
        stopped_early: false,
        best_val_ppl: None,
        elapsed_seconds: 0.0,
    };
    if tc.epochs == 0 {
        return Ok(report);
    }
    let blocks = batches(train_ids, tc.batch_size, tc.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let d_model = model.config().d_model;
    let eval = |model: &Model<T>, report: &mut TrainReport| -> Result<Option<f64>> {
        let Some(val) = val_ids else { return Ok(None) };
        let ppl = evaluate_ppl(model, val, tc.seq_len)?.ppl;
        report.best_val_ppl = Some(report.best_val_ppl.map_or(ppl, |b: f64| b.min(ppl)));
        Ok(Some(ppl))
    };
    'epochs: for epoch in 0..tc.epochs {
        for batch in &blocks {
            if tc.max_steps.is_some_and(|m| report.steps >= m)
                || tc
                    .time_budget_secs
                    .is_some_and(|b| start.elapsed().as_secs_f64() >= b)
            {
                report.stopped_early = true;
                break 'epochs;
            }
            let step = optimizer.step + 1;
            let lr = lr_at(step, d_model, tc.warmup_steps, tc.lr_scale)?;
            let diverged = |detail: String| Error::Diverged { step, lr, detail };

            let mut tape = Tape::new();
            let loss = match batch_loss(model, &mut tape, batch, tc.label_smoothing, &mut rng) {
                Ok(l) => l,
                Err(Error::Numeric(m)) => return Err(diverged(m)),
                Err(e) => return Err(e),
            };
            let loss_value = tape.scalar(loss)?.as_f64();
            if !loss_value.is_finite() {
                return Err(diverged(format!("loss is {loss_value}")));
            }
            let mut grads = tape.backward(loss)?;
            if let Some(id) = grads.first_non_finite() {
                return Err(diverged(format!(
                    "non-finite gradient for parameter {}",
                    model.params().name(id)
                )));
            }
            if let Some(c) = tc.grad_clip {
                grads.clip_global_norm(c);
            }
            optimizer.update(model.params_mut(), &grads, lr)?;
            if let Some((_, name, _)) = model.params().iter().find(|(_, _, p)| !p.is_finite()) {
                return Err(diverged(format!("parameter {name} became non-finite")));
            }
            report.steps += 1;
            let val_ppl = match tc.eval_every {
                Some(k) if k > 0 && report.steps.is_multiple_of(k) => eval(model, &mut report)?,
                _ => None,
            };
            report.metrics.push(MetricsRow {
                step,
                lr,
                train_loss: loss_value,
                val_ppl,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            });
        }
        report.epochs_completed = epoch + 1;
        if let Some(ppl) = eval(model, &mut report)? {
            if let Some(last) = report.metrics.last_mut() {
                last.val_ppl = Some(ppl);
            }
        }
        on_epoch(epoch, model, optimizer)?;
    }
    if report.stopped_early {
        if let Some(ppl) = eval(model, &mut report)? {
            if let Some(last) = report.metrics.last_mut() {
                last.val_ppl = Some(ppl);
            }
        }
    }
    report.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Perplexity summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
}

const EVAL_STACK: usize = 16;

/// `exp(total NLL / tokens)` without smoothing over consecutive
/// non-overlapping windows of length `N` (the last one may be shorter), so
/// every id after the first is predicted exactly once. `<pad>` targets are
/// skipped. NLL is accumulated in `f64`.
pub fn evaluate_ppl<T: Scalar>(model: &Model<T>, ids: &[usize], seq_len: usize) -> Result<Evaluation> {
    if seq_len == 0 {
        return Err(Error::arg("sequence length must be positive"));
    }
    if ids.len() < seq_len + 1 {
        return Err(Error::Input(format!(
            "evaluation needs at least {} tokens, got {}",
            seq_len + 1,
            ids.len()
        )));
    }
    let predicted = ids.len() - 1;
    let full = predicted / seq_len;
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    let mut run = |starts: &[usize], len: usize| -> Result<()> {
        let mut inputs = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &st in starts {
            inputs.extend_from_slice(&ids[st..st + len]);
            targets.extend_from_slice(&ids[st + 1..st + len + 1]);
        }
        let mut tape = Tape::new();
        let node = model.forward_tape::<ChaCha8Rng>(&mut tape, &inputs, len, None)?;
        let logits = tape.value(node)?;
        for (r, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = logits.row(r);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            tokens += 1;
        }
        Ok(())
    };
    let starts: Vec<usize> = (0..full).map(|w| w * seq_len).collect();
    for chunk in starts.chunks(EVAL_STACK) {
        run(chunk, seq_len)?;
    }
    let tail = predicted - full * seq_len;
    if tail > 0 {
        run(&[full * seq_len], tail)?;
    }
    if tokens == 0 {
        return Err(Error::Input("no non-padding targets to evaluate".into()));
    }
    let mean_nll = total / tokens as f64;
    if !mean_nll.is_finite() {
        return Err(Error::Numeric(format!("evaluation NLL is {mean_nll}")));
    }
    Ok(Evaluation {
        ppl: mean_nll.exp(),
        mean_nll,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, AttentionMode};
    use crate::model::{build_model, ModelConfig};
    use std::io::Write;

    fn tiny(vocab: usize, kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 16,
            d: 8,
            heads: 2,
            rank: 8,
            d_ff: 32,
            vocab_size: vocab,
            max_seq_len: 16,
            dropout: 0.0,
            attention: kind,
            mode: AttentionMode::Chunked,
            tie_embeddings: false,
            scale_embeddings: true,
            seed: 1,
        }
    }

    fn fast_tc(seq_len: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            seq_len,
            epochs: 1000,
            warmup_steps: 50,
            lr_scale: 2.0,
            label_smoothing: 0.0,
            grad_clip: Some(1.0),
            max_steps: Some(500),
            ..TrainConfig::default()
        }
    }

    fn temp_corpus(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn char_corpus_ids() {
        let f = temp_corpus("ab\n");
        let (vocab, ids) = load_corpus(f.path(), VocabSpec::char()).unwrap();
        assert_eq!(vocab.len(), 3 + 3);
        assert_eq!(ids, vec![vocab.id("a"), vocab.id("b"), vocab.id("\n")]);
        assert!(ids.iter().all(|&i| i >= 3));
        assert_eq!(load_corpus_with(f.path(), &vocab).unwrap(), ids);
    }

    #[test]
    fn word_vocab_ranks_by_frequency() {
        let v = Vocabulary::build("a a b", VocabSpec::word(1)).unwrap();
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.encode("a b\nzz"), vec![3, 4, EOS, UNK, EOS]);
        let cut = Vocabulary::build("a a b", VocabSpec::word(2)).unwrap();
        assert_eq!(cut.len(), 4);
        assert_eq!(cut.id("b"), UNK);
    }

    #[test]
    fn vocabulary_serde_round_trip_keeps_fingerprint() {
        let v = Vocabulary::build("hello world", VocabSpec::char()).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(back.encode("low"), v.encode("low"));
        let other = Vocabulary::build("hello there", VocabSpec::char()).unwrap();
        assert_ne!(other.fingerprint(), v.fingerprint());
        assert!(serde_json::from_str::<Vocabulary>(r#"{"level":"char","tokens":["x"]}"#).is_err());
    }

    #[test]
    fn corpus_errors() {
        let missing = load_corpus("/nonexistent/corpus.txt", VocabSpec::char());
        assert!(matches!(missing, Err(Error::Io { .. })));
        let f = temp_corpus("");
        assert!(matches!(load_corpus(f.path(), VocabSpec::char()), Err(Error::Input(_))));
    }

    #[test]
    fn batching_by_hand() {
        let ids: Vec<usize> = (0..10).collect();
        let b = batches(&ids, 1, 3).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].inputs, vec![0, 1, 2]);
        assert_eq!(b[0].targets, vec![1, 2, 3]);
        assert_eq!(b[1].inputs, vec![3, 4, 5]);
        assert_eq!(b[1].targets, vec![4, 5, 6]);

        let ids: Vec<usize> = (0..20).collect();
        let b = batches(&ids, 2, 3).unwrap();
        assert_eq!(b[0].inputs, vec![0, 1, 2, 10, 11, 12]);
        assert_eq!(b[0].targets, vec![1, 2, 3, 11, 12, 13]);

        match batches(&ids, 4, 5) {
            Err(Error::Input(m)) => assert!(m.contains("24"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn batching_conserves_tokens(len in 2usize..300, batch in 1usize..5, n in 1usize..8) {
            let ids: Vec<usize> = (0..len).collect();
            match batches(&ids, batch, n) {
                Ok(b) => {
                    let emitted: usize = b.iter().map(|x| x.inputs.len()).sum();
                    proptest::prop_assert!(emitted <= len);
                    for x in &b {
                        for (i, t) in x.inputs.iter().zip(&x.targets) {
                            proptest::prop_assert_eq!(*t, i + 1);
                        }
                    }
                }
                Err(_) => proptest::prop_assert!(len < batch * (n + 1)),
            }
        }

        #[test]
        fn lr_schedule_shape(warmup in 2u64..500, step in 1u64..2000) {
            let a = lr_at(step, 64, warmup, 1.0).unwrap();
            let b = lr_at(step + 1, 64, warmup, 1.0).unwrap();
            if step < warmup {
                proptest::prop_assert!(b > a);
            } else {
                proptest::prop_assert!(b < a);
            }
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn loss_examples() {
        let z = Matrix::from_rows(&[&[0.0, 0.0]]);
        let l = label_smoothed_ce(&z, &[0], 0.1).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        let u = Matrix::<f64>::zeros(3, 7);
        for eps in [0.0, 0.1, 0.5] {
            let l = label_smoothed_ce(&u, &[3, 4, 5], eps).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
        let z = Matrix::from_rows(&[&[2.0, -1.0, 0.5]]);
        let plain = label_smoothed_ce(&z, &[0], 0.0).unwrap();
        let p0 = 2f64.exp() / (2f64.exp() + (-1f64).exp() + 0.5f64.exp());
        assert!((plain + p0.ln()).abs() < 1e-12);
        assert!(matches!(label_smoothed_ce(&z, &[5], 0.1), Err(Error::Input(_))));
        // padding rows are excluded from the mean
        let two = Matrix::from_rows(&[&[2.0, -1.0, 0.5], &[9.0, 0.0, 0.0]]);
        assert_eq!(
            label_smoothed_ce_masked(&two, &[1, PAD], 0.0, PAD).unwrap(),
            label_smoothed_ce(&two.rows_range(0, 1).unwrap(), &[1], 0.0).unwrap()
        );
    }

    #[test]
    fn smoothed_loss_is_bounded_by_target_entropy() {
        let floor = smoothed_target_entropy(5, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let z: Matrix<f64> = Matrix::from_fn(1, 5, |_, _| rand::Rng::random_range(&mut rng, -10.0..10.0));
            assert!(label_smoothed_ce(&z, &[4], 0.1).unwrap() >= floor - 1e-12);
        }
        let q = [0.9, 0.025, 0.025, 0.025, 0.025];
        let best = Matrix::from_fn(1, 5, |_, c| f64::ln(q[c]));
        assert!((label_smoothed_ce(&best, &[0], 0.1).unwrap() - floor).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let lr = lr_at(4000, 256, 4000, 1.0).unwrap();
        assert!((lr - 9.8821e-4).abs() < 1e-7);
        let peak = lr_at(4000, 256, 4000, 1.0).unwrap();
        assert!(lr_at(3999, 256, 4000, 1.0).unwrap() < peak);
        assert!(lr_at(4001, 256, 4000, 1.0).unwrap() < peak);
        let later = lr_at(8000, 256, 4000, 1.0).unwrap();
        assert!((later - peak / 2f64.sqrt()).abs() < 1e-15);
        assert!(lr_at(0, 256, 4000, 1.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Matrix::from_rows(&[&[1.0, -2.0]]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, &grads, 0.01).unwrap();
        assert_eq!(adam.step, 1);
        let got = store.get(id);
        assert!((got.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((got.get(0, 1) + 1.99).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let cfg = tiny(8, AttentionKind::MultiLinear);
        let mut m = build_model::<f64>(&cfg).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(m.params(), AdamConfig::default());
        let tc = TrainConfig {
            epochs: 0,
            ..fast_tc(4)
        };
        let r = train(&mut m, &mut adam, &[3, 4, 5], None, &tc, |_, _, _| Ok(())).unwrap();
        assert_eq!(m, before);
        assert!(r.metrics.is_empty());
    }

    #[test]
    fn first_loss_equals_hand_composition() {
        let mut cfg = tiny(9, AttentionKind::MultiLinear);
        cfg.dropout = 0.0;
        let mut m = build_model::<f64>(&cfg).unwrap();
        let ids: Vec<usize> = (0..40).map(|i| 3 + (i * 7) % 6).collect();
        let tc = TrainConfig {
            batch_size: 1,
            seq_len: 8,
            label_smoothing: 0.1,
            max_steps: Some(1),
            ..fast_tc(8)
        };
        let first = &batches(&ids, 1, 8).unwrap()[0];
        let logits = m.forward_lm(&first.inputs, None).unwrap();
        let want = label_smoothed_ce_masked(&logits, &first.targets, 0.1, PAD).unwrap();
        let mut adam = Adam::new(m.params(), tc.adam);
        let r = train(&mut m, &mut adam, &ids, None, &tc, |_, _, _| Ok(())).unwrap();
        assert!((r.metrics[0].train_loss - want).abs() < 1e-12);
        assert_eq!(r.steps, 1);
        assert!(r.stopped_early);
    }

    #[test]
    fn memorizes_a_repeating_pattern() {
        let pattern = [3, 5, 4, 7, 6, 3, 8, 9, 4, 10, 5, 6, 7, 3, 9, 8];
        let ids: Vec<usize> = pattern.iter().copied().cycle().take(64 * 8).collect();
        let vocab = 11;
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            let mut m = build_model::<f32>(&tiny(vocab, kind)).unwrap();
            let mut adam = Adam::new(m.params(), AdamConfig::default());
            let r = train(&mut m, &mut adam, &ids, None, &fast_tc(16), |_, _, _| Ok(())).unwrap();
            let first = r.metrics[0].train_loss;
            let last = r.metrics.last().unwrap().train_loss;
            assert!(r.steps <= 500);
            assert!(last < first, "{kind:?}");
            assert!(last < 0.1 * (vocab as f64).ln(), "{kind:?}: {last}");
            assert!(r.metrics.windows(2).all(|w| w[1].step == w[0].step + 1));
        }
    }

    #[test]
    fn alternating_corpus_reaches_unit_perplexity() {
        let ids: Vec<usize> = (0..512).map(|i| 3 + i % 2).collect();
        let mut m = build_model::<f32>(&tiny(5, AttentionKind::MultiLinear)).unwrap();
        let mut adam = Adam::new(m.params(), AdamConfig::default());
        let tc = TrainConfig {
            max_steps: Some(200),
            ..fast_tc(16)
        };
        train(&mut m, &mut adam, &ids, None, &tc, |_, _, _| Ok(())).unwrap();
        let e = evaluate_ppl(&m, &ids[..200], 16).unwrap();
        assert!(e.ppl >= 1.0 && e.ppl < 1.1, "{}", e.ppl);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ids: Vec<usize> = (0..400).map(|i| 3 + (i * i) % 7).collect();
        let mut cfg = tiny(10, AttentionKind::MultiLinear);
        cfg.dropout = 0.3;
        let tc = TrainConfig {
            max_steps: Some(20),
            eval_every: Some(10),
            deterministic: true,
            ..fast_tc(8)
        };
        let run = || {
            let mut m = build_model::<f32>(&cfg).unwrap();
            let mut adam = Adam::new(m.params(), tc.adam);
            let r = train(&mut m, &mut adam, &ids[..300], Some(&ids[300..]), &tc, |_, _, _| Ok(())).unwrap();
            (m, r.metrics.iter().map(|x| (x.step, x.lr, x.train_loss, x.val_ppl)).collect::<Vec<_>>())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma[9].3.is_some());
    }

    #[test]
    fn divergence_reports_step_and_parameter() {
        let mut m = build_model::<f64>(&tiny(8, AttentionKind::MultiLinear)).unwrap();
        let id = m.params().find("layers.0.ffn.w1").unwrap();
        m.params_mut().get_mut(id).set(0, 0, f64::NAN);
        let mut adam = Adam::new(m.params(), AdamConfig::default());
        let ids: Vec<usize> = (0..100).map(|i| 3 + i % 5).collect();
        match train(&mut m, &mut adam, &ids, None, &fast_tc(4), |_, _, _| Ok(())) {
            Err(Error::Diverged { step, lr, .. }) => {
                assert_eq!(step, 1);
                assert!(lr > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut cfg = tiny(13, AttentionKind::MultiLinear);
        cfg.tie_embeddings = false;
        let mut m = build_model::<f64>(&cfg).unwrap();
        let out = m.params().find("output").unwrap();
        *m.params_mut().get_mut(out) = Matrix::zeros(16, 13);
        let ids: Vec<usize> = (0..101).map(|i| 3 + i % 10).collect();
        let e = evaluate_ppl(&m, &ids, 8).unwrap();
        assert!((e.ppl - 13.0).abs() < 1e-9);
        assert_eq!(e.tokens, 100);
        let prefix = evaluate_ppl(&m, &ids[..41], 8).unwrap();
        assert_eq!(prefix.tokens, 40);
        assert!(evaluate_ppl(&m, &ids[..8], 8).is_err());
    }

    #[test]
    fn perplexity_is_at_least_one() {
        let m = build_model::<f64>(&tiny(9, AttentionKind::MultiHead)).unwrap();
        let ids: Vec<usize> = (0..50).map(|i| 3 + (i * 5) % 6).collect();
        assert!(evaluate_ppl(&m, &ids, 7).unwrap().ppl >= 1.0);
    }
}
