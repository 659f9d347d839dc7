//! Tensorized transformer language model.
//!
//! Token embedding (scaled by `√d_model` unless disabled) plus sinusoidal
//! positions, then `L` post-norm blocks:
//!
//! ```text
//! x = LayerNorm(x + Dropout(CausalAttention(x)))
//! x = LayerNorm(x + Dropout(W2 · max(0, W1 · x + b1) + b2))
//! ```
//!
//! and a final projection to vocabulary logits (optionally tied to the
//! embedding). The attention sublayer is either multi-linear or standard
//! multi-head, selected by [`ModelConfig::attention`].

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    count_attention_params, init_core_with, xavier_normal, AttentionDims, AttentionKind,
    AttentionMode, AttentionParams, DiagonalCore, MultiHeadParams,
};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{s, Matrix, Scalar};

fn default_true() -> bool {
    true
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    /// Width of each projected factor (per head for multi-head).
    pub d: usize,
    /// Number of cores (multi-linear) or heads (multi-head).
    pub heads: usize,
    /// Core rank `R ≤ d`.
    pub rank: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub attention: AttentionKind,
    #[serde(default)]
    pub mode: AttentionMode,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// Multiply embeddings by `√d_model` before adding positions.
    #[serde(default = "default_true")]
    pub scale_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Hyperparameters of the PTB row of the published configuration table:
    /// `d_model = 256, d_ff = 2100, h = 2, L = 3, d = 40`.
    pub fn ptb(vocab_size: usize) -> Self {
        Self {
            layers: 3,
            d_model: 256,
            d: 40,
            heads: 2,
            rank: 40,
            d_ff: 2100,
            vocab_size,
            max_seq_len: 30,
            dropout: 0.3,
            attention: AttentionKind::MultiLinear,
            mode: AttentionMode::Chunked,
            tie_embeddings: false,
            scale_embeddings: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d", self.d),
            ("heads", self.heads),
            ("rank", self.rank),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.rank > self.d {
            problems.push(format!("rank {} exceeds d = {}", self.rank, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            d_model: self.d_model,
            d: self.d,
            heads: self.heads,
            rank: self.rank,
            mode: self.mode,
        }
    }

    /// The same model with the other attention kind.
    pub fn twin(&self) -> Self {
        let mut c = self.clone();
        c.attention = match self.attention {
            AttentionKind::MultiLinear => AttentionKind::MultiHead,
            AttentionKind::MultiHead => AttentionKind::MultiLinear,
        };
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerAttention {
    MultiLinear {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        cores: Vec<ParamId>,
        wo: ParamId,
    },
    MultiHead {
        wq: Vec<ParamId>,
        wk: Vec<ParamId>,
        wv: Vec<ParamId>,
        wo: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    attention: LayerAttention,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    norm1_gain: ParamId,
    norm1_bias: ParamId,
    norm2_gain: ParamId,
    norm2_bias: ParamId,
}

/// Which component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Embedding,
    Attention,
    Ffn,
    Norm,
    Output,
}

/// Name, shape and component of every parameter, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Component)> {
    let ModelConfig {
        d_model, d, heads, rank, d_ff, vocab_size, ..
    } = *cfg;
    let mut out = vec![("embedding".to_string(), (vocab_size, d_model), Component::Embedding)];
    for l in 0..cfg.layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        match cfg.attention {
            AttentionKind::MultiLinear => {
                for w in ["wq", "wk", "wv"] {
                    out.push((p(&format!("attn.{w}")), (d_model, d), Component::Attention));
                }
                for j in 0..heads {
                    out.push((p(&format!("attn.core.{j}")), (1, rank), Component::Attention));
                }
                let wo_rows = match cfg.mode {
                    AttentionMode::Chunked => heads * d,
                    AttentionMode::Sum => d,
                };
                out.push((p("attn.wo"), (wo_rows, d_model), Component::Attention));
            }
            AttentionKind::MultiHead => {
                for w in ["wq", "wk", "wv"] {
                    for i in 0..heads {
                        out.push((p(&format!("attn.{w}.{i}")), (d_model, d), Component::Attention));
                    }
                }
                out.push((p("attn.wo"), (heads * d, d_model), Component::Attention));
            }
        }
        out.push((p("ffn.w1"), (d_model, d_ff), Component::Ffn));
        out.push((p("ffn.b1"), (1, d_ff), Component::Ffn));
        out.push((p("ffn.w2"), (d_ff, d_model), Component::Ffn));
        out.push((p("ffn.b2"), (1, d_model), Component::Ffn));
        out.push((p("norm1.gain"), (1, d_model), Component::Norm));
        out.push((p("norm1.bias"), (1, d_model), Component::Norm));
        out.push((p("norm2.gain"), (1, d_model), Component::Norm));
        out.push((p("norm2.bias"), (1, d_model), Component::Norm));
    }
    if !cfg.tie_embeddings {
        out.push(("output".to_string(), (d_model, vocab_size), Component::Output));
    }
    out
}

/// Language model parameters plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<LayerIds>,
    output: Option<ParamId>,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub attention: usize,
    pub ffn: usize,
    pub norms: usize,
    pub output: usize,
    pub total: usize,
}

/// Sinusoidal positions: `pe[p, 2i] = sin(p / 10000^{2i/d_model})`,
/// `pe[p, 2i+1] = cos(p / 10000^{2i/d_model})`.
pub fn positional_encoding<T: Scalar>(n: usize, d_model: usize) -> Matrix<T> {
    Matrix::from_fn(n, d_model, |p, j| {
        let i2 = (j - j % 2) as f64;
        let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
        s(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Allocates and initializes a model from `cfg.seed`.
///
/// Projections, FFN and output matrices are Xavier-normal, cores uniform on
/// (0, 1), embeddings `N(0, d_model^{-1/2})`, norm gains 1 and every bias 0.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let emb_std = (cfg.d_model as f64).powf(-0.5);
    let normal = Normal::new(0.0, emb_std).expect("positive std");
    let mut store = ParamStore::new();
    for (name, (rows, cols), component) in param_layout(cfg) {
        let value = if name.ends_with("gain") {
            Matrix::filled(rows, cols, T::one())
        } else if name.contains(".b") && component != Component::Attention {
            Matrix::zeros(rows, cols)
        } else if name == "embedding" {
            Matrix::from_fn(rows, cols, |_, _| s(rng.sample(normal)))
        } else if name.contains("attn.core") {
            let core: DiagonalCore<T> = init_core_with(cols, &mut rng)?;
            Matrix::row_vector(core.raw())
        } else {
            xavier_normal(rows, cols, &mut rng)
        };
        store.add(name, value);
    }
    Model::from_store(cfg.clone(), store)
}

impl<T: Scalar> Model<T> {
    /// Wraps an existing parameter store, checking names and shapes against
    /// [`param_layout`].
    pub fn from_store(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (_, have_name, value)) in layout.iter().zip(params.iter()) {
            if name != have_name || *shape != value.shape() {
                return Err(Error::dim(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    value.shape()
                )));
            }
        }
        let id = |n: &str| params.find(n).expect("layout checked");
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| id(&format!("layers.{l}.{n}"));
            let attention = match config.attention {
                AttentionKind::MultiLinear => LayerAttention::MultiLinear {
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    cores: (0..config.heads).map(|j| p(&format!("attn.core.{j}"))).collect(),
                    wo: p("attn.wo"),
                },
                AttentionKind::MultiHead => LayerAttention::MultiHead {
                    wq: (0..config.heads).map(|i| p(&format!("attn.wq.{i}"))).collect(),
                    wk: (0..config.heads).map(|i| p(&format!("attn.wk.{i}"))).collect(),
                    wv: (0..config.heads).map(|i| p(&format!("attn.wv.{i}"))).collect(),
                    wo: p("attn.wo"),
                },
            };
            layers.push(LayerIds {
                attention,
                ffn_w1: p("ffn.w1"),
                ffn_b1: p("ffn.b1"),
                ffn_w2: p("ffn.w2"),
                ffn_b2: p("ffn.b2"),
                norm1_gain: p("norm1.gain"),
                norm1_bias: p("norm1.bias"),
                norm2_gain: p("norm2.gain"),
                norm2_bias: p("norm2.bias"),
            });
        }
        let embedding = id("embedding");
        let output = (!config.tie_embeddings).then(|| id("output"));
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            layers: self.layers.clone(),
            output: self.output,
        }
    }

    /// Multi-linear attention parameters of `layer`, as plain matrices.
    pub fn attention_params(&self, layer: usize) -> Option<AttentionParams<T>> {
        match &self.layers.get(layer)?.attention {
            LayerAttention::MultiLinear { wq, wk, wv, cores, wo } => {
                let p = &self.params;
                let cores = cores
                    .iter()
                    .map(|&c| DiagonalCore::new(p.get(c).data().to_vec()))
                    .collect::<Result<Vec<_>>>()
                    .ok()?;
                AttentionParams::new(
                    p.get(*wq).clone(),
                    p.get(*wk).clone(),
                    p.get(*wv).clone(),
                    cores,
                    p.get(*wo).clone(),
                    self.config.mode,
                )
                .ok()
            }
            LayerAttention::MultiHead { .. } => None,
        }
    }

    /// Multi-head attention parameters of `layer`, as plain matrices.
    pub fn multi_head_params(&self, layer: usize) -> Option<MultiHeadParams<T>> {
        match &self.layers.get(layer)?.attention {
            LayerAttention::MultiHead { wq, wk, wv, wo } => {
                let get = |ids: &[ParamId]| ids.iter().map(|&i| self.params.get(i).clone()).collect();
                MultiHeadParams::new(get(wq), get(wk), get(wv), self.params.get(*wo).clone()).ok()
            }
            LayerAttention::MultiLinear { .. } => None,
        }
    }

    /// Named matrices of the non-attention parts of `layer`:
    /// `(w1, b1, w2, b2, norm1 gain, norm1 bias, norm2 gain, norm2 bias)`.
    pub fn layer_matrices(&self, layer: usize) -> Option<[&Matrix<T>; 8]> {
        let l = self.layers.get(layer)?;
        let p = &self.params;
        Some([
            p.get(l.ffn_w1),
            p.get(l.ffn_b1),
            p.get(l.ffn_w2),
            p.get(l.ffn_b2),
            p.get(l.norm1_gain),
            p.get(l.norm1_bias),
            p.get(l.norm2_gain),
            p.get(l.norm2_bias),
        ])
    }

    pub fn embedding_matrix(&self) -> &Matrix<T> {
        self.params.get(self.embedding)
    }

    /// Output projection `(d_model, vocab)`; the transposed embedding when
    /// tied.
    pub fn output_matrix(&self) -> Matrix<T> {
        match self.output {
            Some(id) => self.params.get(id).clone(),
            None => self.embedding_matrix().transpose(),
        }
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::Input(format!(
                "{} tokens do not form sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds the maximum {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass over `tokens.len() / seq_len` stacked sequences
    /// and returns the logits node `(tokens.len(), vocab)`.
    ///
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn forward_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        seq_len: usize,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<NodeId> {
        self.check_tokens(tokens, seq_len)?;
        let cfg = &self.config;
        let p = &self.params;
        let batch = tokens.len() / seq_len;

        let table = tape.param(p, self.embedding);
        let mut x = tape.embedding(table, tokens)?;
        if cfg.scale_embeddings {
            x = tape.scale(x, s::<T>(cfg.d_model as f64).sqrt())?;
        }
        let pe = positional_encoding::<T>(seq_len, cfg.d_model);
        let tiled = Matrix::concat_rows(&vec![pe; batch])?;
        let pe = tape.constant(tiled);
        x = tape.add(x, pe)?;

        let rate = cfg.dropout;
        for layer in &self.layers {
            let attn = match &layer.attention {
                LayerAttention::MultiLinear { wq, wk, wv, cores, wo } => {
                    let (wq, wk, wv) = (tape.param(p, *wq), tape.param(p, *wk), tape.param(p, *wv));
                    let q = tape.matmul(x, wq)?;
                    let k = tape.matmul(x, wk)?;
                    let v = tape.matmul(x, wv)?;
                    let mut avg = None;
                    for &c in cores {
                        let g = tape.param(p, c);
                        let w = tape.softmax_rows(g)?;
                        avg = Some(match avg {
                            None => w,
                            Some(acc) => tape.add(acc, w)?,
                        });
                    }
                    let avg = tape.scale(
                        avg.expect("at least one core"),
                        T::one() / s::<T>(cores.len() as f64),
                    )?;
                    let chunks = match cfg.mode {
                        AttentionMode::Chunked => cores.len(),
                        AttentionMode::Sum => 1,
                    };
                    let a = tape.multi_linear_attention(q, k, v, avg, seq_len, chunks, true)?;
                    let wo = tape.param(p, *wo);
                    tape.matmul(a, wo)?
                }
                LayerAttention::MultiHead { wq, wk, wv, wo } => {
                    let mut heads = Vec::with_capacity(wq.len());
                    for i in 0..wq.len() {
                        let (pq, pk, pv) =
                            (tape.param(p, wq[i]), tape.param(p, wk[i]), tape.param(p, wv[i]));
                        let q = tape.matmul(x, pq)?;
                        let k = tape.matmul(x, pk)?;
                        let v = tape.matmul(x, pv)?;
                        heads.push(tape.scaled_dot_attention(q, k, v, seq_len, true)?);
                    }
                    let cat = tape.concat_cols(&heads)?;
                    let wo = tape.param(p, *wo);
                    tape.matmul(cat, wo)?
                }
            };
            let attn = match dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(attn, rate, rng)?,
                None => attn,
            };
            let res = tape.add(x, attn)?;
            let (g1, b1) = (tape.param(p, layer.norm1_gain), tape.param(p, layer.norm1_bias));
            x = tape.layer_norm(res, g1, b1)?;

            let w1 = tape.param(p, layer.ffn_w1);
            let b1 = tape.param(p, layer.ffn_b1);
            let w2 = tape.param(p, layer.ffn_w2);
            let b2 = tape.param(p, layer.ffn_b2);
            let h = tape.matmul(x, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.relu(h)?;
            let f = tape.matmul(h, w2)?;
            let f = tape.add_row(f, b2)?;
            let f = match dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(f, rate, rng)?,
                None => f,
            };
            let res = tape.add(x, f)?;
            let (g2, b2) = (tape.param(p, layer.norm2_gain), tape.param(p, layer.norm2_bias));
            x = tape.layer_norm(res, g2, b2)?;
        }
        match self.output {
            Some(id) => {
                let w = tape.param(p, id);
                tape.matmul(x, w)
            }
            None => tape.matmul_t(x, table),
        }
    }

    /// Logits `(N, vocab)` for one sequence. `train_seed` enables dropout with
    /// a mask stream seeded from it.
    pub fn forward_lm(&self, tokens: &[usize], train_seed: Option<u64>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let mut rng = train_seed.map(ChaCha8Rng::seed_from_u64);
        let logits = self.forward_tape(&mut tape, tokens, tokens.len(), rng.as_mut())?;
        Ok(tape.value(logits)?.clone())
    }

    /// Allocated scalars per component.
    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            embedding: 0,
            attention: 0,
            ffn: 0,
            norms: 0,
            output: 0,
            total: 0,
        };
        for ((_, _, component), (_, _, value)) in param_layout(&self.config).iter().zip(self.params.iter()) {
            let n = value.len();
            match component {
                Component::Embedding => b.embedding += n,
                Component::Attention => b.attention += n,
                Component::Ffn => b.ffn += n,
                Component::Norm => b.norms += n,
                Component::Output => b.output += n,
            }
            b.total += n;
        }
        b
    }

    pub fn estimate_flops(&self, n: usize) -> Result<FlopBreakdown> {
        if n > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {n} exceeds the maximum {}",
                self.config.max_seq_len
            )));
        }
        Ok(estimate_flops(&self.config, n))
    }
}

/// Floating-point operations of one forward pass over one sequence, counting
/// `2·m·k·n` per dense `(m,k)×(k,n)` product and nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Q/K/V projections and the output map `Wo`, all layers.
    pub projections: u64,
    /// Position-mixing products (scores and score·value), all layers.
    pub attention_mixing: u64,
    pub ffn: u64,
    pub output: u64,
    pub total: u64,
}

/// Closed-form [`FlopBreakdown`] for a configuration at sequence length `n`.
///
/// Multi-linear attention is counted on its efficient path: scores
/// `(n, R)×(R, n)` then per-chunk `(n, n_c)×(n_c, d)`, never the `n³`
/// tensor.
pub fn estimate_flops(cfg: &ModelConfig, n: usize) -> FlopBreakdown {
    let mm = |m: usize, k: usize, c: usize| 2 * (m as u64) * (k as u64) * (c as u64);
    let ModelConfig {
        layers, d_model, d, heads, rank, d_ff, vocab_size, ..
    } = *cfg;
    let (proj, mix) = match cfg.attention {
        AttentionKind::MultiLinear => {
            let wo_rows = match cfg.mode {
                AttentionMode::Chunked => heads * d,
                AttentionMode::Sum => d,
            };
            (
                3 * mm(n, d_model, d) + mm(n, wo_rows, d_model),
                mm(n, rank, n) + mm(n, n, d),
            )
        }
        AttentionKind::MultiHead => (
            heads as u64 * 3 * mm(n, d_model, d) + mm(n, heads * d, d_model),
            heads as u64 * (mm(n, d, n) + mm(n, n, d)),
        ),
    };
    let l = layers as u64;
    let projections = l * proj;
    let attention_mixing = l * mix;
    let ffn = l * (mm(n, d_model, d_ff) + mm(n, d_ff, d_model));
    let output = mm(n, d_model, vocab_size);
    FlopBreakdown {
        projections,
        attention_mixing,
        ffn,
        output,
        total: projections + attention_mixing + ffn + output,
    }
}

/// Closed-form [`ParamBreakdown`] for a configuration.
pub fn expected_parameters(cfg: &ModelConfig) -> ParamBreakdown {
    let embedding = cfg.vocab_size * cfg.d_model;
    let attention = cfg.layers * count_attention_params(cfg.attention, cfg.attention_dims(), true);
    let ffn = cfg.layers * (2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model);
    let norms = cfg.layers * 4 * cfg.d_model;
    let output = if cfg.tie_embeddings {
        0
    } else {
        cfg.d_model * cfg.vocab_size
    };
    ParamBreakdown {
        embedding,
        attention,
        ffn,
        norms,
        output,
        total: embedding + attention + ffn + norms + output,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            d: 4,
            heads: 2,
            rank: 4,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 8,
            dropout: 0.1,
            attention: kind,
            mode: AttentionMode::Chunked,
            tie_embeddings: false,
            scale_embeddings: true,
            seed: 3,
        }
    }

    #[test]
    fn ptb_configuration_builds() {
        let cfg = ModelConfig::ptb(10000);
        assert_eq!((cfg.layers, cfg.d_model, cfg.heads, cfg.d, cfg.d_ff), (3, 256, 2, 40, 2100));
        let m = build_model::<f32>(&cfg).unwrap();
        assert_eq!(m.count_parameters(), expected_parameters(&cfg));
        assert_eq!(m.count_parameters().total, m.params().scalar_count());
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let mut cfg = tiny(AttentionKind::MultiLinear);
        cfg.rank = 9;
        cfg.dropout = 1.0;
        cfg.layers = 0;
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(build_model::<f64>(&cfg).is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = tiny(AttentionKind::MultiLinear);
        let a = build_model::<f64>(&cfg).unwrap();
        let b = build_model::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, build_model::<f64>(&other).unwrap());
    }

    #[test]
    fn initialization_follows_the_scheme() {
        let m = build_model::<f64>(&tiny(AttentionKind::MultiLinear)).unwrap();
        let p = m.params();
        for (_, name, v) in p.iter() {
            if name.ends_with("gain") {
                assert!(v.data().iter().all(|&x| x == 1.0), "{name}");
            } else if name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with("bias") {
                assert!(v.data().iter().all(|&x| x == 0.0), "{name}");
            } else if name.contains("core") {
                assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0), "{name}");
            }
        }
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            for mode in [AttentionMode::Chunked, AttentionMode::Sum] {
                for tie in [false, true] {
                    let mut cfg = tiny(kind);
                    cfg.mode = mode;
                    cfg.tie_embeddings = tie;
                    cfg.layers = 2;
                    let m = build_model::<f64>(&cfg).unwrap();
                    let b = m.count_parameters();
                    assert_eq!(b, expected_parameters(&cfg));
                    assert_eq!(b.total, m.params().scalar_count());
                    assert_eq!(
                        b.attention,
                        2 * count_attention_params(kind, cfg.attention_dims(), true)
                    );
                    if tie {
                        assert_eq!(b.output, 0);
                    } else {
                        assert_eq!(b.output, cfg.vocab_size * cfg.d_model);
                    }
                }
            }
        }
    }

    #[test]
    fn swapping_attention_kind_at_ptb_width() {
        let mut cfg = ModelConfig::ptb(100);
        cfg.rank = 40;
        let ml = count_attention_params(AttentionKind::MultiLinear, cfg.attention_dims(), false);
        let mh = count_attention_params(AttentionKind::MultiHead, cfg.attention_dims(), false);
        assert_eq!((mh, ml), (61440, 30800));
        let a = expected_parameters(&cfg);
        let b = expected_parameters(&cfg.twin());
        assert!(a.total < b.total);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding::<f64>(3, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe2 = positional_encoding::<f64>(2, 2);
        assert!((pe2.get(1, 0) - 0.84147).abs() < 1e-5);
        assert!((pe2.get(1, 1) - 0.54030).abs() < 1e-5);
        let big = positional_encoding::<f64>(50, 16);
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn forward_shapes_and_errors() {
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            let m = build_model::<f64>(&tiny(kind)).unwrap();
            let logits = m.forward_lm(&[4], None).unwrap();
            assert_eq!(logits.shape(), (1, 11));
            assert!(logits.is_finite());
            assert!(matches!(m.forward_lm(&[11], None), Err(Error::Input(_))));
            assert!(matches!(m.forward_lm(&[1; 9], None), Err(Error::Input(_))));
        }
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            for layers in 1..=2 {
                let mut cfg = tiny(kind);
                cfg.layers = layers;
                let m = build_model::<f64>(&cfg).unwrap();
                for _ in 0..10 {
                    let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(0..11)).collect();
                    let t = rng.random_range(0..6);
                    let mut flipped = tokens.clone();
                    flipped[t] = (flipped[t] + 1 + rng.random_range(0..10)) % 11;
                    let a = m.forward_lm(&tokens, None).unwrap();
                    let b = m.forward_lm(&flipped, None).unwrap();
                    for r in 0..t {
                        assert_eq!(a.row(r), b.row(r));
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_in_both_modes() {
        let m = build_model::<f64>(&tiny(AttentionKind::MultiLinear)).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        assert_eq!(m.forward_lm(&tokens, None).unwrap(), m.forward_lm(&tokens, None).unwrap());
        assert_eq!(
            m.forward_lm(&tokens, Some(9)).unwrap(),
            m.forward_lm(&tokens, Some(9)).unwrap()
        );
        assert_ne!(
            m.forward_lm(&tokens, Some(9)).unwrap(),
            m.forward_lm(&tokens, None).unwrap()
        );
    }

    fn layer_norm_rows(x: &Matrix<f64>, gain: &Matrix<f64>, bias: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (row[c] - mean) / (var + 1e-5).sqrt() * gain.get(0, c) + bias.get(0, c)
        })
    }

    fn add_row(x: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + b.get(0, c))
    }

    fn recompose(m: &Model<f64>, tokens: &[usize]) -> Matrix<f64> {
        let cfg = m.config();
        let emb = m.embedding_matrix();
        let scale = (cfg.d_model as f64).sqrt();
        let pe = positional_encoding::<f64>(tokens.len(), cfg.d_model);
        let mut x = Matrix::from_fn(tokens.len(), cfg.d_model, |r, c| {
            emb.get(tokens[r], c) * scale + pe.get(r, c)
        });
        for l in 0..cfg.layers {
            let attn = match cfg.attention {
                AttentionKind::MultiLinear => {
                    let p = m.attention_params(l).unwrap();
                    crate::attention::multi_linear_attention(&p, &x, &x, &x, true).unwrap()
                }
                AttentionKind::MultiHead => {
                    let p = m.multi_head_params(l).unwrap();
                    crate::attention::multi_head_attention(&p, &x, &x, &x, true).unwrap()
                }
            };
            let [w1, b1, w2, b2, g1, n1, g2, n2] = m.layer_matrices(l).unwrap();
            x = layer_norm_rows(&x.add(&attn).unwrap(), g1, n1);
            let h = add_row(&x.matmul(w1).unwrap(), b1).map(|v| v.max(0.0));
            let f = add_row(&h.matmul(w2).unwrap(), b2);
            x = layer_norm_rows(&x.add(&f).unwrap(), g2, n2);
        }
        x.matmul(&m.output_matrix()).unwrap()
    }

    #[test]
    fn forward_matches_step_by_step_recomposition() {
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            for mode in [AttentionMode::Chunked, AttentionMode::Sum] {
                for tie in [false, true] {
                    let mut cfg = tiny(kind);
                    cfg.mode = mode;
                    cfg.tie_embeddings = tie;
                    cfg.layers = 2;
                    let m = build_model::<f64>(&cfg).unwrap();
                    let tokens = [3, 1, 4, 1, 5, 9, 2];
                    let got = m.forward_lm(&tokens, None).unwrap();
                    let want = recompose(&m, &tokens);
                    assert!(got.max_abs_diff(&want) < 1e-10, "{kind:?} {mode:?} {tie}");
                }
            }
        }
    }

    #[test]
    fn batched_forward_equals_per_sequence_forward() {
        let m = build_model::<f64>(&tiny(AttentionKind::MultiLinear)).unwrap();
        let a = [1, 2, 3, 4];
        let b = [5, 6, 7, 8];
        let mut tape = Tape::new();
        let both: Vec<usize> = a.iter().chain(&b).copied().collect();
        let node = m.forward_tape::<ChaCha8Rng>(&mut tape, &both, 4, None).unwrap();
        let stacked = tape.value(node).unwrap().clone();
        let want = Matrix::concat_rows(&[m.forward_lm(&a, None).unwrap(), m.forward_lm(&b, None).unwrap()]).unwrap();
        assert!(stacked.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn tiny_lm_gradient_check() {
        for kind in [AttentionKind::MultiLinear, AttentionKind::MultiHead] {
            let mut cfg = tiny(kind);
            cfg.dropout = 0.0;
            let m = build_model::<f64>(&cfg).unwrap();
            let tokens = [3, 7, 1, 9];
            let targets = [7, 1, 9, 2];
            let report = crate::autodiff::finite_diff_check(m.params(), 1e-5, None, 0, |tape, store| {
                let model = Model::from_store(cfg.clone(), store.clone())?;
                let logits = model.forward_tape::<ChaCha8Rng>(tape, &tokens, 4, None)?;
                tape.cross_entropy(logits, &targets, 0.1, None)
            })
            .unwrap();
            assert_eq!(report.params.len(), m.params().len());
            assert!(report.max_rel_error() < 1e-4, "{kind:?}: {}", report.max_rel_error());
        }
    }

    #[test]
    fn flop_rule_examples() {
        let mut cfg = tiny(AttentionKind::MultiLinear);
        cfg.d_model = 4;
        cfg.d = 2;
        cfg.rank = 2;
        cfg.d_ff = 8;
        cfg.vocab_size = 10;
        // Hand tally at N = 2, h = 2, chunked:
        //   Q/K/V 3·2·2·4·2 = 96, Wo 2·2·4·4 = 64
        //   scores 2·2·2·2 = 16, score·V 2·2·2·2 = 16
        //   FFN 2·2·4·8 + 2·2·8·4 = 256, output 2·2·4·10 = 160
        let f = estimate_flops(&cfg, 2);
        assert_eq!(f.projections, 160);
        assert_eq!(f.attention_mixing, 32);
        assert_eq!(f.ffn, 256);
        assert_eq!(f.output, 160);
        assert_eq!(f.total, 608);

        let f1 = estimate_flops(&cfg, 16);
        let f2 = estimate_flops(&cfg, 32);
        assert_eq!(f2.attention_mixing, 4 * f1.attention_mixing);
        assert_eq!(f2.ffn, 2 * f1.ffn);
        assert_eq!(f2.projections, 2 * f1.projections);

        let m = build_model::<f64>(&cfg).unwrap();
        assert!(m.estimate_flops(9).is_err());
    }
}
