//! Run configuration: the JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensorized::attention::{AttentionKind, AttentionMode};
use tensorized::model::ModelConfig;
use tensorized::training::{TrainConfig, VocabSpec};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Text,
    Json,
    Csv,
}

/// Model hyperparameters except the vocabulary size, which comes from the
/// corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub d: usize,
    pub heads: usize,
    pub rank: usize,
    pub d_ff: usize,
    /// Defaults to the training sequence length.
    pub max_seq_len: Option<usize>,
    pub dropout: f64,
    pub attention: AttentionKind,
    pub mode: AttentionMode,
    pub tie_embeddings: bool,
    pub scale_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 3,
            d_model: 128,
            d: 40,
            heads: 2,
            rank: 40,
            d_ff: 512,
            max_seq_len: None,
            dropout: 0.1,
            attention: AttentionKind::MultiLinear,
            mode: AttentionMode::Chunked,
            tie_embeddings: false,
            scale_embeddings: true,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, seq_len: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            d: self.d,
            heads: self.heads,
            rank: self.rank,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len.unwrap_or(seq_len),
            dropout: self.dropout,
            attention: self.attention,
            mode: self.mode,
            tie_embeddings: self.tie_embeddings,
            scale_embeddings: self.scale_embeddings,
            seed,
        }
    }
}

fn default_vocab() -> VocabSpec {
    VocabSpec::char()
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything `train` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default = "default_vocab")]
    pub vocab: VocabSpec,
    /// Trailing share of the corpus held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<(), Failure> {
        let mut problems = Vec::new();
        if self.corpus.is_none() {
            problems.push("corpus path is required (config \"corpus\" or --corpus)".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            problems.push(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        // Probe with a placeholder vocabulary; the real size is checked later.
        let probe = self.model.resolve(8, self.train.seq_len, self.train.seed);
        if let Err(tensorized::Error::Config(v)) = probe.validate() {
            problems.extend(v);
        }
        if let Err(tensorized::Error::Config(v)) = self.train.validate(probe.max_seq_len) {
            problems.extend(v);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::config(format!("invalid configuration: {}", problems.join("; "))))
        }
    }
}
