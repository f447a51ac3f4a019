//! A desk-scale Transformer encoder-decoder trained on multi-granularity
//! views, with greedy/beam decoding and granularity selection.
//!
//! All views of a sentence index one embedding matrix; the view at size `q`
//! reads rows `0..q` of it, so augmented vocabularies add no parameters.

mod checkpoint;
mod decode;
mod gradcheck;
mod matrix;
mod model;
mod tape;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decode::{decode, decode_all, dynamic_select, normalised_score, oracle_select, sentence_bleu, Hypothesis};
pub use gradcheck::{gradient_check, GradCheckReport, REL_ERROR_FLOOR};
pub use matrix::Matrix;
pub use model::{EmbeddingMatrix, Seq2Seq};
pub use tape::{Tape, Var};
pub use train::{evaluate, fit, learning_rate, token_accuracy, train, Adam, EpochStats, TrainReport};

use crate::bpe::BpeError;
use crate::loss::{KlMode, LossError};

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: u32, size: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error(
        "non-finite loss at step {step} (lr {lr:.3e}); lower the learning rate, lengthen warmup or enable clipping"
    )]
    NonFinite { step: usize, lr: f64 },
    #[error("empty hypothesis has no length-normalised score")]
    EmptyHypothesis,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture, objective and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers per stack (encoder and decoder each).
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub prime_size: usize,
    pub aug_sizes: Vec<usize>,
    pub alpha: f64,
    pub smoothing: f64,
    pub kl_mode: KlMode,
    pub seed: u64,
    /// Peak learning rate of the inverse-sqrt schedule.
    pub lr: f64,
    pub warmup: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            prime_size: 0,
            aug_sizes: Vec::new(),
            alpha: 5.0,
            smoothing: 0.1,
            kl_mode: KlMode::Mean,
            seed: 1,
            lr: 1e-3,
            warmup: 200,
            steps: 1000,
            batch_size: 16,
            clip_norm: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NmtError> {
        let bad = |m: &str| Err(NmtError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("d_model, n_heads and ffn_dim must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.prime_size <= crate::bpe::EOS_ID as usize {
            return bad("prime_size must cover the special tokens");
        }
        if self.aug_sizes.iter().any(|&q| q <= crate::bpe::EOS_ID as usize) {
            return bad("augmented sizes must cover the special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("smoothing must be in [0, 1)");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if self.alpha > 0.0 && self.aug_sizes.is_empty() {
            return bad("alpha > 0 needs at least one augmented size");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch_size and lr must be positive");
        }
        Ok(())
    }

    /// Rows of the shared embedding matrix.
    pub fn embedding_rows(&self) -> usize {
        self.aug_sizes.iter().copied().fold(self.prime_size, usize::max)
    }
}
