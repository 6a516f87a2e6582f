use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::ExampleConfig;

/// Architecture of the encoder-decoder. Every parameter shape follows from
/// these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    #[serde(default = "default_buckets")]
    pub rel_pos_buckets: usize,
    #[serde(default = "default_max_distance")]
    pub rel_pos_max_distance: usize,
    pub max_input_len: usize,
    pub max_label_len: usize,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    /// Prepend the "Definitions: " / "Word: " prefixes. Off for the shared
    /// multilingual model.
    #[serde(default = "yes")]
    pub task_prefixes: bool,
    #[serde(default)]
    pub dropout: f32,
}

fn default_buckets() -> usize {
    32
}

fn default_max_distance() -> usize {
    128
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale default: 4+4 layers, d_model 256, 4 heads, d_ff 1024.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            n_enc_layers: 4,
            n_dec_layers: 4,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            max_input_len: 64,
            max_label_len: 16,
            tie_embeddings: true,
            task_prefixes: true,
            dropout: 0.0,
        }
    }

    /// 2+2 layers, d_model 16, 2 heads: the gradient-check configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            rel_pos_buckets: 8,
            rel_pos_max_distance: 16,
            max_input_len: 32,
            max_label_len: 16,
            tie_embeddings: true,
            task_prefixes: true,
            dropout: 0.0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn example_config(&self) -> ExampleConfig {
        ExampleConfig {
            task_prefixes: self.task_prefixes,
            max_input_len: self.max_input_len,
            max_label_len: self.max_label_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("rel_pos_buckets", self.rel_pos_buckets),
            ("rel_pos_max_distance", self.rel_pos_max_distance),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rel_pos_buckets % 2 != 0 || self.rel_pos_buckets < 4 {
            return Err(ModelError::Config(
                "rel_pos_buckets must be even and at least 4".into(),
            ));
        }
        if self.max_input_len < 2 || self.max_label_len < 2 {
            return Err(ModelError::Config("max lengths must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
