use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the transformer backbone and the summarization decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: 0,
            max_seq_len: 128,
            dropout_rate: 0.1,
            decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Adapter geometry. `bottleneck` defaults to `hidden/16`; the invertible
/// coupling networks default to `hidden/4` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub bottleneck: Option<usize>,
    pub invertible: bool,
    pub invertible_hidden: Option<usize>,
    pub drop_last_k: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: None,
            invertible: true,
            invertible_hidden: None,
            drop_last_k: 0,
        }
    }
}

pub const DEFAULT_REDUCTION: usize = 16;

impl AdapterConfig {
    pub fn bottleneck_for(&self, hidden: usize) -> usize {
        self.bottleneck.unwrap_or((hidden / DEFAULT_REDUCTION).max(1))
    }

    pub fn invertible_hidden_for(&self, hidden: usize) -> usize {
        self.invertible_hidden.unwrap_or((hidden / 4).max(1))
    }
}
