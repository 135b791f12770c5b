use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    #[default]
    Sinusoidal,
    Learned,
}

/// Hyperparameters that fix every tensor shape in the model.
///
/// Serialized field names follow the usual transformer notation: `d`
/// (embedding width), `D` (MLP hidden width), `L` (blocks), `h` (heads),
/// `M` (vocabulary size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "d")]
    pub d_model: usize,
    #[serde(rename = "D")]
    pub d_hidden: usize,
    #[serde(rename = "L")]
    pub n_layers: usize,
    #[serde(rename = "h")]
    pub n_heads: usize,
    #[serde(rename = "M")]
    pub vocab_size: usize,
    pub n_max: usize,
    #[serde(default = "default_eps")]
    pub eps_ln: f64,
    #[serde(default)]
    pub pos_mode: PosMode,
    /// Layer norm between the last block and the prediction head.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(d_model: usize, d_hidden: usize, n_layers: usize, n_heads: usize, vocab_size: usize, n_max: usize) -> Self {
        Self {
            d_model,
            d_hidden,
            n_layers,
            n_heads,
            vocab_size,
            n_max,
            eps_ln: default_eps(),
            pos_mode: PosMode::default(),
            final_norm: true,
        }
    }

    pub fn with_pos_mode(mut self, pos_mode: PosMode) -> Self {
        self.pos_mode = pos_mode;
        self
    }

    /// Per-head dimension `d / h`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.d_model),
            ("D", self.d_hidden),
            ("h", self.n_heads),
            ("M", self.vocab_size),
            ("n_max", self.n_max),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by h = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_hidden < self.d_model {
            return Err(Error::Config(format!(
                "MLP width D = {} must be at least d = {}",
                self.d_hidden, self.d_model
            )));
        }
        if !(self.eps_ln > 0.0 && self.eps_ln.is_finite()) {
            return Err(Error::Config(format!("eps_ln must be positive, got {}", self.eps_ln)));
        }
        Ok(())
    }
}
