use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Feed-forward block flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `gelu(x·W_in + b_in)·W_out + b_out` with layer norm (GPT-2 style).
    Plain,
    /// `(silu(x·W_gate) ⊙ x·W_up)·W_down` with RMS norm (LLaMA style).
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Learned,
    Rotary,
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub ffn_kind: FfnKind,
    pub position_kind: PositionKind,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.position_kind == PositionKind::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "rotary positions need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.norm_eps > 0.0) {
            return Err(CoreError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_sites(&self) -> usize {
        self.n_layers * self.d_ff
    }

    /// Every neuron site, layer-major.
    pub fn sites(&self) -> impl Iterator<Item = NeuronSite> + '_ {
        (0..self.n_layers)
            .flat_map(move |layer| (0..self.d_ff).map(move |neuron| NeuronSite { layer, neuron }))
    }

    pub fn check_site(&self, site: NeuronSite) -> Result<()> {
        if site.layer < self.n_layers && site.neuron < self.d_ff {
            Ok(())
        } else {
            Err(CoreError::Site {
                site,
                n_layers: self.n_layers,
                d_ff: self.d_ff,
            })
        }
    }
}

/// Address of one feed-forward intermediate unit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NeuronSite {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronSite {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }
}

impl fmt::Display for NeuronSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.N{}", self.layer, self.neuron)
    }
}
