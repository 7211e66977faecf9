// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// FFN non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `x · sigmoid(x)` (SiLU).
    SigmoidWeightedLinear,
    /// GELU, tanh approximation.
    GaussianErrorLinear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::SigmoidWeightedLinear => x / (1.0 + (-x).exp()),
            Activation::GaussianErrorLinear => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::SigmoidWeightedLinear => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::GaussianErrorLinear => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnKind {
    /// `F = W_fc2 act(W_fc1 r)`
    TwoMatrix,
    /// `F = W_fc2 (act(W_fc1 r) * (W_gate r))`
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub ffn_kind: FfnKind,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            ffn_width: 2048,
            n_heads: 2,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            activation: Activation::SigmoidWeightedLinear,
            ffn_kind: FfnKind::TwoMatrix,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.ffn_width == 0 {
            return bad("ffn_width must be >= 1");
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.ffn_width
    }
}
