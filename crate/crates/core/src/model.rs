//! Model description: hyperparameters and weight tensors.
//!
//! The architecture is a decoder-only transformer with post-norm blocks:
//! attention and feed-forward sub-layers each followed by residual add and
//! LayerNorm. There is no positional encoding; order information enters only
//! through the causal mask. The FFN activation is the tanh form of GELU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if self.ln_eps <= 0.0 || !self.ln_eps.is_finite() {
            return Err(Error::Config("ln_eps must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Tensor,
    pub unembedding: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let check = |t: &Tensor, shape: &[usize], what: &'static str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: what,
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            Ok(())
        };
        check(&self.embedding, &[config.vocab_size, d], "embedding")?;
        check(&self.unembedding, &[d, config.vocab_size], "unembedding")?;
        if self.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "expected {} layers of weights, found {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        for lw in &self.layers {
            check(&lw.w_q, &[d, d], "w_q")?;
            check(&lw.w_k, &[d, d], "w_k")?;
            check(&lw.w_v, &[d, d], "w_v")?;
            check(&lw.w_o, &[d, d], "w_o")?;
            check(&lw.ffn_w1, &[d, config.d_ff], "ffn_w1")?;
            check(&lw.ffn_b1, &[config.d_ff], "ffn_b1")?;
            check(&lw.ffn_w2, &[config.d_ff, d], "ffn_w2")?;
            check(&lw.ffn_b2, &[d], "ffn_b2")?;
            check(&lw.ln1_gain, &[d], "ln1_gain")?;
            check(&lw.ln1_bias, &[d], "ln1_bias")?;
            check(&lw.ln2_gain, &[d], "ln2_gain")?;
            check(&lw.ln2_bias, &[d], "ln2_bias")?;
        }
        Ok(())
    }
}

/// A config paired with weights that have passed shape validation.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Model> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.weights.layers[l]
    }
}
