use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder and decoder layer count (N).
    pub layers: usize,
    /// Attention heads (h).
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Inner width of the position-wise feed-forward block.
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Visual grid length (L).
    pub grid_len: usize,
    /// Raw visual feature width.
    pub d_feat: usize,
    /// Dropout on the projected visual grid.
    pub p_drop_visual: Float,
    /// Dropout on embeddings and sublayer outputs.
    pub p_drop_residual: Float,
    pub max_len: usize,
}

impl ModelConfig {
    /// Base transformer sizes with a 14×14×1024 feature grid.
    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            src_vocab,
            tgt_vocab,
            grid_len: 196,
            d_feat: 1024,
            p_drop_visual: 0.5,
            p_drop_residual: 0.0,
            max_len: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("grid_len", self.grid_len),
            ("d_feat", self.d_feat),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, p) in [("p_drop_visual", self.p_drop_visual), ("p_drop_residual", self.p_drop_residual)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}
