use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which context views take part in contrastive alignment and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSet {
    pub conversation: bool,
    pub graph: bool,
    pub review: bool,
}

impl Default for ViewSet {
    fn default() -> Self {
        Self {
            conversation: true,
            graph: true,
            review: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the conversation encoder, review encoder and decoder.
    pub d_conv: usize,
    /// Width of graph node representations and the user vector.
    pub d_rec: usize,
    /// Shared space in which views are compared.
    pub d_contrast: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub n_rgcn_layers: usize,
    /// Constant divisor applied to every relational message.
    pub rgcn_norm: f64,
    pub max_positions: usize,
    pub temperature: f64,
    /// Weight of the coarse objective during fine-grained pre-training.
    pub coarse_weight: f64,
    /// Frequency at which generation-loss down-weighting starts.
    pub weight_threshold: f64,
    /// Smallest generation-loss weight.
    pub weight_floor: f64,
    /// Average the X->Y and Y->X contrastive directions.
    pub symmetric_contrast: bool,
    /// Use `log(pos / sum(neg))` without negation and without the positive in
    /// the denominator. Unbounded below; kept only for comparison runs.
    pub raw_log_ratio: bool,
    /// Mask in-batch negatives that come from the same conversation.
    pub exclude_same_conversation: bool,
    pub views: ViewSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_conv: 300,
            d_rec: 128,
            d_contrast: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            ffn_width: 300,
            n_rgcn_layers: 1,
            rgcn_norm: 1.0,
            max_positions: 256,
            temperature: 0.07,
            coarse_weight: 0.2,
            weight_threshold: 100.0,
            weight_floor: 0.1,
            symmetric_contrast: false,
            raw_log_ratio: false,
            exclude_same_conversation: true,
            views: ViewSet::default(),
        }
    }
}

impl ModelConfig {
    /// Small widths for unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_conv: 8,
            d_rec: 4,
            d_contrast: 4,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_width: 8,
            max_positions: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_conv", self.d_conv),
            ("d_rec", self.d_rec),
            ("d_contrast", self.d_contrast),
            ("n_heads", self.n_heads),
            ("ffn_width", self.ffn_width),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d_conv % self.n_heads != 0 {
            return err(format!("d_conv {} not divisible by n_heads {}", self.d_conv, self.n_heads));
        }
        if !(self.temperature > 0.0) {
            return err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.coarse_weight >= 0.0) {
            return err(format!("coarse_weight must be >= 0, got {}", self.coarse_weight));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1.0) {
            return err(format!("weight_floor must be in (0, 1], got {}", self.weight_floor));
        }
        if !(self.weight_threshold >= 1.0) {
            return err(format!("weight_threshold must be >= 1, got {}", self.weight_threshold));
        }
        if !(self.rgcn_norm > 0.0) {
            return err(format!("rgcn_norm must be > 0, got {}", self.rgcn_norm));
        }
        Ok(())
    }
}
