//! Encoder-decoder transformer with hand-written reverse mode.
//!
//! The encoder embeds each position as the sum of question, part, position
//! and explanation vectors; the decoder as the sum of position, shifted
//! response, elapsed time and the three lag granularities. Both stacks use
//! post-norm residual blocks and the same causal mask, which also restricts
//! decoder-to-encoder attention. A linear head with a sigmoid gives the
//! probability of a correct answer at every position.
//!
//! All computation runs on the valid positions of a window only; pad
//! positions can neither attend nor be attended to, so dropping them is
//! equivalent to masking them.

mod layers;
mod network;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Stream, VocabSpec, DEFAULT_MAX_SEQ};

pub use layers::{
    attention, attention_weights, decoder_layer, encoder_layer, feed_forward, layer_norm, layer_norm_rows,
    multi_head_attention, AttentionMask, Dropout, LAYER_NORM_EPS, MASKED_LOGIT,
};
pub use network::{backward_window, embed_decoder, embed_encoder, forward, forward_logits, WindowPass};
pub use params::{
    init_params, AttentionParams, DecoderLayerParams, Embeddings, EncoderLayerParams, FeedForwardParams,
    LayerNormParams, ModelParams,
};

/// Floating-point element type of the model: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks drawn from a generator seeded with `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Deterministic, no dropout.
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub dropout: f64,
    pub vocab: VocabSpec,
    pub seed: u64,
}

impl ModelConfig {
    /// 128-wide model, 8 heads, 2 encoder and 2 decoder layers, dropout 0.1.
    pub fn standard(vocab: VocabSpec) -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 512,
            max_seq: DEFAULT_MAX_SEQ,
            dropout: 0.1,
            vocab,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.vocab.validate()
    }

    /// Closed-form count of learnable scalars.
    ///
    /// ```text
    /// embeddings  d * (Σ_streams rows(stream) + 2 * max_seq)
    /// encoder     n_enc * (4d² + 2·d·d_ff + d_ff + d + 4d)
    /// decoder     n_dec * (8d² + 2·d·d_ff + d_ff + d + 6d)
    /// head        d + 1
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let rows: usize = Stream::ALL.iter().map(|&s| self.vocab.rows(s)).sum();
        let ffn = 2 * d * self.d_ff + self.d_ff + d;
        d * (rows + 2 * self.max_seq)
            + self.n_enc_layers * (4 * d * d + ffn + 4 * d)
            + self.n_dec_layers * (8 * d * d + ffn + 6 * d)
            + d
            + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_matches_reference_hyperparameters() {
        let c = ModelConfig::standard(VocabSpec::new(13523));
        assert_eq!((c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers), (128, 8, 2, 2));
        assert_eq!((c.max_seq, c.d_ff), (100, 512));
        assert_eq!(c.dropout, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_dropout() {
        let mut c = ModelConfig::standard(VocabSpec::new(3));
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 8;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
