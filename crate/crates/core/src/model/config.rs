use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequence-mixing sublayer of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    /// Multi-head self-attention with rotary positions.
    Attention,
    /// Bias-free `[L, L]` linear map across the sequence axis.
    Mixer,
}

/// Where each block normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `h = norm(h + f(h))`; keeps recursed states at unit scale.
    #[default]
    Post,
    /// `h = h + f(norm(h))`; zero sublayer weights give the identity map.
    Pre,
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_layers: usize,
    pub hidden_d: usize,
    pub n_heads: usize,
    pub expansion: f64,
    pub variant: MixerKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// SwiGLU inner width is rounded up to a multiple of this.
    pub ffn_multiple: usize,
    pub norm: NormPlacement,
    /// Rows in the puzzle-id embedding table; 0 disables it, 1 shares one vector.
    pub puzzle_ids: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_layers: 2,
            hidden_d: 512,
            n_heads: 8,
            expansion: 4.0,
            variant: MixerKind::Mixer,
            vocab_size: 11,
            seq_len: 81,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            ffn_multiple: 256,
            norm: NormPlacement::Post,
            puzzle_ids: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.hidden_d == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("n_layers, hidden_d, vocab_size and seq_len must be positive");
        }
        if self.ffn_multiple == 0 {
            return bad("ffn_multiple must be positive");
        }
        if !(self.expansion > 0.0) {
            return bad("expansion must be positive");
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return bad("norm_eps and rope_base must be positive");
        }
        if self.variant == MixerKind::Attention {
            if self.n_heads == 0 || self.hidden_d % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "hidden_d {} not divisible by n_heads {}",
                    self.hidden_d, self.n_heads
                )));
            }
            if self.head_dim() % 2 != 0 {
                return Err(Error::Config(format!(
                    "rotary embeddings need an even head dim, got {}",
                    self.head_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_d / self.n_heads.max(1)
    }

    /// SwiGLU inner width: `round(expansion * D * 2/3)` rounded up to `ffn_multiple`.
    pub fn ffn_inner(&self) -> usize {
        let raw = (self.expansion * self.hidden_d as f64 * 2.0 / 3.0).round() as usize;
        raw.div_ceil(self.ffn_multiple) * self.ffn_multiple
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_width_rounding() {
        let mut c = NetConfig::default();
        assert_eq!(c.ffn_inner(), 1536);
        c.ffn_multiple = 8;
        assert_eq!(c.ffn_inner(), 1368);
        c.hidden_d = 8;
        assert_eq!(c.ffn_inner(), 24);
    }

    #[test]
    fn attention_requires_divisible_heads() {
        let c = NetConfig {
            variant: MixerKind::Attention,
            hidden_d: 30,
            n_heads: 4,
            ..NetConfig::default()
        };
        assert!(c.validate().is_err());
        let c = NetConfig {
            variant: MixerKind::Mixer,
            hidden_d: 30,
            n_heads: 4,
            ..NetConfig::default()
        };
        assert!(c.validate().is_ok());
    }
}
