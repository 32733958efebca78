use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Dual visual/text softmax with bidirectional visual attention.
    Mda,
    /// Single causal softmax over the whole sequence.
    Causal,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Mda => "mda",
            AttentionMode::Causal => "causal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    /// Number of visual slots in every sequence.
    pub l_visual: usize,
    /// Width of a raw patch feature vector.
    pub d_patch: usize,
    pub max_text_len: usize,
    /// Hidden width of the per-block MLP.
    pub d_ff: usize,
    pub attention_mode: AttentionMode,
    pub renormalize_dual_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            vocab_size: 64,
            l_visual: 16,
            d_patch: 8,
            max_text_len: 32,
            d_ff: 128,
            attention_mode: AttentionMode::Mda,
            renormalize_dual_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1");
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must be at least 4 (PAD, BOS, EOS, SEP)");
        }
        if self.d_patch == 0 || self.d_ff == 0 || self.max_text_len == 0 {
            return fail("d_patch, d_ff and max_text_len must be positive");
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Rows in the positional table: visual slots plus the text budget.
    pub fn max_positions(&self) -> usize {
        self.l_visual + self.max_text_len
    }
}
