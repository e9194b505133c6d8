use serde::{Deserialize, Serialize};

use crate::error::{Result, TraceError};

/// Encoder hyper-parameters plus the text-side widths used during alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_len: usize,
    pub channels: usize,
    pub mask_ratio: f64,
    pub dropout: f64,
    pub classes: usize,
    pub rope_base: f64,
    pub ln_eps: f64,
    /// Width of the frozen text features.
    pub text_width: usize,
    /// Hash buckets of the frozen bag-of-tokens text encoder.
    pub text_buckets: usize,
    /// Seed of the frozen text projection table.
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 384,
            n_layers: 6,
            n_heads: 6,
            patch_len: 6,
            channels: 7,
            mask_ratio: 0.3,
            dropout: 0.1,
            classes: 10,
            rope_base: 10_000.0,
            ln_eps: 1e-5,
            text_width: 256,
            text_buckets: 2048,
            text_seed: 0x7e47,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            patch_len: 24,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TraceError::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_width() % 2 != 0 {
            return bad(format!(
                "head width {} must be even for rotary pairing",
                self.head_width()
            ));
        }
        if self.patch_len == 0 {
            return bad("patch_len must be at least 1".into());
        }
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.classes == 0 || self.text_width == 0 || self.text_buckets == 0 {
            return bad("classes, text_width and text_buckets must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.ln_eps > 0.0) {
            return bad("rope_base must exceed 1 and ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Number of patches per channel for a window of `t` steps.
    pub fn patches(&self, t: usize) -> usize {
        t / self.patch_len
    }

    /// Token sequence length `C·(T̂+1)+1`.
    pub fn seq_len(&self, t: usize) -> usize {
        self.channels * (self.patches(t) + 1) + 1
    }
}
