//! Token layout of a flattened multivariate sequence and its attention mask.
//!
//! Layout: `[PROMPT?] CLS (CIT_c, patch_c,0 .. patch_c,T̂-1) for c in 0..C`.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// Retrieval-augmented soft prompt prefix.
    Prompt,
    Cls,
    Cit,
    Patch,
    MaskedPatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub roles: Vec<TokenRole>,
    pub channel_of: Vec<Option<usize>>,
    pub patch_index_of: Vec<Option<usize>>,
    pub channels: usize,
    pub patches: usize,
    prefix: usize,
}

impl TokenLayout {
    pub fn new(channels: usize, patches: usize, with_prompt: bool) -> Self {
        let prefix = usize::from(with_prompt);
        let len = channels * (patches + 1) + 1 + prefix;
        let mut roles = Vec::with_capacity(len);
        let mut channel_of = Vec::with_capacity(len);
        let mut patch_index_of = Vec::with_capacity(len);
        if with_prompt {
            roles.push(TokenRole::Prompt);
            channel_of.push(None);
            patch_index_of.push(None);
        }
        roles.push(TokenRole::Cls);
        channel_of.push(None);
        patch_index_of.push(None);
        for c in 0..channels {
            roles.push(TokenRole::Cit);
            channel_of.push(Some(c));
            patch_index_of.push(None);
            for t in 0..patches {
                roles.push(TokenRole::Patch);
                channel_of.push(Some(c));
                patch_index_of.push(Some(t));
            }
        }
        Self {
            roles,
            channel_of,
            patch_index_of,
            channels,
            patches,
            prefix,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn has_prompt(&self) -> bool {
        self.prefix == 1
    }

    pub fn cls_pos(&self) -> usize {
        self.prefix
    }

    pub fn cit_pos(&self, c: usize) -> usize {
        self.prefix + 1 + c * (self.patches + 1)
    }

    pub fn patch_pos(&self, c: usize, t: usize) -> usize {
        self.cit_pos(c) + 1 + t
    }

    /// Positions of all patch tokens, channel-major.
    pub fn patch_positions(&self) -> Vec<usize> {
        (0..self.channels)
            .flat_map(|c| (0..self.patches).map(move |t| (c, t)))
            .map(|(c, t)| self.patch_pos(c, t))
            .collect()
    }

    /// Marks patches (channel-major bitmap of length `C·T̂`) as masked.
    pub fn apply_mask(&mut self, bitmap: &[bool]) -> Result<()> {
        if bitmap.len() != self.channels * self.patches {
            return Err(invalid(
                "apply_mask",
                format!("bitmap of {} for {} patches", bitmap.len(), self.channels * self.patches),
            ));
        }
        for (k, &m) in bitmap.iter().enumerate() {
            let pos = self.patch_pos(k / self.patches, k % self.patches);
            self.roles[pos] = if m {
                TokenRole::MaskedPatch
            } else {
                TokenRole::Patch
            };
        }
        Ok(())
    }

    /// Rotary positions: the temporal patch index for patch tokens, zero
    /// (identity rotation) for every other role.
    pub fn rope_positions(&self) -> Vec<f64> {
        self.patch_index_of
            .iter()
            .map(|p| p.map_or(0.0, |t| t as f64))
            .collect()
    }
}

/// Additive `L×L` mask: a CIT row may attend only to tokens of its own
/// channel; every other row is unrestricted.
pub fn build_attention_mask(layout: &TokenLayout) -> Tensor {
    let l = layout.len();
    let mut m = Tensor::zeros(&[l, l]);
    let data = m.data_mut();
    for i in 0..l {
        if layout.roles[i] != TokenRole::Cit {
            continue;
        }
        let c = layout.channel_of[i];
        for j in 0..l {
            if layout.channel_of[j] != c {
                data[i * l + j] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

/// Number of patches masked at ratio `gamma`: `⌈γ·n⌉`.
pub fn masked_count(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64).ceil() as usize).min(n)
}

/// Draws `⌈γ·C·T̂⌉` patches uniformly without replacement (channel-major bitmap).
/// Draws that hide every patch of some channel are redrawn while an
/// alternative exists.
pub fn draw_patch_mask<R: Rng>(
    channels: usize,
    patches: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("apply_mask", format!("mask ratio {gamma} outside (0, 1)")));
    }
    let n = channels * patches;
    let k = masked_count(gamma, n);
    if k >= n {
        return Err(invalid(
            "apply_mask",
            format!("ratio {gamma} would mask all {n} patches"),
        ));
    }
    // a channel is necessarily fully hidden once k exceeds C·(T̂-1)
    let avoidable = k <= channels * (patches - 1);
    let mut bitmap = vec![false; n];
    for _ in 0..64 {
        bitmap.iter_mut().for_each(|b| *b = false);
        for i in sample(rng, n, k) {
            bitmap[i] = true;
        }
        let full_channel = bitmap.chunks(patches).any(|ch| ch.iter().all(|&b| b));
        if !full_channel || !avoidable {
            break;
        }
    }
    Ok(bitmap)
}
