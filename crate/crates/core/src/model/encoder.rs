//! Patch tokenization and the stack of channel-biased attention layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layout::{build_attention_mask, TokenLayout, TokenRole};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Read access to parameters for one forward pass. Frozen bindings copy
/// values onto the tape as constants, so no gradient reaches the store.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: false,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: true,
        }
    }

    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        if self.frozen {
            tape.constant(self.store.value(id).clone())
        } else {
            tape.param(self.store, id)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    /// Per-channel embedding added to every patch and mask token of that channel.
    pub channel: ParamId,
    pub cls: ParamId,
    pub cit: ParamId,
    pub mask: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_g: ParamId,
    pub final_b: ParamId,
}

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::full(&[d], 1.0), false);
    let b = store.add_zeros(format!("{name}.b"), &[d], false);
    (g, b)
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, p, c) = (cfg.d_model, cfg.patch_len, cfg.channels);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_w = store.add_normal("enc.patch.w", &[p, d], inv(p), rng);
        let patch_b = store.add_zeros("enc.patch.b", &[d], false);
        let channel = store.add_normal("enc.channel", &[c, d], 1.0, rng);
        let cls = store.add_normal("enc.cls", &[1, d], 1.0, rng);
        let cit = store.add_normal("enc.cit", &[c, d], 1.0, rng);
        let mask = store.add_normal("enc.mask", &[1, d], 1.0, rng);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("enc.l{l}.{s}");
                let (ln1_g, ln1_b) = add_ln(store, &n("ln1"), d);
                let qkv_w = store.add_normal(n("qkv.w"), &[d, 3 * d], inv(d), rng);
                let qkv_b = store.add_zeros(n("qkv.b"), &[3 * d], false);
                let out_w = store.add_normal(n("out.w"), &[d, d], inv(d), rng);
                let out_b = store.add_zeros(n("out.b"), &[d], false);
                let (ln2_g, ln2_b) = add_ln(store, &n("ln2"), d);
                let ff1_w = store.add_normal(n("ff1.w"), &[d, 4 * d], inv(d), rng);
                let ff1_b = store.add_zeros(n("ff1.b"), &[4 * d], false);
                let ff2_w = store.add_normal(n("ff2.w"), &[4 * d, d], inv(4 * d), rng);
                let ff2_b = store.add_zeros(n("ff2.b"), &[d], false);
                LayerParams {
                    ln1_g,
                    ln1_b,
                    qkv_w,
                    qkv_b,
                    out_w,
                    out_b,
                    ln2_g,
                    ln2_b,
                    ff1_w,
                    ff1_b,
                    ff2_w,
                    ff2_b,
                }
            })
            .collect();
        let (final_g, final_b) = add_ln(store, "enc.final", d);
        Self {
            patch_w,
            patch_b,
            channel,
            cls,
            cit,
            mask,
            layers,
            final_g,
            final_b,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.patch_w,
            self.patch_b,
            self.channel,
            self.cls,
            self.cit,
            self.mask,
        ];
        for l in &self.layers {
            v.extend([
                l.ln1_g, l.ln1_b, l.qkv_w, l.qkv_b, l.out_w, l.out_b, l.ln2_g, l.ln2_b, l.ff1_w,
                l.ff1_b, l.ff2_w, l.ff2_b,
            ]);
        }
        v.extend([self.final_g, self.final_b]);
        v
    }
}

/// Per-call switches of the encoder forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions<'a> {
    /// Channel-major bitmap of patches replaced by the mask embedding.
    pub mask: Option<&'a [bool]>,
    /// A `1×d` soft prompt prepended as an extra prefix token.
    pub prompt: Option<Var>,
    /// Hides the prefix column from every other row (ablation switch).
    pub hide_prompt: bool,
}

/// Output of [`encode_tape`].
#[derive(Debug, Clone)]
pub struct TapeEncoding {
    pub hidden: Var,
    /// Input of every layer followed by the final pre-norm residual stream.
    pub streams: Vec<Var>,
    pub layout: TokenLayout,
}

/// Builds the `(C·T̂)×P` patch matrix of a normalized `C×T` window.
pub fn patch_matrix(x: &[Vec<f64>], patch_len: usize) -> Result<Tensor> {
    let t = x.first().map_or(0, Vec::len);
    if t < patch_len || patch_len == 0 {
        return Err(invalid(
            "tokenize",
            format!("series length {t} is shorter than patch length {patch_len}"),
        ));
    }
    let np = t / patch_len;
    let mut data = Vec::with_capacity(x.len() * np * patch_len);
    for (c, ch) in x.iter().enumerate() {
        if ch.len() != t {
            return Err(invalid(
                "tokenize",
                format!("channel {c} has length {} but channel 0 has {t}", ch.len()),
            ));
        }
        data.extend_from_slice(&ch[..np * patch_len]);
    }
    Tensor::new(vec![x.len() * np, patch_len], data)
}

/// Zeroes entries with probability `rate` and rescales the rest.
fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let keep = 1.0 / (1.0 - rate);
    let m: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, m)?);
    tape.mul(x, m)
}

/// One pre-norm block: channel-biased multi-head attention with rotary
/// queries and keys, then a GELU feed-forward of width `4d`.
#[allow(clippy::too_many_arguments)]
pub fn cba_layer(
    tape: &mut Tape,
    bind: Bind,
    lp: &LayerParams,
    cfg: &ModelConfig,
    h: Var,
    mask: &Tensor,
    positions: &[f64],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let d = cfg.d_model;
    let dh = cfg.head_width();
    let p = |tape: &mut Tape, id| bind.var(tape, id);
    let (g1, b1) = (p(tape, lp.ln1_g), p(tape, lp.ln1_b));
    let a = tape.layer_norm(h, g1, b1, cfg.ln_eps)?;
    let (wq, bq) = (p(tape, lp.qkv_w), p(tape, lp.qkv_b));
    let qkv = tape.matmul(a, wq)?;
    let qkv = tape.add_bias(qkv, bq)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let q = tape.slice_cols(qkv, i * dh, dh)?;
        let k = tape.slice_cols(qkv, d + i * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + i * dh, dh)?;
        let q = tape.rope(q, positions, cfg.rope_base)?;
        let k = tape.rope(k, positions, cfg.rope_base)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale);
        let att = tape.softmax(s, Some(mask))?;
        heads.push(tape.matmul(att, v)?);
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let (wo, bo) = (p(tape, lp.out_w), p(tape, lp.out_b));
    let o = tape.matmul(o, wo)?;
    let o = tape.add_bias(o, bo)?;
    let o = dropout(tape, o, cfg.dropout, rng.as_deref_mut())?;
    let h = tape.add(h, o)?;

    let (g2, b2) = (p(tape, lp.ln2_g), p(tape, lp.ln2_b));
    let f = tape.layer_norm(h, g2, b2, cfg.ln_eps)?;
    let (w1, c1) = (p(tape, lp.ff1_w), p(tape, lp.ff1_b));
    let f = tape.matmul(f, w1)?;
    let f = tape.add_bias(f, c1)?;
    let f = tape.gelu(f);
    let (w2, c2) = (p(tape, lp.ff2_w), p(tape, lp.ff2_b));
    let f = tape.matmul(f, w2)?;
    let f = tape.add_bias(f, c2)?;
    let f = dropout(tape, f, cfg.dropout, rng)?;
    tape.add(h, f)
}

/// Token embeddings in layout order (Eq. 1 layout, optional prompt prefix).
pub fn tokenize(
    tape: &mut Tape,
    bind: Bind,
    ep: &EncoderParams,
    cfg: &ModelConfig,
    x: &[Vec<f64>],
    opts: &EncodeOptions,
) -> Result<(Var, TokenLayout)> {
    if x.len() != cfg.channels {
        return Err(invalid(
            "tokenize",
            format!("input has {} channels, model expects {}", x.len(), cfg.channels),
        ));
    }
    let patches = patch_matrix(x, cfg.patch_len)?;
    let c = cfg.channels;
    let np = patches.rows() / c;
    let mut layout = TokenLayout::new(c, np, opts.prompt.is_some());
    if let Some(m) = opts.mask {
        layout.apply_mask(m)?;
    }
    let xp = tape.constant(patches);
    let (w, b) = (bind.var(tape, ep.patch_w), bind.var(tape, ep.patch_b));
    let emb = tape.matmul(xp, w)?;
    let emb = tape.add_bias(emb, b)?;
    let n = c * np;
    let patch_tok = if let Some(m) = opts.mask {
        let mask_tok = bind.var(tape, ep.mask);
        let src = tape.concat_rows(&[emb, mask_tok])?;
        let idx: Vec<usize> = (0..n).map(|k| if m[k] { n } else { k }).collect();
        tape.gather_rows(src, &idx)?
    } else {
        emb
    };
    let chan = bind.var(tape, ep.channel);
    let chan_idx: Vec<usize> = (0..n).map(|k| k / np).collect();
    let chan = tape.gather_rows(chan, &chan_idx)?;
    let patch_tok = tape.add(patch_tok, chan)?;

    let cls = bind.var(tape, ep.cls);
    let cit = bind.var(tape, ep.cit);
    let mut parts = vec![patch_tok, cls, cit];
    if let Some(pr) = opts.prompt {
        let s = tape.value(pr).shape();
        if s != [1, cfg.d_model] {
            return Err(invalid(
                "tokenize",
                format!("prompt shape {s:?}, expected [1, {}]", cfg.d_model),
            ));
        }
        parts.push(pr);
    }
    let src = tape.concat_rows(&parts)?;
    // rows of `src`: patches 0..n, cls n, cit n+1..n+1+c, prompt n+1+c
    let order: Vec<usize> = layout
        .roles
        .iter()
        .enumerate()
        .map(|(i, role)| match role {
            TokenRole::Prompt => n + 1 + c,
            TokenRole::Cls => n,
            TokenRole::Cit => n + 1 + layout.channel_of[i].unwrap_or(0),
            TokenRole::Patch | TokenRole::MaskedPatch => {
                let ch = layout.channel_of[i].unwrap_or(0);
                ch * np + layout.patch_index_of[i].unwrap_or(0)
            }
        })
        .collect();
    Ok((tape.gather_rows(src, &order)?, layout))
}

/// Attention mask for `layout`, optionally hiding the prompt column.
pub fn layout_mask(layout: &TokenLayout, hide_prompt: bool) -> Tensor {
    let mut m = build_attention_mask(layout);
    if hide_prompt && layout.has_prompt() {
        let l = layout.len();
        for i in 1..l {
            m.data_mut()[i * l] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Full encoder forward on a normalized `C×T` window.
pub fn encode_tape(
    tape: &mut Tape,
    bind: Bind,
    ep: &EncoderParams,
    cfg: &ModelConfig,
    x: &[Vec<f64>],
    opts: &EncodeOptions,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeEncoding> {
    let (mut h, layout) = tokenize(tape, bind, ep, cfg, x, opts)?;
    let mask = layout_mask(&layout, opts.hide_prompt);
    let positions = layout.rope_positions();
    let mut streams = Vec::with_capacity(ep.layers.len() + 1);
    for lp in &ep.layers {
        streams.push(h);
        h = cba_layer(tape, bind, lp, cfg, h, &mask, &positions, rng.as_deref_mut())?;
    }
    streams.push(h);
    let (g, b) = (bind.var(tape, ep.final_g), bind.var(tape, ep.final_b));
    let hidden = tape.layer_norm(h, g, b, cfg.ln_eps)?;
    Ok(TapeEncoding {
        hidden,
        streams,
        layout,
    })
}
