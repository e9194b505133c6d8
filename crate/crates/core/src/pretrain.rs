//! Masked-reconstruction pretraining of the encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Corpus, Split};
use crate::error::{invalid, Result, TraceError};
use crate::model::{
    draw_patch_mask, encode_tape, patch_matrix, reconstruct, revin_normalize, Bind,
    EncodeOptions, TraceModel,
};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::Gradients;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.3,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TraceError::Config(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("pretrain.mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if self.batch_size == 0 {
            return bad("pretrain.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("pretrain.warmup_frac must lie in [0, 1)".into());
        }
        if !(self.lr > 0.0) {
            return bad("pretrain.lr must be positive".into());
        }
        Ok(())
    }

    /// Warmup length for `total` steps; always shorter than the run.
    pub fn warmup_steps(&self, total: usize) -> usize {
        ((total as f64 * self.warmup_frac) as usize).min(total.saturating_sub(1))
    }
}

/// Masked-patch MSE of one normalized window: predictions of the masked
/// patches against their values, averaged over `masked·P` entries.
pub fn masked_loss(
    tape: &mut Tape,
    model: &TraceModel,
    bind: Bind,
    xn: &[Vec<f64>],
    bitmap: &[bool],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let target = patch_matrix(xn, model.config.patch_len)?;
    let opts = EncodeOptions {
        mask: Some(bitmap),
        ..Default::default()
    };
    let enc = encode_tape(tape, bind, &model.encoder, &model.config, xn, &opts, dropout)?;
    let pred = reconstruct(tape, bind, &model.recon, &enc)?;
    let p = model.config.patch_len;
    let mask: Vec<bool> = bitmap.iter().flat_map(|&m| std::iter::repeat_n(m, p)).collect();
    let target = tape.constant(target);
    tape.mse(pred, target, &mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainHistory {
    pub steps: Vec<PretrainRecord>,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl PretrainHistory {
    /// Loss of the first step, measured before any update.
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|r| r.loss)
    }

    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{:.9}\n", r.step, r.epoch, r.loss));
        }
        s
    }
}

/// RevIN-normalized training windows of a corpus split, cut to whole patches.
pub fn normalized_windows(model: &TraceModel, corpus: &Corpus, split: Split) -> Vec<Vec<Vec<f64>>> {
    let t = model.config.patches(corpus.manifest.length) * model.config.patch_len;
    corpus
        .split(split)
        .map(|inst| revin_normalize(&inst.window(t)).0)
        .collect()
}

pub fn pretrain(
    model: &mut TraceModel,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainHistory> {
    if corpus.manifest.channels != model.config.channels {
        return Err(TraceError::Config(format!(
            "corpus has {} channels, model expects {}",
            corpus.manifest.channels, model.config.channels
        )));
    }
    let windows = normalized_windows(model, corpus, Split::Train);
    pretrain_windows(model, &windows, cfg, seed)
}

/// Trains on already-normalized windows; masks are redrawn every epoch.
pub fn pretrain_windows(
    model: &mut TraceModel,
    windows: &[Vec<Vec<f64>>],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainHistory> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(invalid("pretrain", "empty training set"));
    }
    let c = model.config.channels;
    let np = model.config.patches(windows[0].first().map_or(0, Vec::len));
    let per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps(total);
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut history = PretrainHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut mask_rng = rng::indexed(seed, "mask", epoch as u64);
        let mut sum = 0.0;
        for batch in windows.chunks(cfg.batch_size) {
            let mut drop_rng = rng::indexed(seed, "dropout", step as u64);
            let mut grads = Gradients::new(&model.store);
            let mut batch_loss = 0.0;
            for xn in batch {
                let bitmap = draw_patch_mask(c, np, cfg.mask_ratio, &mut mask_rng)?;
                let mut tape = Tape::new();
                let dropout = (model.config.dropout > 0.0).then_some(&mut drop_rng);
                let loss = masked_loss(
                    &mut tape,
                    model,
                    Bind::trainable(&model.store),
                    xn,
                    &bitmap,
                    dropout,
                )?;
                batch_loss += tape.value(loss).item();
                grads.merge(&tape.backward(loss)?.params(&model.store));
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TraceError::NonFinite {
                    stage: "pretrain",
                    step,
                    value: batch_loss,
                });
            }
            grads.scale(1.0 / n);
            if cfg.clip_norm > 0.0 {
                grads.clip_norm(cfg.clip_norm);
            }
            opt.step(&mut model.store, &grads, lr_at(step, warmup, total, cfg.lr));
            model.store.quantize_f32();
            history.steps.push(PretrainRecord {
                step,
                epoch,
                loss: batch_loss,
            });
            sum += batch_loss;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("[pretrain] epoch {epoch} loss {mean:.5}");
        history.epoch_loss.push(mean);
    }
    Ok(history)
}

/// Mean masked-reconstruction MSE with masks drawn from `seed` (eval mode).
pub fn eval_masked_mse(
    model: &TraceModel,
    windows: &[Vec<Vec<f64>>],
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("pretrain", "empty evaluation set"));
    }
    let c = model.config.channels;
    let mut r = rng::substream(seed, "eval-mask");
    let mut sum = 0.0;
    for xn in windows {
        let np = model.config.patches(xn[0].len());
        let bitmap = draw_patch_mask(c, np, mask_ratio, &mut r)?;
        let mut tape = Tape::new();
        let l = masked_loss(&mut tape, model, Bind::frozen(&model.store), xn, &bitmap, None)?;
        sum += tape.value(l).item();
    }
    Ok(sum / windows.len() as f64)
}
