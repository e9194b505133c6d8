//! Dual-level contrastive alignment between series and text.

pub mod fuse;
pub mod text;

pub use fuse::CrossFuse;
pub use text::TextStub;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Corpus, Split};
use crate::error::{invalid, Result, TraceError};
use crate::model::{encode_tape, revin_normalize, Bind, EncodeOptions, TraceModel};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::{dot, normalized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Hard negatives per anchor at each level.
    pub k: usize,
    pub lambda_ch: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Channel negatives only from other channels of the same instance and
    /// the same channel of other instances.
    pub restricted_channel_pool: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            k: 32,
            lambda_ch: 1.0,
            temperature: 0.07,
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            restricted_channel_pool: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TraceError::Config(m));
        if self.k == 0 {
            return bad("align.k must be at least 1".into());
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return bad(format!("align.temperature {} must be positive", self.temperature));
        }
        if self.batch_size < 2 {
            return bad("align.batch_size must be at least 2".into());
        }
        if self.lambda_ch < 0.0 {
            return bad("align.lambda_ch must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("align.warmup_frac must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Indices of the `k` highest `score(j)` over `candidates`; ties go to the lower index.
pub fn top_k(candidates: &[usize], k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&j| (score(j) + 0.0, j)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Mined negatives. Channel entries are indexed by `i·C + c` and hold `j·C + c'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSets {
    /// Text contexts for each series anchor.
    pub cxt: Vec<Vec<usize>>,
    /// Series for each text-context anchor.
    pub cxt_text: Vec<Vec<usize>>,
    pub ch: Vec<Vec<usize>>,
    pub ch_text: Vec<Vec<usize>>,
}

/// Unit-norm views of one batch, used for mining.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    pub channels: usize,
    /// `B` series-level vectors.
    pub ts_global: Vec<Vec<f64>>,
    pub text_global: Vec<Vec<f64>>,
    /// `B·C` channel vectors, instance-major.
    pub ts_channel: Vec<Vec<f64>>,
    pub text_channel: Vec<Vec<f64>>,
}

impl AlignmentBatch {
    pub fn len(&self) -> usize {
        self.ts_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts_global.is_empty()
    }
}

fn channel_pool(b: usize, c: usize, i: usize, ch: usize, restricted: bool) -> Vec<usize> {
    (0..b * c)
        .filter(|&m| {
            let (j, c2) = (m / c, m % c);
            if (j, c2) == (i, ch) {
                return false;
            }
            !restricted || j == i || c2 == ch
        })
        .collect()
}

/// Top-K hard negatives at both levels and in both directions.
pub fn mine_negatives(batch: &AlignmentBatch, k: usize, restricted: bool) -> NegativeSets {
    let b = batch.len();
    let c = batch.channels;
    let mut out = NegativeSets {
        cxt: Vec::with_capacity(b),
        cxt_text: Vec::with_capacity(b),
        ch: Vec::with_capacity(b * c),
        ch_text: Vec::with_capacity(b * c),
    };
    for i in 0..b {
        let pool: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        out.cxt.push(top_k(&pool, k, |j| {
            dot(&batch.ts_global[i], &batch.text_global[j])
        }));
        out.cxt_text.push(top_k(&pool, k, |j| {
            dot(&batch.text_global[i], &batch.ts_global[j])
        }));
    }
    for i in 0..b {
        for ch in 0..c {
            let a = i * c + ch;
            let pool = channel_pool(b, c, i, ch, restricted);
            out.ch.push(top_k(&pool, k, |m| {
                dot(&batch.ts_channel[a], &batch.text_channel[m])
            }));
            out.ch_text.push(top_k(&pool, k, |m| {
                dot(&batch.text_channel[a], &batch.ts_channel[m])
            }));
        }
    }
    out
}

/// `−log softmax` of the positive among `{positive} ∪ negatives` at temperature `tau`.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(TraceError::Config(format!("temperature {tau} must be positive")));
    }
    let pos = dot(anchor, positive) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negatives.iter().map(|n| dot(anchor, n) / tau))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Scalar parts of the alignment objective on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AlignLoss {
    pub total: Var,
    pub global: Var,
    pub channel: Var,
}

/// Mean InfoNCE over anchors: row `a` of `sim` (anchors × candidates) against
/// `[positive(a), negatives[a]...]`. `transpose` reads `sim[cand][a]` instead.
fn nce_term(
    tape: &mut Tape,
    sim: Var,
    negatives: &[Vec<usize>],
    transpose: bool,
    tau: f64,
) -> Result<Var> {
    let n = negatives.len();
    let width = negatives.first().map_or(0, Vec::len) + 1;
    let cols = tape.value(sim).cols();
    let at = |a: usize, cand: usize| {
        if transpose {
            cand * cols + a
        } else {
            a * cols + cand
        }
    };
    let mut idx = Vec::with_capacity(n * width);
    for (a, negs) in negatives.iter().enumerate() {
        if negs.len() + 1 != width {
            return Err(invalid("alignment_loss", "negative sets of unequal size"));
        }
        idx.push(at(a, a));
        idx.extend(negs.iter().map(|&j| at(a, j)));
    }
    let logits = tape.gather(sim, &idx, &[n, width])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp_rows(logits);
    let pos_idx: Vec<usize> = (0..n).map(|a| a * width).collect();
    let pos = tape.gather(logits, &pos_idx, &[n])?;
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean(diff))
}

/// Dual-level bidirectional InfoNCE on raw (unnormalized) embeddings:
/// `h_cls`, `z_cxt` are `B×d`; refined CIT and `z_ch` are `(B·C)×d`.
pub fn alignment_loss(
    tape: &mut Tape,
    h_cls: Var,
    z_cxt: Var,
    h_cit: Var,
    z_ch: Var,
    sets: &NegativeSets,
    lambda_ch: f64,
    tau: f64,
) -> Result<AlignLoss> {
    if tau <= 0.0 {
        return Err(TraceError::Config(format!("temperature {tau} must be positive")));
    }
    let hg = tape.l2_normalize_rows(h_cls);
    let zg = tape.l2_normalize_rows(z_cxt);
    let hc = tape.l2_normalize_rows(h_cit);
    let zc = tape.l2_normalize_rows(z_ch);
    // sim_g[i][j] = sim(h_i, z_j)
    let sim_g = tape.matmul_nt(hg, zg)?;
    let sim_c = tape.matmul_nt(hc, zc)?;
    let ts_text = nce_term(tape, sim_g, &sets.cxt, false, tau)?;
    let text_ts = nce_term(tape, sim_g, &sets.cxt_text, true, tau)?;
    let ch_ts_text = nce_term(tape, sim_c, &sets.ch, false, tau)?;
    let ch_text_ts = nce_term(tape, sim_c, &sets.ch_text, true, tau)?;
    let g = tape.add(ts_text, text_ts)?;
    let global = tape.scale(g, 0.5);
    let c = tape.add(ch_ts_text, ch_text_ts)?;
    let channel = tape.scale(c, 0.5);
    let weighted = tape.scale(channel, lambda_ch);
    let total = tape.add(global, weighted)?;
    Ok(AlignLoss {
        total,
        global,
        channel,
    })
}

/// Frozen text features of one instance: context then channel texts.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub context: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

pub fn text_features(model: &TraceModel, context: &str, channels: &[String]) -> TextFeatures {
    TextFeatures {
        context: model.text_stub.features(context),
        channels: channels.iter().map(|t| model.text_stub.features(t)).collect(),
    }
}

/// One instance prepared for alignment.
#[derive(Debug, Clone)]
pub struct AlignItem {
    /// RevIN-normalized window.
    pub series: Vec<Vec<f64>>,
    pub text: TextFeatures,
}

/// Loss values of one forward pass over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub global: f64,
    pub channel: f64,
}

/// Builds the full batch graph: encoder, text projection, fusion, mining and loss.
pub fn batch_loss(
    tape: &mut Tape,
    model: &TraceModel,
    items: &[&AlignItem],
    cfg: &AlignConfig,
) -> Result<AlignLoss> {
    let b = items.len();
    if b < 2 {
        return Err(invalid("alignment_loss", format!("batch of {b} needs at least 2")));
    }
    let mcfg = &model.config;
    let c = mcfg.channels;
    let bind = Bind::trainable(&model.store);
    let tw = model.text_stub.width();
    let ctx = Tensor::new(
        vec![b, tw],
        items.iter().flat_map(|it| it.text.context.iter().copied()).collect(),
    )?;
    let chf = Tensor::new(
        vec![b * c, tw],
        items
            .iter()
            .flat_map(|it| it.text.channels.iter().flatten().copied())
            .collect(),
    )?;
    let ctx = tape.constant(ctx);
    let chf = tape.constant(chf);
    let z_cxt = model.text_proj.forward(tape, bind, ctx)?;
    let z_ch = model.text_proj.forward(tape, bind, chf)?;

    let mut cls_rows = Vec::with_capacity(b);
    let mut cit_rows = Vec::with_capacity(b);
    for (i, it) in items.iter().enumerate() {
        let enc = encode_tape(
            tape,
            bind,
            &model.encoder,
            mcfg,
            &it.series,
            &EncodeOptions::default(),
            None,
        )?;
        let layout = &enc.layout;
        cls_rows.push(tape.slice_rows(enc.hidden, layout.cls_pos(), 1)?);
        let cit_idx: Vec<usize> = (0..c).map(|ch| layout.cit_pos(ch)).collect();
        let cit = tape.gather_rows(enc.hidden, &cit_idx)?;
        let zi = tape.slice_rows(z_ch, i * c, c)?;
        cit_rows.push(model.fuse.forward(tape, bind, cit, zi)?);
    }
    let h_cls = tape.concat_rows(&cls_rows)?;
    let h_cit = tape.concat_rows(&cit_rows)?;

    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| normalized(t.row(r))).collect()
    };
    let batch = AlignmentBatch {
        channels: c,
        ts_global: rows(tape.value(h_cls)),
        text_global: rows(tape.value(z_cxt)),
        ts_channel: rows(tape.value(h_cit)),
        text_channel: rows(tape.value(z_ch)),
    };
    let sets = mine_negatives(&batch, cfg.k, cfg.restricted_channel_pool);
    alignment_loss(
        tape,
        h_cls,
        z_cxt,
        h_cit,
        z_ch,
        &sets,
        cfg.lambda_ch,
        cfg.temperature,
    )
}

/// One optimizer step of the alignment history.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub global: f64,
    pub channel: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignHistory {
    pub steps: Vec<AlignRecord>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl AlignHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,global,channel\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9}\n",
                r.step, r.epoch, r.loss, r.global, r.channel
            ));
        }
        s
    }
}

pub fn prepare_items(model: &TraceModel, corpus: &Corpus, split: Split) -> Vec<AlignItem> {
    let t = model.config.patches(corpus.manifest.length) * model.config.patch_len;
    corpus
        .split(split)
        .map(|inst| AlignItem {
            series: revin_normalize(&inst.window(t)).0,
            text: text_features(model, &inst.context_text, &inst.channel_texts),
        })
        .collect()
}

/// Trains encoder, text projection and fusion jointly on the train split.
pub fn align(
    model: &mut TraceModel,
    corpus: &Corpus,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<AlignHistory> {
    cfg.validate()?;
    let items = prepare_items(model, corpus, Split::Train);
    align_items(model, &items, cfg, seed)
}

pub fn align_items(
    model: &mut TraceModel,
    items: &[AlignItem],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<AlignHistory> {
    cfg.validate()?;
    if items.len() < 2 {
        return Err(invalid("align", "need at least two training instances"));
    }
    let per_epoch = items.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = ((total as f64 * cfg.warmup_frac) as usize).min(total.saturating_sub(1));
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut history = AlignHistory::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::indexed(seed, "align-shuffle", epoch as u64));
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&AlignItem> = chunk.iter().map(|&i| &items[i]).collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, model, &batch, cfg)?;
            let parts = LossParts {
                total: tape.value(loss.total).item(),
                global: tape.value(loss.global).item(),
                channel: tape.value(loss.channel).item(),
            };
            if !parts.total.is_finite() {
                return Err(TraceError::NonFinite {
                    stage: "align",
                    step,
                    value: parts.total,
                });
            }
            let mut grads = tape.backward(loss.total)?.params(&model.store);
            if !grads.is_finite() {
                return Err(TraceError::NonFinite {
                    stage: "align",
                    step,
                    value: grads.global_norm(),
                });
            }
            if cfg.clip_norm > 0.0 {
                grads.clip_norm(cfg.clip_norm);
            }
            opt.step(&mut model.store, &grads, lr_at(step, warmup, total, cfg.lr));
            model.store.quantize_f32();
            history.steps.push(AlignRecord {
                step,
                epoch,
                loss: parts.total,
                global: parts.global,
                channel: parts.channel,
            });
            sum += parts.total;
            count += 1;
            step += 1;
        }
        let mean = sum / count.max(1) as f64;
        log::info!("[align] epoch {epoch} loss {mean:.4}");
        history.epoch_loss.push(mean);
    }
    Ok(history)
}
