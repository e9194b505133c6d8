//! Retrieval-augmented forecasting with a soft prompt on a frozen encoder.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_forecast_pairs, Corpus, Split};
use crate::error::{invalid, Result, TraceError};
use crate::model::{
    denormalize_tape, encode_tape, revin_normalize, Bind, EncodeOptions, ForecastHead, Linear,
    RevinState, TapeEncoding, TokenLayout, TraceModel,
};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{Gradients, ParamStore};
use crate::retrieval::{query, EmbeddingIndex, Modality};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagMode {
    TsOnly,
    TsText,
}

impl RagMode {
    pub fn name(self) -> &'static str {
        match self {
            RagMode::TsOnly => "ts_only",
            RagMode::TsText => "ts_text",
        }
    }

    /// Width of one retrieved block.
    pub fn block_width(self, d: usize) -> usize {
        match self {
            RagMode::TsOnly => d,
            RagMode::TsText => 2 * d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RagConfig {
    /// Retrieved pairs per query.
    pub r: usize,
    pub history: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for RagConfig {
    fn default() -> Self {
        Self {
            r: 3,
            history: 96,
            horizon: 24,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

impl RagConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TraceError::Config(m));
        if self.r == 0 {
            return bad("rag.r must be at least 1".into());
        }
        if self.horizon == 0 || self.history == 0 {
            return bad("rag.history and rag.horizon must be positive".into());
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("rag.batch_size and rag.lr must be positive".into());
        }
        Ok(())
    }
}

/// Trainable prompt projection and forecasting head, held apart from the backbone.
#[derive(Debug, Clone)]
pub struct RagHead {
    pub store: ParamStore,
    /// Absent for the no-retrieval baseline.
    pub proj: Option<Linear>,
    pub head: ForecastHead,
    pub mode: Option<RagMode>,
    pub r: usize,
}

impl RagHead {
    /// `prompt_width` is the soft prompt width and must equal the encoder width.
    pub fn new(
        model: &TraceModel,
        mode: Option<RagMode>,
        r: usize,
        patches: usize,
        horizon: usize,
        prompt_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = model.config.d_model;
        if prompt_width != d {
            return Err(invalid(
                "build_soft_prompt",
                format!("prompt width {prompt_width} must equal encoder width {d}"),
            ));
        }
        if r == 0 {
            return Err(TraceError::Config("rag.r must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let mut g = rng::substream(seed, "rag-head");
        let head = ForecastHead::init(&mut store, "rag.head", patches, d, horizon, &mut g);
        let proj = mode.map(|m| Linear::zeros(&mut store, "rag.proj", r * m.block_width(d), d));
        store.quantize_f32();
        Ok(Self {
            store,
            proj,
            head,
            mode,
            r,
        })
    }
}

/// One forecasting example with its retrieval context.
#[derive(Debug, Clone)]
pub struct RagItem {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub history: Vec<Vec<f64>>,
    pub future: Vec<Vec<f64>>,
    pub context: String,
}

/// Frozen retrieval database: CLS and text embeddings of the training items.
#[derive(Debug, Clone)]
pub struct RagDatabase {
    pub index: EmbeddingIndex,
    /// Raw (unnormalized) `h_cls` per entry, aligned with the index.
    pub h_ts: Vec<Vec<f64>>,
    pub z_cxt: Vec<Vec<f64>>,
}

pub fn build_database(model: &TraceModel, items: &[&RagItem]) -> Result<RagDatabase> {
    let mut index = EmbeddingIndex::new();
    let mut h_ts = Vec::with_capacity(items.len());
    let mut z_cxt = Vec::with_capacity(items.len());
    for it in items {
        let out = model.encode(&it.history)?;
        index.push(&it.id, it.label, Modality::Ts, &out.h_cls, None)?;
        h_ts.push(out.h_cls);
        z_cxt.push(model.embed_text(&it.context));
    }
    Ok(RagDatabase { index, h_ts, z_cxt })
}

/// Top-`r` database positions by CLS cosine, excluding the query's own id.
pub fn retrieve_context(
    db: &RagDatabase,
    h_cls: &[f64],
    r: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<usize>> {
    let res = query(&db.index, h_cls, r, exclude_id)?;
    Ok(res
        .hits
        .iter()
        .map(|h| {
            db.index
                .entries()
                .iter()
                .position(|e| e.id == h.id)
                .expect("hit comes from the index")
        })
        .collect())
}

/// Concatenated retrieved blocks `[p1; …; pR]`, padded by repeating the last
/// block when fewer than `r` pairs exist.
pub fn prompt_input(db: &RagDatabase, hits: &[usize], mode: RagMode, r: usize) -> Result<Vec<f64>> {
    if hits.is_empty() {
        return Err(invalid("build_soft_prompt", "no retrieved pairs"));
    }
    let mut out = Vec::new();
    for k in 0..r {
        let i = hits[k.min(hits.len() - 1)];
        out.extend_from_slice(&db.h_ts[i]);
        if mode == RagMode::TsText {
            out.extend_from_slice(&db.z_cxt[i]);
        }
    }
    Ok(out)
}

/// `Proj(input)` as a `1×d` tape value.
pub fn build_soft_prompt(tape: &mut Tape, head: &RagHead, input: &[f64]) -> Result<Var> {
    let proj = head
        .proj
        .as_ref()
        .ok_or_else(|| invalid("build_soft_prompt", "baseline head has no projection"))?;
    let want = proj.fan_in(&head.store);
    if input.len() != want {
        return Err(invalid(
            "build_soft_prompt",
            format!("input width {} does not match projection width {want}", input.len()),
        ));
    }
    let x = tape.constant(Tensor::new(vec![1, input.len()], input.to_vec())?);
    proj.forward(tape, Bind::trainable(&head.store), x)
}

/// Normalized-space forecast `C×H` through the frozen encoder, with an
/// optional prompt prefix; returns it with the RevIN statistics.
pub fn rag_forecast_tape(
    tape: &mut Tape,
    model: &TraceModel,
    head: &RagHead,
    history: &[Vec<f64>],
    prompt: Option<Var>,
    hide_prompt: bool,
) -> Result<(Var, RevinState)> {
    let (xn, state) = revin_normalize(history);
    let opts = EncodeOptions {
        prompt,
        hide_prompt,
        ..Default::default()
    };
    let enc = encode_tape(
        tape,
        Bind::frozen(&model.store),
        &model.encoder,
        &model.config,
        &xn,
        &opts,
        None,
    )?;
    let y = head.head.forward(tape, Bind::trainable(&head.store), &enc)?;
    Ok((y, state))
}

/// Denormalized `C×H` forecast for one history.
pub fn rag_forecast(
    model: &TraceModel,
    head: &RagHead,
    history: &[Vec<f64>],
    prompt_in: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let prompt = match prompt_in {
        Some(p) => Some(build_soft_prompt(&mut tape, head, p)?),
        None => None,
    };
    let (y, state) = rag_forecast_tape(&mut tape, model, head, history, prompt, false)?;
    let y = denormalize_tape(&mut tape, y, &state)?;
    let v = tape.value(y);
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}

fn normalized_target(future: &[Vec<f64>], state: &RevinState) -> Tensor {
    let h = future[0].len();
    let data = future
        .iter()
        .zip(state.mean.iter().zip(&state.std))
        .flat_map(|(row, (m, s))| row.iter().map(move |v| (v - m) / s))
        .collect();
    Tensor::new(vec![future.len(), h], data).expect("rectangular future")
}

/// Prepared per-item inputs for one setting.
struct Prepared {
    /// Cached hidden states for the baseline; `None` when a prompt is used.
    hidden: Option<Tensor>,
    prompt_in: Option<Vec<f64>>,
    target: Tensor,
}

fn forward_item(
    tape: &mut Tape,
    model: &TraceModel,
    head: &RagHead,
    item: &RagItem,
    prep: &Prepared,
    layout: &TokenLayout,
) -> Result<Var> {
    match (&prep.hidden, &prep.prompt_in) {
        (Some(h), _) => {
            let hidden = tape.constant(h.clone());
            let enc = TapeEncoding {
                hidden,
                streams: Vec::new(),
                layout: layout.clone(),
            };
            head.head.forward(tape, Bind::trainable(&head.store), &enc)
        }
        (None, Some(p)) => {
            let prompt = build_soft_prompt(tape, head, p)?;
            Ok(rag_forecast_tape(tape, model, head, &item.history, Some(prompt), false)?.0)
        }
        (None, None) => Ok(rag_forecast_tape(tape, model, head, &item.history, None, false)?.0),
    }
}

/// Test-split error of one setting in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct RagRow {
    pub setting: String,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagReport {
    pub rows: Vec<RagRow>,
    pub backbone_before: String,
    pub backbone_after: String,
}

impl RagReport {
    pub fn row(&self, setting: &str) -> Option<&RagRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}.mae={:.6}", r.setting, r.mae);
            let _ = writeln!(s, "{}.mse={:.6}", r.setting, r.mse);
        }
        let _ = writeln!(s, "backbone_before={}", self.backbone_before);
        let _ = writeln!(s, "backbone_after={}", self.backbone_after);
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10}\n", "setting", "MAE", "MSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", r.setting, r.mae, r.mse);
        }
        s
    }
}

pub fn rag_items(corpus: &Corpus, cfg: &RagConfig) -> Result<Vec<RagItem>> {
    let pairs = make_forecast_pairs(corpus, cfg.history, cfg.horizon)?;
    Ok(pairs
        .into_iter()
        .zip(&corpus.instances)
        .map(|(p, inst)| RagItem {
            id: p.id,
            label: p.label,
            split: p.split,
            history: p.history,
            future: p.future,
            context: inst.context_text.clone(),
        })
        .collect())
}

/// Trains one setting (`None` = no retrieval) and returns its test-split row.
pub fn train_setting(
    model: &TraceModel,
    db: &RagDatabase,
    train: &[&RagItem],
    test: &[&RagItem],
    mode: Option<RagMode>,
    cfg: &RagConfig,
    seed: u64,
) -> Result<(RagHead, RagRow)> {
    let patches = model.config.patches(cfg.history);
    let mut head = RagHead::new(
        model,
        mode,
        cfg.r,
        patches,
        cfg.horizon,
        model.config.d_model,
        seed,
    )?;
    let layout = TokenLayout::new(model.config.channels, patches, false);
    let prepare = |it: &RagItem, exclude: bool| -> Result<Prepared> {
        let out = model.encode(&it.history)?;
        let (_, state) = revin_normalize(&it.history);
        let target = normalized_target(&it.future, &state);
        Ok(match mode {
            None => Prepared {
                hidden: Some(out.hidden),
                prompt_in: None,
                target,
            },
            Some(m) => {
                let hits = retrieve_context(db, &out.h_cls, cfg.r, exclude.then_some(&it.id))?;
                Prepared {
                    hidden: None,
                    prompt_in: Some(prompt_input(db, &hits, m, cfg.r)?),
                    target,
                }
            }
        })
    };
    let train_prep: Vec<Prepared> = train.iter().map(|it| prepare(it, true)).collect::<Result<_>>()?;
    let test_prep: Vec<Prepared> = test.iter().map(|it| prepare(it, true)).collect::<Result<_>>()?;

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = (total / 20).min(total.saturating_sub(1));
    let mut opt = AdamW::new(
        &head.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::indexed(seed, "rag-shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new(&head.store);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let y = forward_item(&mut tape, model, &head, train[i], &train_prep[i], &layout)?;
                let t = tape.constant(train_prep[i].target.clone());
                let n = train_prep[i].target.numel();
                let loss = tape.mse(y, t, &vec![true; n])?;
                batch_loss += tape.value(loss).item();
                grads.merge(&tape.backward(loss)?.params(&head.store));
            }
            if !batch_loss.is_finite() {
                return Err(TraceError::NonFinite {
                    stage: "rag",
                    step,
                    value: batch_loss,
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut head.store, &grads, lr_at(step, warmup, total, cfg.lr));
            head.store.quantize_f32();
            step += 1;
        }
    }

    let (mut mae, mut mse, mut n) = (0.0, 0.0, 0usize);
    for (it, prep) in test.iter().zip(&test_prep) {
        let mut tape = Tape::new();
        let y = forward_item(&mut tape, model, &head, it, prep, &layout)?;
        for (p, t) in tape.value(y).data().iter().zip(prep.target.data()) {
            mae += (p - t).abs();
            mse += (p - t).powi(2);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let setting = mode.map_or("no_rag", RagMode::name).to_string();
    Ok((
        head,
        RagRow {
            setting,
            mae: mae / n,
            mse: mse / n,
        },
    ))
}

/// Trains the three settings (no retrieval, series-only, series+text) on
/// the train split and evaluates them on the test split.
pub fn train_rag(model: &TraceModel, corpus: &Corpus, cfg: &RagConfig, seed: u64) -> Result<RagReport> {
    cfg.validate()?;
    let before = model.store.checksum();
    let items = rag_items(corpus, cfg)?;
    let train: Vec<&RagItem> = items.iter().filter(|i| i.split == Split::Train).collect();
    let test: Vec<&RagItem> = items.iter().filter(|i| i.split == Split::Test).collect();
    if train.len() < 2 || test.is_empty() {
        return Err(invalid("train_rag", "need train and test forecast pairs"));
    }
    let db = build_database(model, &train)?;
    let mut rows = Vec::with_capacity(3);
    for mode in [None, Some(RagMode::TsOnly), Some(RagMode::TsText)] {
        let (_, row) = train_setting(model, &db, &train, &test, mode, cfg, seed)?;
        log::info!("[rag] {} test mse {:.5}", row.setting, row.mse);
        rows.push(row);
    }
    Ok(RagReport {
        rows,
        backbone_before: before,
        backbone_after: model.store.checksum(),
    })
}
