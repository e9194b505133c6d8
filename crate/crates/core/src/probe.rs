//! Downstream checks on a frozen encoder: a linear classification probe on
//! `h_cls` and TS-to-TS label retrieval against the Euclidean baseline.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::data::{Corpus, Split, TimeSeriesInstance};
use crate::error::{invalid, Result};
use crate::model::{Bind, TraceModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Gradients;
use crate::retrieval::{build_ts_index, euclidean_baseline, precision_at_k, ts_to_ts};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub train_acc: f64,
    pub test_acc: f64,
    /// Label P@1 of TS-to-TS retrieval within the test split.
    pub ts_p1: f64,
    pub ed_p1: f64,
    pub pool: usize,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "probe.train_acc={:.6}", self.train_acc);
        let _ = writeln!(s, "probe.test_acc={:.6}", self.test_acc);
        let _ = writeln!(s, "ts_to_ts.label_p@1={:.6}", self.ts_p1);
        let _ = writeln!(s, "euclidean.label_p@1={:.6}", self.ed_p1);
        let _ = writeln!(s, "pool={}", self.pool);
        s
    }

    pub fn table(&self) -> String {
        format!(
            "{:<22} {:>8}\n{:<22} {:>8.4}\n{:<22} {:>8.4}\n{:<22} {:>8.4}\n{:<22} {:>8.4}\n",
            "metric",
            "value",
            "probe train acc",
            self.train_acc,
            "probe test acc",
            self.test_acc,
            "ts-to-ts label P@1",
            self.ts_p1,
            "euclidean label P@1",
            self.ed_p1
        )
    }
}

fn cls_matrix(model: &TraceModel, items: &[&TimeSeriesInstance], t: usize) -> Result<Tensor> {
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(items.len() * d);
    for it in items {
        data.extend(model.encode(&it.window(t))?.h_cls);
    }
    Tensor::new(vec![items.len(), d], data)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains only the classification head with full-batch cross-entropy on
/// cached `h_cls`; the encoder stays frozen.
pub fn linear_probe(model: &mut TraceModel, corpus: &Corpus, steps: usize, lr: f64) -> Result<(f64, f64)> {
    let t = model.config.patches(corpus.manifest.length) * model.config.patch_len;
    let train: Vec<&TimeSeriesInstance> = corpus.split(Split::Train).collect();
    let test: Vec<&TimeSeriesInstance> = corpus.split(Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(invalid("linear_probe", "need train and test instances"));
    }
    let classes = model.config.classes;
    let label_of = |v: &[&TimeSeriesInstance]| -> Result<Vec<usize>> {
        v.iter()
            .map(|i| {
                if i.label < classes {
                    Ok(i.label)
                } else {
                    Err(invalid("linear_probe", format!("label {} outside {classes} classes", i.label)))
                }
            })
            .collect()
    };
    let (ytr, yte) = (label_of(&train)?, label_of(&test)?);
    let (xtr, xte) = (cls_matrix(model, &train, t)?, cls_matrix(model, &test, t)?);
    let picks: Vec<usize> = ytr.iter().enumerate().map(|(i, &y)| i * classes + y).collect();
    let mut opt = AdamW::new(&model.store, AdamWConfig::default());
    let head = model.classifier.clone();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let x = tape.constant(xtr.clone());
        let logits = head.forward(&mut tape, Bind::trainable(&model.store), x)?;
        let lse = tape.logsumexp_rows(logits);
        let lse = tape.mean(lse);
        let picked = tape.gather(logits, &picks, &[picks.len()])?;
        let picked = tape.mean(picked);
        let loss = tape.sub(lse, picked)?;
        let all = tape.backward(loss)?.params(&model.store);
        let mut grads = Gradients::new(&model.store);
        for id in head.ids() {
            if let Some(g) = all.get(id) {
                grads.accumulate(id, g);
            }
        }
        opt.step(&mut model.store, &grads, lr);
        model.store.quantize_f32();
    }
    let logits = |x: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let l = head.forward(&mut tape, Bind::frozen(&model.store), v)?;
        Ok(tape.value(l).clone())
    };
    Ok((accuracy(&logits(&xtr)?, &ytr), accuracy(&logits(&xte)?, &yte)))
}

/// Label P@1 of TS-to-TS retrieval over the test split for the encoder and
/// for Euclidean distance on raw series, each query excluding itself.
pub fn ts_retrieval_vs_euclidean(model: &TraceModel, corpus: &Corpus) -> Result<(f64, f64, usize)> {
    let t = model.config.patches(corpus.manifest.length) * model.config.patch_len;
    let pool: Vec<&TimeSeriesInstance> = corpus.split(Split::Test).collect();
    if pool.len() < 2 {
        return Err(invalid("ts_retrieval", "need at least two test instances"));
    }
    let index = build_ts_index(model, &pool, t)?;
    let (mut ts, mut ed) = (0.0, 0.0);
    for (inst, entry) in pool.iter().zip(index.entries()) {
        let r = ts_to_ts(&index, &entry.sample, None, 1, Some(&inst.id))?;
        ts += precision_at_k(&r.labels(), inst.label, 1);
        let r = euclidean_baseline(&pool, &inst.window(t), 1, Some(&inst.id))?;
        ed += precision_at_k(&r.labels(), inst.label, 1);
    }
    let n = pool.len() as f64;
    Ok((ts / n, ed / n, pool.len()))
}

pub fn evaluate_downstream(model: &mut TraceModel, corpus: &Corpus, steps: usize, lr: f64) -> Result<EvalReport> {
    let (train_acc, test_acc) = linear_probe(model, corpus, steps, lr)?;
    let (ts_p1, ed_p1, pool) = ts_retrieval_vs_euclidean(model, corpus)?;
    Ok(EvalReport {
        train_acc,
        test_acc,
        ts_p1,
        ed_p1,
        pool,
    })
}
