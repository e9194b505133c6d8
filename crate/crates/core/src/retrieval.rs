//! Exact cosine-similarity index and the retrieval metric suite.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesInstance;
use crate::error::{invalid, Result, TraceError};
use crate::model::TraceModel;
use crate::tensor::{dot, normalized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ts,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: usize,
    pub modality: Modality,
    /// Unit-norm sample-level vector.
    pub sample: Vec<f64>,
    /// Unit-norm per-channel vectors, when available.
    pub channels: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    #[serde(skip)]
    ids: HashSet<(String, Modality)>,
}

impl EmbeddingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry, normalizing its vectors.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        label: usize,
        modality: Modality,
        sample: &[f64],
        channels: Option<&[Vec<f64>]>,
    ) -> Result<()> {
        let id = id.into();
        if !self.ids.insert((id.clone(), modality)) {
            return Err(invalid("build_index", format!("duplicate id {id}")));
        }
        self.entries.push(IndexEntry {
            id,
            label,
            modality,
            sample: normalized(sample),
            channels: channels.map(|c| c.iter().map(|v| normalized(v)).collect()),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Restores the id set after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.ids.clear();
        for e in &self.entries {
            if !self.ids.insert((e.id.clone(), e.modality)) {
                return Err(invalid("build_index", format!("duplicate id {}", e.id)));
            }
        }
        Ok(())
    }
}

/// Series-side index: normalized `h_cls` and `h_cit` rows.
pub fn build_ts_index(
    model: &TraceModel,
    instances: &[&TimeSeriesInstance],
    t: usize,
) -> Result<EmbeddingIndex> {
    let outs: Vec<_> = instances
        .par_iter()
        .map(|inst| model.encode(&inst.window(t)))
        .collect::<Result<_>>()?;
    let mut index = EmbeddingIndex::new();
    for (inst, out) in instances.iter().zip(outs) {
        index.push(&inst.id, inst.label, Modality::Ts, &out.h_cls, Some(&out.h_cit))?;
    }
    Ok(index)
}

/// Text-side index: projected context and channel-text embeddings.
pub fn build_text_index(
    model: &TraceModel,
    instances: &[&TimeSeriesInstance],
) -> Result<EmbeddingIndex> {
    let mut index = EmbeddingIndex::new();
    for inst in instances {
        let z = model.embed_text(&inst.context_text);
        let ch: Vec<Vec<f64>> = inst.channel_texts.iter().map(|t| model.embed_text(t)).collect();
        index.push(&inst.id, inst.label, Modality::Text, &z, Some(&ch))?;
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub label: usize,
    /// Cosine per channel when both sides carry channel vectors.
    pub channel_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn labels(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.label).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

fn rank(mut hits: Vec<Hit>, k: usize) -> RetrievalResult {
    hits.sort_by(|a, b| (b.score + 0.0).total_cmp(&(a.score + 0.0)).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(k);
    RetrievalResult { hits }
}

/// Exact top-`k` by cosine; `k` beyond the index size returns everything.
pub fn query(
    index: &EmbeddingIndex,
    vec: &[f64],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<RetrievalResult> {
    ts_to_ts(index, vec, None, k, exclude_id)
}

/// Ranks by sample-level cosine and reports per-channel cosines when
/// `channel_vecs` is given.
pub fn ts_to_ts(
    index: &EmbeddingIndex,
    query_vec: &[f64],
    channel_vecs: Option<&[Vec<f64>]>,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(invalid("query", "k must be at least 1"));
    }
    let q = normalized(query_vec);
    let qc: Option<Vec<Vec<f64>>> = channel_vecs.map(|c| c.iter().map(|v| normalized(v)).collect());
    let hits = index
        .entries
        .iter()
        .filter(|e| Some(e.id.as_str()) != exclude_id)
        .map(|e| Hit {
            id: e.id.clone(),
            score: dot(&q, &e.sample),
            label: e.label,
            channel_scores: match (&qc, &e.channels) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| dot(x, y)).collect()),
                _ => None,
            },
        })
        .collect();
    Ok(rank(hits, k))
}

/// Euclidean distance between per-channel time-mean vectors; scores are
/// negated distances so that higher is better.
pub fn euclidean_baseline(
    candidates: &[&TimeSeriesInstance],
    query_series: &[Vec<f64>],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(invalid("query", "k must be at least 1"));
    }
    let means = |s: &[Vec<f64>]| -> Vec<f64> {
        s.iter()
            .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
            .collect()
    };
    let q = means(query_series);
    let mut hits = Vec::with_capacity(candidates.len());
    for c in candidates.iter().filter(|c| Some(c.id.as_str()) != exclude_id) {
        let m = means(&c.values);
        if m.len() != q.len() {
            return Err(invalid(
                "euclidean_baseline",
                format!("query has {} channels, {} has {}", q.len(), c.id, m.len()),
            ));
        }
        let d = q.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        hits.push(Hit {
            id: c.id.clone(),
            score: -d,
            label: c.label,
            channel_scores: None,
        });
    }
    Ok(rank(hits, k))
}

/// Fraction of the top `k` labels equal to `query_label`.
pub fn precision_at_k(labels: &[usize], query_label: usize, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    labels.iter().take(k).filter(|&&l| l == query_label).count() as f64 / k as f64
}

/// Reciprocal rank of the first label match, zero when absent.
pub fn mrr_label(labels: &[usize], query_label: usize) -> f64 {
    labels
        .iter()
        .position(|&l| l == query_label)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// One when the paired counterpart is among the top `k`.
pub fn precision_modality_at_k(ids: &[&str], paired_id: &str, k: usize) -> f64 {
    if ids.iter().take(k).any(|&i| i == paired_id) {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_modality(ids: &[&str], paired_id: &str) -> f64 {
    ids.iter()
        .position(|&i| i == paired_id)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Lowercased words with punctuation stripped.
pub fn rouge_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between token sequences; zero when either side is empty.
pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

/// Elementwise `(MAE, MSE)` over all `C·T` entries.
pub fn ts_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, f64)> {
    let shape = |x: &[Vec<f64>]| -> Vec<usize> {
        std::iter::once(x.len()).chain(x.iter().map(Vec::len)).collect()
    };
    if shape(a) != shape(b) {
        return Err(TraceError::Shape {
            op: "ts_similarity",
            lhs: vec![a.len(), a.first().map_or(0, Vec::len)],
            rhs: vec![b.len(), b.first().map_or(0, Vec::len)],
        });
    }
    let (mut ae, mut se, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            ae += (u - v).abs();
            se += (u - v).powi(2);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((ae / n, se / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TextToTs,
    TsToText,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::TextToTs => "text_to_ts",
            Direction::TsToText => "ts_to_text",
        }
    }
}

/// Averages of every retrieval metric over the query pool.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalReport {
    pub direction: Direction,
    pub queries: usize,
    pub pool: usize,
    /// `(k, label P@k)`.
    pub label_precision: Vec<(usize, f64)>,
    pub label_mrr: f64,
    pub modality_precision: Vec<(usize, f64)>,
    pub modality_mrr: f64,
    /// ROUGE-L F1 between the query's paired text and the top-1 item's text.
    pub rouge_l: f64,
    /// Raw-space error between the query's series and the top-1 item's series.
    pub mae: f64,
    pub mse: f64,
}

impl CrossModalReport {
    pub fn label_p(&self, k: usize) -> Option<f64> {
        self.label_precision.iter().find(|(kk, _)| *kk == k).map(|x| x.1)
    }

    pub fn modality_p(&self, k: usize) -> Option<f64> {
        self.modality_precision.iter().find(|(kk, _)| *kk == k).map(|x| x.1)
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let p = self.direction.name();
        let mut s = String::new();
        let _ = writeln!(s, "{p}.queries={}", self.queries);
        let _ = writeln!(s, "{p}.pool={}", self.pool);
        for (k, v) in &self.label_precision {
            let _ = writeln!(s, "{p}.label_p@{k}={v:.6}");
        }
        let _ = writeln!(s, "{p}.label_mrr={:.6}", self.label_mrr);
        for (k, v) in &self.modality_precision {
            let _ = writeln!(s, "{p}.modality_p@{k}={v:.6}");
        }
        let _ = writeln!(s, "{p}.modality_mrr={:.6}", self.modality_mrr);
        let _ = writeln!(s, "{p}.rouge_l={:.6}", self.rouge_l);
        let _ = writeln!(s, "{p}.mae={:.6}", self.mae);
        let _ = writeln!(s, "{p}.mse={:.6}", self.mse);
        s
    }

    pub fn table_header(ks: &[usize]) -> String {
        let mut s = format!("{:<12}", "direction");
        for k in ks {
            s.push_str(&format!(" {:>9}", format!("lbl P@{k}")));
        }
        s.push_str(&format!(" {:>9}", "lbl MRR"));
        for k in ks {
            s.push_str(&format!(" {:>9}", format!("mod P@{k}")));
        }
        s.push_str(&format!(" {:>9} {:>9} {:>9} {:>9}", "mod MRR", "ROUGE-L", "MAE", "MSE"));
        s
    }

    pub fn table_row(&self) -> String {
        let mut s = format!("{:<12}", self.direction.name());
        for (_, v) in &self.label_precision {
            s.push_str(&format!(" {:>9.4}", v));
        }
        s.push_str(&format!(" {:>9.4}", self.label_mrr));
        for (_, v) in &self.modality_precision {
            s.push_str(&format!(" {:>9.4}", v));
        }
        s.push_str(&format!(
            " {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            self.modality_mrr, self.rouge_l, self.mae, self.mse
        ));
        s
    }
}

/// Runs every query of one modality against the other modality's index.
/// Both indices must hold the same paired ids; `pool` supplies texts and
/// series for ROUGE and MAE/MSE (looked up by id).
pub fn evaluate_crossmodal(
    index_ts: &EmbeddingIndex,
    index_text: &EmbeddingIndex,
    direction: Direction,
    ks: &[usize],
    pool: &[&TimeSeriesInstance],
) -> Result<CrossModalReport> {
    let (queries, target) = match direction {
        Direction::TextToTs => (index_text, index_ts),
        Direction::TsToText => (index_ts, index_text),
    };
    if queries.is_empty() || target.is_empty() {
        return Err(invalid("evaluate_crossmodal", "empty index"));
    }
    let by_id: HashMap<&str, &TimeSeriesInstance> =
        pool.iter().map(|i| (i.id.as_str(), *i)).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| invalid("evaluate_crossmodal", format!("no payload for id {id}")))
    };
    let n = queries.len() as f64;
    let mut lp = vec![0.0; ks.len()];
    let mut mp = vec![0.0; ks.len()];
    let (mut lmrr, mut mmrr, mut rouge, mut mae, mut mse) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for q in queries.entries() {
        if target.get(&q.id).is_none() {
            return Err(invalid(
                "evaluate_crossmodal",
                format!("query {} has no counterpart", q.id),
            ));
        }
        let res = query(target, &q.sample, target.len(), None)?;
        let labels = res.labels();
        let ids = res.ids();
        for (i, &k) in ks.iter().enumerate() {
            lp[i] += precision_at_k(&labels, q.label, k);
            mp[i] += precision_modality_at_k(&ids, &q.id, k);
        }
        lmrr += mrr_label(&labels, q.label);
        mmrr += mrr_modality(&ids, &q.id);
        let (qi, top) = (lookup(&q.id)?, lookup(ids[0])?);
        rouge += rouge_l_f1(&top.context_text, &qi.context_text);
        let (a, s) = ts_similarity(&qi.values, &top.values)?;
        mae += a;
        mse += s;
    }
    Ok(CrossModalReport {
        direction,
        queries: queries.len(),
        pool: target.len(),
        label_precision: ks.iter().zip(&lp).map(|(&k, v)| (k, v / n)).collect(),
        label_mrr: lmrr / n,
        modality_precision: ks.iter().zip(&mp).map(|(&k, v)| (k, v / n)).collect(),
        modality_mrr: mmrr / n,
        rouge_l: rouge / n,
        mae: mae / n,
        mse: mse / n,
    })
}
