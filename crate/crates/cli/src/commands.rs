//! One function per subcommand. Each reads its inputs from the run
//! directory, never modifies them, and writes its own artifacts.

use std::path::{Path, PathBuf};

use trace_core::align::align;
use trace_core::data::{generate, load_corpus, save_corpus, Corpus, Split, TimeSeriesInstance};
use trace_core::model::TraceModel;
use trace_core::pretrain::pretrain;
use trace_core::probe::{evaluate_downstream, EvalReport};
use trace_core::rag::{train_rag, RagReport};
use trace_core::retrieval::{
    build_text_index, build_ts_index, evaluate_crossmodal, CrossModalReport, Direction,
    EmbeddingIndex,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CORPUS: &str = "corpus.jsonl";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_CSV: &str = "pretrain_loss.csv";
pub const ALIGN_CKPT: &str = "aligned.ckpt";
pub const ALIGN_CSV: &str = "align_loss.csv";
pub const INDEX_TS: &str = "index_ts.json";
pub const INDEX_TEXT: &str = "index_text.json";
pub const RETRIEVAL_REPORT: &str = "retrieval_report.txt";
pub const RAG_REPORT: &str = "rag_report.txt";
pub const EVAL_REPORT: &str = "eval_report.txt";

/// Artifact locations for one run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        let dir = cfg.paths.out.clone();
        Self { cfg, dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))
    }

    fn upstream(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, producer })
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        let p = self.upstream(CORPUS, "gen")?;
        let corpus = load_corpus(&p)?;
        if corpus.manifest.channels != self.cfg.model.channels {
            return Err(CliError::Config {
                path: p,
                msg: format!(
                    "corpus has {} channels, [model] expects {}",
                    corpus.manifest.channels, self.cfg.model.channels
                ),
            });
        }
        Ok(corpus)
    }

    fn model(&self, name: &str, producer: &'static str) -> Result<TraceModel> {
        load_checkpoint(&self.upstream(name, producer)?)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        self.ensure_dir()?;
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}

/// Window length the encoder sees for this corpus.
fn window_len(model: &TraceModel, corpus: &Corpus) -> usize {
    model.config.patches(corpus.manifest.length) * model.config.patch_len
}

/// The first `pool` test instances, used for every cross-modal evaluation.
pub fn eval_pool(corpus: &Corpus, pool: usize) -> Vec<&TimeSeriesInstance> {
    corpus.split(Split::Test).take(pool).collect()
}

pub fn cmd_gen(run: &Run) -> Result<PathBuf> {
    let corpus = generate(&run.cfg.generator())?;
    run.ensure_dir()?;
    let p = run.path(CORPUS);
    save_corpus(&corpus, &p).map_err(|e| match e {
        trace_core::TraceError::Io(io) => CliError::io(&p, io),
        e => e.into(),
    })?;
    let c = corpus.manifest.counts;
    log::info!(
        "[gen] wrote {} instances (train {}, val {}, test {}) to {}",
        corpus.len(),
        c.train,
        c.val,
        c.test,
        p.display()
    );
    Ok(p)
}

pub fn cmd_pretrain(run: &Run) -> Result<PathBuf> {
    let corpus = run.corpus()?;
    let mut model = TraceModel::new(run.cfg.model.clone(), run.cfg.seed)?;
    log::info!("[pretrain] {} parameters", model.store.numel());
    let hist = pretrain(&mut model, &corpus, &run.cfg.pretrain, run.cfg.seed)?;
    run.write(PRETRAIN_CSV, &hist.to_csv())?;
    let p = run.path(PRETRAIN_CKPT);
    save_checkpoint(&model, &p)?;
    log::info!(
        "[pretrain] loss {:.5} -> {:.5}; checkpoint {}",
        hist.initial_loss().unwrap_or(f64::NAN),
        hist.final_epoch_loss().unwrap_or(f64::NAN),
        p.display()
    );
    Ok(p)
}

pub fn cmd_align(run: &Run) -> Result<PathBuf> {
    let corpus = run.corpus()?;
    let mut model = run.model(PRETRAIN_CKPT, "pretrain")?;
    let hist = align(&mut model, &corpus, &run.cfg.align, run.cfg.seed)?;
    run.write(ALIGN_CSV, &hist.to_csv())?;
    let p = run.path(ALIGN_CKPT);
    save_checkpoint(&model, &p)?;
    log::info!(
        "[align] final epoch loss {:.5}; checkpoint {}",
        hist.epoch_loss.last().copied().unwrap_or(f64::NAN),
        p.display()
    );
    Ok(p)
}

fn save_index(run: &Run, name: &str, index: &EmbeddingIndex) -> Result<PathBuf> {
    let json = serde_json::to_string(index).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    run.write(name, &json)
}

fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut index: EmbeddingIndex = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    index.reindex()?;
    Ok(index)
}

pub fn cmd_index(run: &Run) -> Result<(PathBuf, PathBuf)> {
    let corpus = run.corpus()?;
    let model = run.model(ALIGN_CKPT, "align")?;
    let pool = eval_pool(&corpus, run.cfg.eval.pool);
    let ts = build_ts_index(&model, &pool, window_len(&model, &corpus))?;
    let text = build_text_index(&model, &pool)?;
    let a = save_index(run, INDEX_TS, &ts)?;
    let b = save_index(run, INDEX_TEXT, &text)?;
    log::info!("[index] {} pairs indexed", ts.len());
    Ok((a, b))
}

pub fn retrieval_reports(run: &Run) -> Result<Vec<CrossModalReport>> {
    let corpus = run.corpus()?;
    let ts = load_index(&run.upstream(INDEX_TS, "index")?)?;
    let text = load_index(&run.upstream(INDEX_TEXT, "index")?)?;
    let pool = eval_pool(&corpus, run.cfg.eval.pool);
    [Direction::TsToText, Direction::TextToTs]
        .into_iter()
        .map(|d| evaluate_crossmodal(&ts, &text, d, &run.cfg.eval.ks, &pool).map_err(Into::into))
        .collect()
}

pub fn cmd_retrieve(run: &Run) -> Result<Vec<CrossModalReport>> {
    let reports = retrieval_reports(run)?;
    let kv: String = reports.iter().map(CrossModalReport::to_kv).collect();
    let p = run.write(RETRIEVAL_REPORT, &kv)?;
    println!("{}", CrossModalReport::table_header(&run.cfg.eval.ks));
    for r in &reports {
        println!("{}", r.table_row());
    }
    log::info!("[retrieve] report {}", p.display());
    Ok(reports)
}

pub fn cmd_rag(run: &Run) -> Result<RagReport> {
    let corpus = run.corpus()?;
    let model = run.model(ALIGN_CKPT, "align")?;
    let report = train_rag(&model, &corpus, &run.cfg.rag, run.cfg.seed)?;
    let p = run.write(RAG_REPORT, &report.to_kv())?;
    print!("{}", report.table());
    log::info!("[rag] report {}", p.display());
    Ok(report)
}

pub fn cmd_eval(run: &Run) -> Result<EvalReport> {
    let corpus = run.corpus()?;
    let mut model = run.model(ALIGN_CKPT, "align")?;
    let e = &run.cfg.eval;
    let report = evaluate_downstream(&mut model, &corpus, e.probe_steps, e.probe_lr)?;
    let p = run.write(EVAL_REPORT, &report.to_kv())?;
    print!("{}", report.table());
    log::info!("[eval] report {}", p.display());
    Ok(report)
}
