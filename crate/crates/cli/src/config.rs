//! TOML run configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trace_core::align::AlignConfig;
use trace_core::data::GeneratorConfig;
use trace_core::model::ModelConfig;
use trace_core::pretrain::PretrainConfig;
use trace_core::rag::RagConfig;
use trace_core::rng;

use crate::error::{CliError, Result};

/// Synthetic corpus shape; the generator seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub channels: usize,
    pub length: usize,
    pub horizon: usize,
    pub class_count: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub motif_amplitude: f64,
    pub noise: f64,
    pub event_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            channels: g.channels,
            length: g.length,
            horizon: g.horizon,
            class_count: g.class_count,
            train_per_class: g.train_per_class,
            val_per_class: g.val_per_class,
            test_per_class: g.test_per_class,
            motif_amplitude: g.motif_amplitude,
            noise: g.noise,
            event_rate: g.event_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out pairs in the cross-modal retrieval pool.
    pub pool: usize,
    pub ks: Vec<usize>,
    pub probe_steps: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool: 128,
            ks: vec![1, 5, 10],
            probe_steps: 300,
            probe_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub rag: RagConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            align: AlignConfig::default(),
            rag: RagConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|msg| CliError::Config {
            path: origin.to_path_buf(),
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn generator(&self) -> GeneratorConfig {
        let d = &self.data;
        GeneratorConfig {
            seed: rng::derive_seed(self.seed, "data"),
            channels: d.channels,
            length: d.length,
            horizon: d.horizon,
            patch_len: self.model.patch_len,
            class_count: d.class_count,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            test_per_class: d.test_per_class,
            motif_amplitude: d.motif_amplitude,
            noise: d.noise,
            event_rate: d.event_rate,
        }
    }

    /// Checks every section; the message names the offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        fn tag(sec: &'static str) -> impl Fn(trace_core::TraceError) -> String {
            move |e| format!("[{sec}] {e}")
        }
        self.model.validate().map_err(tag("model"))?;
        self.generator().validate().map_err(tag("data"))?;
        self.pretrain.validate().map_err(tag("pretrain"))?;
        self.align.validate().map_err(tag("align"))?;
        self.rag.validate().map_err(tag("rag"))?;
        if self.model.channels != self.data.channels {
            return Err(format!(
                "[model] channels = {} but [data] channels = {}",
                self.model.channels, self.data.channels
            ));
        }
        if self.model.classes < self.data.class_count {
            return Err(format!(
                "[model] classes = {} is below [data] class_count = {}",
                self.model.classes, self.data.class_count
            ));
        }
        let stored = self.data.length + self.data.horizon;
        if self.rag.history + self.rag.horizon > stored {
            return Err(format!(
                "[rag] history + horizon = {} exceeds the {stored} stored steps",
                self.rag.history + self.rag.horizon
            ));
        }
        if self.rag.history < self.model.patch_len {
            return Err(format!(
                "[rag] history = {} is shorter than one patch ({})",
                self.rag.history, self.model.patch_len
            ));
        }
        if self.eval.pool < 2 {
            return Err("[eval] pool must be at least 2".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err("[eval] ks must be non-empty and positive".into());
        }
        Ok(())
    }
}
