//! Synthetic multimodal time-series corpora.
//!
//! Every instance is a `C×T` series built from per-channel motifs (linear
//! trend, sinusoidal cycle, spikes, level shift) plus Gaussian noise. A class
//! fixes each channel's trend direction and cycle period; the instance draws
//! the cycle strength and at most one event (spikes or a level shift) per
//! channel. Channel texts describe every motif of their channel, and the
//! context text names the class together with the channels carrying events.
//!
//! Corpora are stored as JSON lines: a manifest record followed by one
//! record per instance.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result, TraceError};
use crate::rng;

/// Version of the motif vocabulary and class templates.
pub const MOTIF_VERSION: u32 = 1;

pub const CHANNEL_NAMES: [&str; 7] = [
    "temperature",
    "humidity",
    "pressure",
    "wind",
    "precipitation",
    "visibility",
    "dewpoint",
];

pub const EVENT_NAMES: [&str; 10] = [
    "calm",
    "thunderstorm",
    "heatwave",
    "coldsnap",
    "flood",
    "drought",
    "blizzard",
    "windstorm",
    "fog",
    "downpour",
];

pub fn channel_name(c: usize) -> String {
    CHANNEL_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("channel{c}"))
}

pub fn event_name(k: usize) -> String {
    EVENT_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("event{k}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSeriesInstance {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// One row per channel.
    pub values: Vec<Vec<f64>>,
    pub channel_texts: Vec<String>,
    pub context_text: String,
}

impl TimeSeriesInstance {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `t` columns of every channel.
    pub fn window(&self, t: usize) -> Vec<Vec<f64>> {
        self.values.iter().map(|r| r[..t].to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn bump(&mut self, s: Split) {
        match s {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub channels: usize,
    /// Stored columns per instance (window length plus any forecast horizon).
    pub length: usize,
    pub patch_len: usize,
    pub class_count: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub motif_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub instances: Vec<TimeSeriesInstance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &TimeSeriesInstance> {
        self.instances.iter().filter(move |i| i.split == s)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Falling,
    Flat,
    Rising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelEvent {
    None,
    Spikes(usize),
    ShiftUp,
    ShiftDown,
}

/// Generating parameters of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMotif {
    pub trend: Trend,
    /// Change per time step of the linear trend.
    pub slope: f64,
    pub period: usize,
    pub cycle_amplitude: f64,
    pub cycle_strong: bool,
    pub phase: f64,
    pub event: ChannelEvent,
    pub spike_positions: Vec<usize>,
    pub spike_height: f64,
    pub shift_at: usize,
    pub shift_size: f64,
    pub baseline: f64,
    pub scale: f64,
}

impl ChannelMotif {
    /// Noise-free rendering of `len` steps.
    pub fn render(&self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| {
                let tf = t as f64;
                let mut v = self.slope * tf;
                if self.cycle_amplitude != 0.0 {
                    v += self.cycle_amplitude
                        * (2.0 * std::f64::consts::PI * tf / self.period as f64 + self.phase).sin();
                }
                for &p in &self.spike_positions {
                    let d = t.abs_diff(p);
                    if d <= 1 {
                        v += self.spike_height * if d == 0 { 1.0 } else { 0.5 };
                    }
                }
                if self.shift_size != 0.0 && t >= self.shift_at {
                    v += self.shift_size;
                }
                self.baseline + self.scale * v
            })
            .collect()
    }

    fn describe(&self, channel: &str) -> String {
        let trend = match self.trend {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::Flat => "flat",
        };
        let strength = if self.cycle_strong { "strong" } else { "weak" };
        let event = match self.event {
            ChannelEvent::None => "no anomalies".to_string(),
            ChannelEvent::Spikes(n) => format!("{} {channel} {}", count_word(n), spike_word(n)),
            ChannelEvent::ShiftUp => format!("upward {channel} shift"),
            ChannelEvent::ShiftDown => format!("downward {channel} shift"),
        };
        format!(
            "{channel} shows a {trend} trend with a {strength} {} cycle and {event}",
            period_word(self.period)
        )
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        3 => "three",
        _ => "several",
    }
}

fn spike_word(n: usize) -> &'static str {
    if n == 1 {
        "spike"
    } else {
        "spikes"
    }
}

fn period_word(p: usize) -> String {
    match p {
        12 => "half-day".into(),
        24 => "daily".into(),
        48 => "two-day".into(),
        p => format!("{p}-step"),
    }
}

const PERIODS: [usize; 3] = [12, 24, 48];

/// Class-level template: trend direction and cycle period per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTemplate {
    pub trends: Vec<Trend>,
    pub periods: Vec<usize>,
}

/// Deterministic class templates for the current motif version; distinct per class.
pub fn class_templates(class_count: usize, channels: usize) -> Vec<ClassTemplate> {
    let mut rng = rng::substream(MOTIF_VERSION as u64, "class-templates");
    let mut out: Vec<ClassTemplate> = Vec::with_capacity(class_count);
    while out.len() < class_count {
        let t = ClassTemplate {
            trends: (0..channels)
                .map(|_| match rng.random_range(0..3) {
                    0 => Trend::Falling,
                    1 => Trend::Flat,
                    _ => Trend::Rising,
                })
                .collect(),
            periods: (0..channels)
                .map(|_| PERIODS[rng.random_range(0..PERIODS.len())])
                .collect(),
        };
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub channels: usize,
    /// Window length `T`.
    pub length: usize,
    /// Extra columns generated after the window for forecasting.
    pub horizon: usize,
    pub patch_len: usize,
    pub class_count: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Multiplier on every motif amplitude.
    pub motif_amplitude: f64,
    /// Noise standard deviation relative to the motif amplitude.
    pub noise: f64,
    /// Probability that a channel carries an event.
    pub event_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 7,
            length: 168,
            horizon: 0,
            patch_len: 6,
            class_count: 10,
            train_per_class: 200,
            val_per_class: 10,
            test_per_class: 13,
            motif_amplitude: 1.0,
            noise: 0.1,
            event_rate: 0.4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TraceError::Config(m));
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.patch_len == 0 {
            return bad("patch_len must be at least 1".into());
        }
        if self.length < 2 * self.patch_len {
            return bad(format!(
                "length {} must be at least twice the patch length {}",
                self.length, self.patch_len
            ));
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2".into());
        }
        if !(self.noise >= 0.0 && self.motif_amplitude >= 0.0) {
            return bad("noise and motif_amplitude must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad("event_rate must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// `generate_corpus(seed, C, T, n_per_class, class_count)` with default noise and splits
/// drawn 80/10/10 per class.
pub fn generate_corpus(
    seed: u64,
    channels: usize,
    length: usize,
    n_per_class: usize,
    class_count: usize,
) -> Result<Corpus> {
    let test = n_per_class / 10;
    let val = n_per_class / 10;
    let cfg = GeneratorConfig {
        seed,
        channels,
        length,
        class_count,
        train_per_class: n_per_class - test - val,
        val_per_class: val,
        test_per_class: test,
        ..Default::default()
    };
    generate(&cfg)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus> {
    Ok(generate_detailed(cfg)?.0)
}

/// Generates a corpus and returns each instance's channel motifs alongside it.
pub fn generate_detailed(cfg: &GeneratorConfig) -> Result<(Corpus, Vec<Vec<ChannelMotif>>)> {
    cfg.validate()?;
    let templates = class_templates(cfg.class_count, cfg.channels);
    let per_class = cfg.train_per_class + cfg.val_per_class + cfg.test_per_class;
    let total_len = cfg.length + cfg.horizon;
    let mut instances = Vec::with_capacity(per_class * cfg.class_count);
    let mut motifs = Vec::with_capacity(instances.capacity());
    let mut counts = SplitCounts::default();
    for i in 0..per_class {
        let split = if i < cfg.train_per_class {
            Split::Train
        } else if i < cfg.train_per_class + cfg.val_per_class {
            Split::Val
        } else {
            Split::Test
        };
        for (label, template) in templates.iter().enumerate() {
            let index = instances.len();
            let mut r = rng::indexed(cfg.seed, "data", index as u64);
            let chan: Vec<ChannelMotif> = (0..cfg.channels)
                .map(|c| draw_motif(cfg, template, c, &mut r))
                .collect();
            let values: Vec<Vec<f64>> = chan
                .iter()
                .map(|m| {
                    let sigma = cfg.noise * cfg.motif_amplitude * m.scale;
                    m.render(total_len)
                        .into_iter()
                        .map(|v| {
                            if sigma > 0.0 {
                                v + sigma * r.sample::<f64, _>(StandardNormal)
                            } else {
                                v
                            }
                        })
                        .collect()
                })
                .collect();
            let channel_texts = chan
                .iter()
                .enumerate()
                .map(|(c, m)| m.describe(&channel_name(c)))
                .collect();
            instances.push(TimeSeriesInstance {
                id: format!("s{:05}", index),
                label,
                split,
                values,
                channel_texts,
                context_text: context_text(label, &chan),
            });
            motifs.push(chan);
            counts.bump(split);
        }
    }
    let manifest = CorpusManifest {
        channels: cfg.channels,
        length: total_len,
        patch_len: cfg.patch_len,
        class_count: cfg.class_count,
        counts,
        seed: cfg.seed,
        motif_version: MOTIF_VERSION,
    };
    Ok((
        Corpus {
            manifest,
            instances,
        },
        motifs,
    ))
}

fn draw_motif<R: Rng>(
    cfg: &GeneratorConfig,
    template: &ClassTemplate,
    c: usize,
    r: &mut R,
) -> ChannelMotif {
    let amp = cfg.motif_amplitude;
    let trend = template.trends[c];
    // total trend change of ±2 over the window
    let slope = amp
        * match trend {
            Trend::Rising => 2.0,
            Trend::Falling => -2.0,
            Trend::Flat => 0.0,
        }
        / cfg.length as f64;
    let cycle_strong = r.random_bool(0.5);
    let cycle_amplitude = amp * if cycle_strong { 1.5 } else { 0.5 };
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let event = if r.random_bool(cfg.event_rate) {
        match r.random_range(0..4) {
            0 => ChannelEvent::Spikes(1),
            1 => ChannelEvent::Spikes(2),
            2 => ChannelEvent::ShiftUp,
            _ => ChannelEvent::ShiftDown,
        }
    } else {
        ChannelEvent::None
    };
    let lo = cfg.length / 8;
    let hi = cfg.length - cfg.length / 8;
    let spike_positions = match event {
        ChannelEvent::Spikes(n) => {
            let mut p: Vec<usize> = Vec::with_capacity(n);
            while p.len() < n {
                let x = r.random_range(lo..hi);
                if p.iter().all(|q| q.abs_diff(x) > cfg.length / 8) {
                    p.push(x);
                }
            }
            p.sort_unstable();
            p
        }
        _ => Vec::new(),
    };
    let shift_at = r.random_range(cfg.length / 4..cfg.length - cfg.length / 4);
    let shift_size = amp
        * match event {
            ChannelEvent::ShiftUp => 2.0,
            ChannelEvent::ShiftDown => -2.0,
            _ => 0.0,
        };
    let baseline = 5.0 * r.sample::<f64, _>(StandardNormal);
    let scale = r.random_range(0.5..2.0);
    ChannelMotif {
        trend,
        slope,
        period: template.periods[c],
        cycle_amplitude,
        cycle_strong,
        phase,
        event,
        spike_positions,
        spike_height: 4.0 * amp,
        shift_at,
        shift_size,
        baseline,
        scale,
    }
}

fn context_text(label: usize, chan: &[ChannelMotif]) -> String {
    let mut dominant = Vec::new();
    let mut phrases = Vec::new();
    for (c, m) in chan.iter().enumerate() {
        let name = channel_name(c);
        match m.event {
            ChannelEvent::None => continue,
            ChannelEvent::Spikes(n) => {
                phrases.push(format!("{} {name} {}", count_word(n), spike_word(n)))
            }
            ChannelEvent::ShiftUp => phrases.push(format!("upward {name} shift")),
            ChannelEvent::ShiftDown => phrases.push(format!("downward {name} shift")),
        }
        dominant.push(name);
    }
    let event = event_name(label);
    if dominant.is_empty() {
        format!("{event} conditions with no notable anomalies")
    } else {
        format!(
            "{event} conditions dominated by {}: {}",
            dominant.join(" and "),
            phrases.join(", ")
        )
    }
}

/// History/future split of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPair {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub history: Vec<Vec<f64>>,
    pub future: Vec<Vec<f64>>,
}

/// Splits every instance at column `t` into a `t`-step history and `h`-step future.
pub fn make_forecast_pairs(corpus: &Corpus, t: usize, h: usize) -> Result<Vec<ForecastPair>> {
    if h == 0 {
        return Err(invalid("make_forecast_pairs", "horizon must be at least 1"));
    }
    if t == 0 {
        return Err(invalid("make_forecast_pairs", "history must be at least 1"));
    }
    corpus
        .instances
        .iter()
        .map(|inst| {
            if inst.len() < t + h {
                return Err(invalid(
                    "make_forecast_pairs",
                    format!("instance {} has {} steps, need {}", inst.id, inst.len(), t + h),
                ));
            }
            Ok(ForecastPair {
                id: inst.id.clone(),
                label: inst.label,
                split: inst.split,
                history: inst.values.iter().map(|r| r[..t].to_vec()).collect(),
                future: inst.values.iter().map(|r| r[t..t + h].to_vec()).collect(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Manifest(CorpusManifest),
    Instance(TimeSeriesInstance),
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let line = serde_json::to_string(&Record::Manifest(corpus.manifest.clone()))
        .map_err(|e| invalid("save_corpus", e.to_string()))?;
    writeln!(w, "{line}")?;
    for inst in &corpus.instances {
        let line = serde_json::to_string(&Record::Instance(inst.clone()))
            .map_err(|e| invalid("save_corpus", e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(std::fs::File::open(path)?)
}

pub fn read_corpus<R: Read>(r: R) -> Result<Corpus> {
    let err = |line: usize, msg: String| TraceError::Corpus { line, msg };
    let mut manifest: Option<CorpusManifest> = None;
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    let mut counts = SplitCounts::default();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
        match (rec, &manifest) {
            (Record::Manifest(m), None) if lineno == 1 => manifest = Some(m),
            (Record::Manifest(_), _) => {
                return Err(err(lineno, "field `record`: manifest must be the first line only".into()))
            }
            (Record::Instance(_), None) => {
                return Err(err(lineno, "field `record`: instance before manifest".into()))
            }
            (Record::Instance(inst), Some(m)) => {
                if inst.values.len() != m.channels {
                    return Err(err(
                        lineno,
                        format!("field `values`: {} rows, expected {}", inst.values.len(), m.channels),
                    ));
                }
                if let Some(row) = inst.values.iter().position(|r| r.len() != m.length) {
                    return Err(err(
                        lineno,
                        format!("field `values`: row {row} has {} columns, expected {}", inst.values[row].len(), m.length),
                    ));
                }
                if inst.values.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(err(lineno, "field `values`: non-finite entry".into()));
                }
                if inst.channel_texts.len() != m.channels {
                    return Err(err(
                        lineno,
                        format!(
                            "field `channel_texts`: {} entries, expected {}",
                            inst.channel_texts.len(),
                            m.channels
                        ),
                    ));
                }
                if inst.label >= m.class_count {
                    return Err(err(
                        lineno,
                        format!("field `label`: {} not below class count {}", inst.label, m.class_count),
                    ));
                }
                if !ids.insert(inst.id.clone()) {
                    return Err(err(lineno, format!("field `id`: duplicate id {}", inst.id)));
                }
                counts.bump(inst.split);
                instances.push(inst);
            }
        }
    }
    let manifest = manifest.ok_or_else(|| err(1, "missing manifest record".into()))?;
    if counts != manifest.counts {
        return Err(err(
            0,
            format!(
                "field `counts`: manifest says {:?}, file holds {:?}",
                manifest.counts, counts
            ),
        ));
    }
    Ok(Corpus {
        manifest,
        instances,
    })
}

/// SHA-256 of the serialized corpus, hex encoded.
pub fn corpus_checksum(corpus: &Corpus) -> Result<String> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    Ok(hex(&Sha256::digest(&buf)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
