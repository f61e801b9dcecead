//! Run configuration in a sectioned `key = value` format:
//!
//! ```text
//! # comment
//! seed = 7
//!
//! [model]
//! family = resmlp
//! norm = layernorm
//!
//! [quant]
//! weight_bits = 4
//! ```
//!
//! Sections are `model`, `quant`, `train`, `data` and `output`; `seed` may
//! appear before the first section. Missing keys keep their defaults and
//! unknown keys are errors. Overrides use the dotted form
//! `section.key=value`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::SynthTask;
use crate::models::ModelConfig;
use crate::pipeline::{QuantConfig, TrainConfig};

pub const SECTIONS: [&str; 5] = ["model", "quant", "train", "data", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synth" => Ok(DataSource::Synth),
            "idx" => Ok(DataSource::Idx),
            _ => Err(format!("expected synth|idx, got `{s}`")),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Synth => "synth",
            DataSource::Idx => "idx",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("expected csv|json, got `{s}`")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    /// Map pixels from `[0, 1]` to `[-1, 1]` after loading.
    pub normalize: bool,
    /// Synthetic task nuisance: per-pixel noise std and phase jitter (radians).
    pub noise_std: f64,
    pub phase_jitter: f64,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataConfig {
    pub fn synth_task(&self) -> SynthTask {
        SynthTask {
            noise_std: self.noise_std,
            phase_jitter: self.phase_jitter,
            ..SynthTask::default()
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            train_size: 2000,
            test_size: 1000,
            normalize: true,
            noise_std: SynthTask::default().noise_std,
            phase_jitter: SynthTask::default().phase_jitter,
            train_images: PathBuf::from("train-images-idx3-ubyte"),
            train_labels: PathBuf::from("train-labels-idx1-ubyte"),
            test_images: PathBuf::from("t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("t10k-labels-idx1-ubyte"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            format: ReportFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    /// Fine-tuning learning rate.
    pub qat_lr: f64,
    pub qat_epochs: usize,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            quant: QuantConfig::default(),
            train: TrainConfig::default(),
            qat_lr: 2e-5,
            qat_epochs: 5,
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, kind: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects {kind}, got `{value}`"))
}

fn parse_keyword<T: FromStr<Err = String>>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: String| format!("`{key}`: {e}"))
}

impl RunConfig {
    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let int = "an unsigned integer";
        let real = "a number";
        let m = &mut self.model;
        let q = &mut self.quant;
        let t = &mut self.train;
        let d = &mut self.data;
        let o = &mut self.output;
        match key {
            "seed" => self.seed = parse_value(key, value, int)?,
            "model.family" => m.family = parse_keyword(key, value)?,
            "model.depth" => m.depth = parse_value(key, value, int)?,
            "model.height" => m.height = parse_value(key, value, int)?,
            "model.width" => m.width = parse_value(key, value, int)?,
            "model.in_channels" => m.in_channels = parse_value(key, value, int)?,
            "model.patch" => m.patch = parse_value(key, value, int)?,
            "model.channels" => m.channels = parse_value(key, value, int)?,
            "model.token_hidden" => m.token_hidden = parse_value(key, value, int)?,
            "model.channel_hidden" => m.channel_hidden = parse_value(key, value, int)?,
            "model.norm" => m.norm = parse_keyword(key, value)?,
            "model.act" => m.act = parse_keyword(key, value)?,
            "model.groups" => m.groups = parse_value(key, value, int)?,
            "model.kernel" => m.kernel = parse_value(key, value, int)?,
            "model.classes" => m.classes = parse_value(key, value, int)?,
            "model.eps" => m.eps = parse_value(key, value, real)?,
            "model.pact_alpha" => m.pact_alpha = parse_value(key, value, real)?,
            "model.init_std" => m.init_std = parse_value(key, value, real)?,
            "quant.weight_bits" => q.weight_bits = parse_value(key, value, int)?,
            "quant.act_bits" => q.act_bits = parse_value(key, value, int)?,
            "quant.act_scheme" => q.act_scheme = parse_keyword(key, value)?,
            "quant.observer" => q.observer = parse_keyword(key, value)?,
            "quant.ema_momentum" => q.ema_momentum = parse_value(key, value, real)?,
            "quant.percentile" => q.percentile = parse_value(key, value, real)?,
            "quant.calib_batches" => q.calib_batches = parse_value(key, value, int)?,
            "quant.calib_batch_size" => q.calib_batch_size = parse_value(key, value, int)?,
            "train.optimizer" => t.optimizer = parse_keyword(key, value)?,
            "train.lr" => t.lr = parse_value(key, value, real)?,
            "train.momentum" => t.momentum = parse_value(key, value, real)?,
            "train.epochs" => t.epochs = parse_value(key, value, int)?,
            "train.batch_size" => t.batch_size = parse_value(key, value, int)?,
            "train.alpha_decay" => t.alpha_decay = parse_value(key, value, real)?,
            "train.mode" => t.mode = parse_keyword(key, value)?,
            "train.qat_lr" => self.qat_lr = parse_value(key, value, real)?,
            "train.qat_epochs" => self.qat_epochs = parse_value(key, value, int)?,
            "data.source" => d.source = parse_keyword(key, value)?,
            "data.train_size" => d.train_size = parse_value(key, value, int)?,
            "data.test_size" => d.test_size = parse_value(key, value, int)?,
            "data.normalize" => d.normalize = parse_value(key, value, "true or false")?,
            "data.noise_std" => d.noise_std = parse_value(key, value, real)?,
            "data.phase_jitter" => d.phase_jitter = parse_value(key, value, real)?,
            "data.train_images" => d.train_images = PathBuf::from(value),
            "data.train_labels" => d.train_labels = PathBuf::from(value),
            "data.test_images" => d.test_images = PathBuf::from(value),
            "data.test_labels" => d.test_labels = PathBuf::from(value),
            "output.dir" => o.dir = PathBuf::from(value),
            "output.format" => o.format = parse_keyword(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in rendering order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (m, q, t, d, o) = (&self.model, &self.quant, &self.train, &self.data, &self.output);
        let f = |v: f64| format!("{v:?}");
        let p = |v: &PathBuf| v.display().to_string();
        let list: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model.family", m.family.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.token_hidden", m.token_hidden.to_string()),
            ("model.channel_hidden", m.channel_hidden.to_string()),
            ("model.norm", m.norm.to_string()),
            ("model.act", m.act.to_string()),
            ("model.groups", m.groups.to_string()),
            ("model.kernel", m.kernel.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.eps", f(m.eps)),
            ("model.pact_alpha", f(m.pact_alpha)),
            ("model.init_std", f(m.init_std)),
            ("quant.weight_bits", q.weight_bits.to_string()),
            ("quant.act_bits", q.act_bits.to_string()),
            ("quant.act_scheme", q.act_scheme.to_string()),
            ("quant.observer", q.observer.to_string()),
            ("quant.ema_momentum", f(q.ema_momentum)),
            ("quant.percentile", f(q.percentile)),
            ("quant.calib_batches", q.calib_batches.to_string()),
            ("quant.calib_batch_size", q.calib_batch_size.to_string()),
            ("train.optimizer", t.optimizer.to_string()),
            ("train.lr", f(t.lr)),
            ("train.momentum", f(t.momentum)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.alpha_decay", f(t.alpha_decay)),
            ("train.mode", t.mode.to_string()),
            ("train.qat_lr", f(self.qat_lr)),
            ("train.qat_epochs", self.qat_epochs.to_string()),
            ("data.source", d.source.to_string()),
            ("data.train_size", d.train_size.to_string()),
            ("data.test_size", d.test_size.to_string()),
            ("data.normalize", d.normalize.to_string()),
            ("data.noise_std", format!("{:?}", d.noise_std)),
            ("data.phase_jitter", format!("{:?}", d.phase_jitter)),
            ("data.train_images", p(&d.train_images)),
            ("data.train_labels", p(&d.train_labels)),
            ("data.test_images", p(&d.test_images)),
            ("data.test_labels", p(&d.test_labels)),
            ("output.dir", p(&o.dir)),
            ("output.format", o.format.to_string()),
        ];
        list.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The whole configuration in the file format; parsing it gives back
    /// an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            match k.split_once('.') {
                Some((s, key)) => {
                    if s != section {
                        out.push_str(&format!("\n[{s}]\n"));
                        section = s.to_string();
                    }
                    out.push_str(&format!("{key} = {v}\n"));
                }
                None => out.push_str(&format!("{k} = {v}\n")),
            }
        }
        out
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
        let k = k.trim();
        self.set(k, v.trim()).map_err(|m| Error::config(k, m))
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn qat_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.qat_lr,
            epochs: self.qat_epochs,
            ..TrainConfig::qat(self.qat_epochs, self.seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quant.validate()?;
        self.train.validate()?;
        if !(self.qat_lr >= 0.0) {
            return Err(Error::config("train.qat_lr", "must be non-negative"));
        }
        if self.data.source == DataSource::Synth {
            self.data.synth_task().validate().map_err(|e| Error::config("data.noise_std", e.to_string()))?;
        }
        if self.data.source == DataSource::Synth && self.data.train_size < self.model.classes {
            return Err(Error::config("data.train_size", "must be at least the class count"));
        }
        Ok(())
    }
}

/// Parses a whole config file. Errors carry the 1-based line number.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                .trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|s| **s == name)
                    .ok_or_else(|| err(format!("unknown section `[{name}]`")))?,
            );
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains('.') {
            return Err(err(format!("malformed key `{k}`")));
        }
        let key = match section {
            Some(s) => format!("{s}.{k}"),
            None => k.to_string(),
        };
        cfg.set(&key, v).map_err(err)?;
    }
    cfg.validate().map_err(|e| e.at("config"))?;
    Ok(cfg)
}
