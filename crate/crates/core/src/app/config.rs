//! Flat `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and unparsable values are usage errors naming the
//! key. The config hash is the CRC-32 of the fully resolved configuration
//! rendered by [`AppConfig::render`], minus `out_dir`: two files that resolve
//! to the same settings share a hash wherever their artifacts are written.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::preprocess::AslsConfig;
use crate::siamese::Architecture;
use crate::spectra::{AugmentPolicy, Grid, SynthConfig, DEFAULT_GRID_LEN};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Syntax { line: usize, text: String },
    UnknownKey(String),
    BadValue { key: String, value: String, reason: String },
    Duplicate(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => write!(f, "config line {line}: expected `key = value`, got `{text}`"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            ConfigError::BadValue { key, value, reason } => write!(f, "config key `{key}`: bad value `{value}` ({reason})"),
            ConfigError::Duplicate(k) => write!(f, "config key `{k}` given twice"),
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.to_string() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: line.to_string() });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolChoice {
    None,
    OneShot,
    Multiclass,
    MulticlassClassifier,
}

impl ProtocolChoice {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolChoice::None => "none",
            ProtocolChoice::OneShot => "one-shot",
            ProtocolChoice::Multiclass => "multiclass",
            ProtocolChoice::MulticlassClassifier => "multiclass-classifier",
        }
    }
}

impl FromStr for ProtocolChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Self::None, Self::OneShot, Self::Multiclass, Self::MulticlassClassifier]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| "expected none, one-shot, multiclass or multiclass-classifier".into())
    }
}

/// Every setting a command can take.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub grid_start: Option<f64>,
    pub grid_end: Option<f64>,
    pub grid_len: usize,
    pub synth: bool,
    pub synth_classes: usize,
    pub synth_samples: usize,
    pub synth_peaks: (usize, usize),
    pub synth_baseline_degree: Option<usize>,
    pub synth_baseline_amplitude: f64,
    pub synth_noise: f64,
    pub synth_disjoint_peaks: bool,
    pub preprocess: bool,
    pub asls: AslsConfig,
    pub train: TrainConfig,
    pub augment: bool,
    pub augment_max_shift: usize,
    pub augment_noise: f64,
    pub augment_scale: (f64, f64),
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub leaky_slope: f64,
    pub protocol: ProtocolChoice,
    pub repeats: usize,
    pub split: (f64, f64, f64),
    pub top_k: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let aug = AugmentPolicy::default();
        Self {
            seed: 0,
            data_dir: None,
            cache: None,
            out_dir: PathBuf::from("out"),
            grid_start: None,
            grid_end: None,
            grid_len: DEFAULT_GRID_LEN,
            synth: false,
            synth_classes: synth.n_classes,
            synth_samples: synth.samples_per_class,
            synth_peaks: synth.peak_count_range,
            synth_baseline_degree: synth.baseline_degree,
            synth_baseline_amplitude: synth.baseline_amplitude,
            synth_noise: synth.noise_sigma,
            synth_disjoint_peaks: synth.disjoint_peaks,
            preprocess: false,
            asls: AslsConfig::default(),
            train: TrainConfig::default(),
            augment: false,
            augment_max_shift: aug.max_shift(),
            augment_noise: aug.noise_sigma(),
            augment_scale: aug.scale_range(),
            filters: vec![32, 32, 16, 16, 8, 8],
            kernels: vec![9, 9, 7, 7, 5, 5],
            leaky_slope: 0.01,
            protocol: ProtocolChoice::OneShot,
            repeats: 5,
            split: (0.5, 0.1, 0.4),
            top_k: 1,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, v, e.to_string()))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn show_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl AppConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "data_dir" => self.data_dir = (v != "none").then(|| PathBuf::from(v)),
            "cache" => self.cache = (v != "none").then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "grid_start" => self.grid_start = optional(key, v)?,
            "grid_end" => self.grid_end = optional(key, v)?,
            "grid_len" => self.grid_len = num(key, v)?,
            "synth" => self.synth = boolean(key, v)?,
            "synth_classes" => self.synth_classes = num(key, v)?,
            "synth_samples" => self.synth_samples = num(key, v)?,
            "synth_peaks_min" => self.synth_peaks.0 = num(key, v)?,
            "synth_peaks_max" => self.synth_peaks.1 = num(key, v)?,
            "synth_baseline_degree" => self.synth_baseline_degree = optional(key, v)?,
            "synth_baseline_amplitude" => self.synth_baseline_amplitude = num(key, v)?,
            "synth_noise" => self.synth_noise = num(key, v)?,
            "synth_disjoint_peaks" => self.synth_disjoint_peaks = boolean(key, v)?,
            "preprocess" => self.preprocess = boolean(key, v)?,
            "asls_lambda" => self.asls.lambda = num(key, v)?,
            "asls_p" => self.asls.p = num(key, v)?,
            "asls_max_iter" => self.asls.max_iter = num(key, v)?,
            "asls_tol" => self.asls.tol = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "base_lr" => self.train.base_lr = num(key, v)?,
            "lr_halving_period" => self.train.lr_halving_period = optional(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "patience" => self.train.patience = num(key, v)?,
            "val_pairs" => self.train.val_pairs = num(key, v)?,
            "bias" => self.train.bias_enabled = boolean(key, v)?,
            "augment" => self.augment = boolean(key, v)?,
            "augment_max_shift" => self.augment_max_shift = num(key, v)?,
            "augment_noise" => self.augment_noise = num(key, v)?,
            "augment_scale_min" => self.augment_scale.0 = num(key, v)?,
            "augment_scale_max" => self.augment_scale.1 = num(key, v)?,
            "filters" => self.filters = list(key, v)?,
            "kernels" => self.kernels = list(key, v)?,
            "leaky_slope" => self.leaky_slope = num(key, v)?,
            "protocol" => self.protocol = v.parse().map_err(|e: String| bad(key, v, e))?,
            "repeats" => self.repeats = num(key, v)?,
            "split_train" => self.split.0 = num(key, v)?,
            "split_val" => self.split.1 = num(key, v)?,
            "split_test" => self.split.2 = num(key, v)?,
            "top_k" => self.top_k = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-field validation; each failure names the key to fix.
    pub fn check(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, value: String, reason: &str| Err(bad(key, &value, reason));
        if self.grid_len < 8 {
            return fail("grid_len", self.grid_len.to_string(), "must be >= 8");
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return fail("filters", show_list(&self.filters), "need one or more positive filter counts");
        }
        if self.kernels.len() != self.filters.len() || self.kernels.contains(&0) {
            return fail("kernels", show_list(&self.kernels), "need one positive kernel size per filter entry");
        }
        if self.grid_len >> self.filters.len() == 0 {
            return fail("filters", show_list(&self.filters), "too many pooling blocks for grid_len");
        }
        if self.repeats == 0 {
            return fail("repeats", "0".into(), "must be >= 1");
        }
        if self.top_k == 0 {
            return fail("top_k", "0".into(), "must be >= 1");
        }
        if let Err(e) = self.asls.validate() {
            return fail("asls_*", String::new(), &e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return fail("train", String::new(), &e.to_string());
        }
        if self.augment {
            if let Err(e) = self.augment_policy() {
                return fail("augment_*", String::new(), &e.to_string());
            }
        }
        if let Err(e) = crate::sampler::SplitSpec::new(self.split.0, self.split.1, self.split.2, 0) {
            return fail("split_*", String::new(), &e.to_string());
        }
        Ok(())
    }

    pub fn augment_policy(&self) -> crate::Result<AugmentPolicy> {
        AugmentPolicy::new(self.augment_max_shift, self.augment_noise, self.augment_scale)
    }

    /// Training settings with augmentation and seed resolved.
    pub fn train_config(&self) -> crate::Result<TrainConfig> {
        let augment = if self.augment { Some(self.augment_policy()?) } else { None };
        Ok(TrainConfig { augment, seed: self.seed, ..self.train.clone() })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::blocks(self.grid_len, &self.filters, &self.kernels, self.leaky_slope)
    }

    pub fn synth_config(&self) -> crate::Result<SynthConfig> {
        Ok(SynthConfig {
            n_classes: self.synth_classes,
            samples_per_class: self.synth_samples,
            peak_count_range: self.synth_peaks,
            baseline_degree: self.synth_baseline_degree,
            baseline_amplitude: self.synth_baseline_amplitude,
            noise_sigma: self.synth_noise,
            disjoint_peaks: self.synth_disjoint_peaks,
            grid: Grid::new(self.grid_start.unwrap_or(150.0), self.grid_end.unwrap_or(1200.0), self.grid_len)?,
            seed: self.seed,
            ..SynthConfig::default()
        })
    }

    /// Every key with its resolved value, sorted by key.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        let t = &self.train;
        let entries: BTreeMap<&str, String> = [
            ("seed", self.seed.to_string()),
            ("data_dir", path(&self.data_dir)),
            ("cache", path(&self.cache)),
            ("out_dir", self.out_dir.display().to_string()),
            ("grid_start", show_opt(&self.grid_start)),
            ("grid_end", show_opt(&self.grid_end)),
            ("grid_len", self.grid_len.to_string()),
            ("synth", self.synth.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_samples", self.synth_samples.to_string()),
            ("synth_peaks_min", self.synth_peaks.0.to_string()),
            ("synth_peaks_max", self.synth_peaks.1.to_string()),
            ("synth_baseline_degree", show_opt(&self.synth_baseline_degree)),
            ("synth_baseline_amplitude", self.synth_baseline_amplitude.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("synth_disjoint_peaks", self.synth_disjoint_peaks.to_string()),
            ("preprocess", self.preprocess.to_string()),
            ("asls_lambda", self.asls.lambda.to_string()),
            ("asls_p", self.asls.p.to_string()),
            ("asls_max_iter", self.asls.max_iter.to_string()),
            ("asls_tol", self.asls.tol.to_string()),
            ("epochs", t.epochs.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("lr_halving_period", show_opt(&t.lr_halving_period)),
            ("batch_size", t.batch_size.to_string()),
            ("patience", t.patience.to_string()),
            ("val_pairs", t.val_pairs.to_string()),
            ("bias", t.bias_enabled.to_string()),
            ("augment", self.augment.to_string()),
            ("augment_max_shift", self.augment_max_shift.to_string()),
            ("augment_noise", self.augment_noise.to_string()),
            ("augment_scale_min", self.augment_scale.0.to_string()),
            ("augment_scale_max", self.augment_scale.1.to_string()),
            ("filters", show_list(&self.filters)),
            ("kernels", show_list(&self.kernels)),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("protocol", self.protocol.name().to_string()),
            ("repeats", self.repeats.to_string()),
            ("split_train", self.split.0.to_string()),
            ("split_val", self.split.1.to_string()),
            ("split_test", self.split.2.to_string()),
            ("top_k", self.top_k.to_string()),
        ]
        .into_iter()
        .collect();
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> u32 {
        let text: String = self.render().lines().filter(|l| !l.starts_with("out_dir ")).map(|l| format!("{l}\n")).collect();
        crc32fast::hash(text.as_bytes())
    }

    /// Reproducibility stamp carried by every artifact.
    pub fn stamp(&self) -> String {
        format!("spectromatch {}\nconfig_hash={:08x}\nseed={}", env!("CARGO_PKG_VERSION"), self.hash(), self.seed)
    }
}
