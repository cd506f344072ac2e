//! The two evaluation protocols and their metrics.
//!
//! One-shot: classes are split into train / validation / test; the model
//! never sees a test class. One random sample per test class becomes the
//! reference, every other test sample is a query. Multiclass: one sample
//! per class is held out and matched against references (or classified by
//! the softmax head) built from the remaining samples of all classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matcher::{match_raw, Metric, ReferenceDb};
use crate::sampler::{holdout_one_per_class, split_classes, SplitSpec};
use crate::seed::{derive_seed, rng_for, stage};
use crate::siamese::{Architecture, SiameseModel};
use crate::spectra::{ClassId, Dataset, Spectrum};
use crate::trainer::{train_classifier, train_siamese, Observer, TrainConfig, ValidationPairs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true instances.
    pub support: usize,
}

/// Per-class precision, recall and F1 over the union of true and predicted
/// labels. A ratio with a zero denominator counts as 0.
pub fn per_class(predictions: &[ClassId], truths: &[ClassId]) -> Result<Vec<ClassMetrics>> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    let labels: BTreeSet<ClassId> = predictions.iter().chain(truths).copied().collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(labels
        .into_iter()
        .map(|c| {
            let tp = predictions.iter().zip(truths).filter(|(p, t)| **p == c && **t == c).count();
            let predicted = predictions.iter().filter(|&&p| p == c).count();
            let support = truths.iter().filter(|&&t| t == c).count();
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { class_id: c, precision, recall, f1, support }
        })
        .collect())
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(predictions: &[ClassId], truths: &[ClassId]) -> Result<f64> {
    let pc = per_class(predictions, truths)?;
    if pc.is_empty() {
        return Ok(0.0);
    }
    Ok(pc.iter().map(|m| m.f1).sum::<f64>() / pc.len() as f64)
}

pub fn accuracy(predictions: &[ClassId], truths: &[ClassId]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    Ok(predictions.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / truths.len() as f64)
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Siamese,
    NnL2,
    NnCosine,
    Classifier,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Siamese => "siamese",
            Method::NnL2 => Metric::L2.name(),
            Method::NnCosine => Metric::Cosine.name(),
            Method::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    /// `(truth, predicted) -> count`.
    pub confusion: BTreeMap<(ClassId, ClassId), usize>,
}

impl RunMetrics {
    pub fn new(run: usize, seed: u64, predictions: &[ClassId], truths: &[ClassId]) -> Result<Self> {
        let mut confusion = BTreeMap::new();
        for (&p, &t) in predictions.iter().zip(truths) {
            *confusion.entry((t, p)).or_default() += 1;
        }
        Ok(Self {
            run,
            seed,
            macro_f1: macro_f1(predictions, truths)?,
            accuracy: accuracy(predictions, truths)?,
            classes: per_class(predictions, truths)?,
            confusion,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    OneShot,
    Multiclass,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OneShot => "one-shot",
            Protocol::Multiclass => "multiclass",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub runs: BTreeMap<Method, Vec<RunMetrics>>,
}

impl EvalReport {
    fn new(protocol: Protocol) -> Self {
        Self { protocol, runs: BTreeMap::new() }
    }

    fn push(&mut self, method: Method, m: RunMetrics) {
        self.runs.entry(method).or_default().push(m);
    }

    pub fn methods(&self) -> Vec<Method> {
        self.runs.keys().copied().collect()
    }

    pub fn f1_values(&self, method: Method) -> Vec<f64> {
        self.runs.get(&method).map_or_else(Vec::new, |r| r.iter().map(|m| m.macro_f1).collect())
    }

    pub fn accuracy_values(&self, method: Method) -> Vec<f64> {
        self.runs.get(&method).map_or_else(Vec::new, |r| r.iter().map(|m| m.accuracy).collect())
    }

    /// `(mean, sample std)` of macro-F1.
    pub fn f1(&self, method: Method) -> (f64, f64) {
        mean_std(&self.f1_values(method))
    }

    pub fn accuracy(&self, method: Method) -> (f64, f64) {
        mean_std(&self.accuracy_values(method))
    }

    /// Long-format CSV: `method,run,seed,class_id,metric,value`. Run-level
    /// rows leave `class_id` empty; summary rows use `run = all`.
    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = String::new();
        for line in stamp.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# protocol={} f1=macro std=sample", self.protocol.name());
        out.push_str("method,run,seed,class_id,metric,value\n");
        for (method, runs) in &self.runs {
            let name = method.name();
            for r in runs {
                let _ = writeln!(out, "{name},{},{},,macro_f1,{}", r.run, r.seed, r.macro_f1);
                let _ = writeln!(out, "{name},{},{},,accuracy,{}", r.run, r.seed, r.accuracy);
                for c in &r.classes {
                    for (metric, v) in [("precision", c.precision), ("recall", c.recall), ("f1", c.f1)] {
                        let _ = writeln!(out, "{name},{},{},{},{metric},{v}", r.run, r.seed, c.class_id);
                    }
                    let _ = writeln!(out, "{name},{},{},{},support,{}", r.run, r.seed, c.class_id, c.support);
                }
                for (&(t, p), n) in &r.confusion {
                    let _ = writeln!(out, "{name},{},{},{t},confusion_{p},{n}", r.run, r.seed);
                }
            }
            let (f1m, f1s) = self.f1(*method);
            let (am, as_) = self.accuracy(*method);
            for (metric, v) in [("macro_f1_mean", f1m), ("macro_f1_std", f1s), ("accuracy_mean", am), ("accuracy_std", as_)] {
                let _ = writeln!(out, "{name},all,,,{metric},{v}");
            }
        }
        out
    }

    /// Human-readable table of mean and standard deviation per method.
    pub fn summary(&self) -> String {
        let mut out = format!("protocol: {}\n{:<12} {:>7} {:>17} {:>17}\n", self.protocol.name(), "method", "runs", "macro-F1", "accuracy");
        for (method, runs) in &self.runs {
            let (fm, fs) = self.f1(*method);
            let (am, as_) = self.accuracy(*method);
            let _ = writeln!(out, "{:<12} {:>7} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3}", method.name(), runs.len(), fm, fs, am, as_);
        }
        out
    }
}

/// Settings shared by both protocols.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub repeats: usize,
    pub seed: u64,
    /// Train and score the Siamese model (baselines are always scored in
    /// the one-shot protocol).
    pub with_siamese: bool,
    /// One-shot class split.
    pub split: (f64, f64, f64),
    /// One-shot control: use the references themselves as queries.
    pub queries_are_references: bool,
    /// Nearest references voting in the Siamese prediction.
    pub k: usize,
}

impl EvalConfig {
    pub fn new(arch: Architecture, train: TrainConfig) -> Self {
        Self {
            arch,
            train,
            repeats: 5,
            seed: 0,
            with_siamese: true,
            split: (0.5, 0.1, 0.4),
            queries_are_references: false,
            k: 1,
        }
    }

    fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, &[stage::REPEAT, run as u64])
    }
}

/// Sample ids that a run used in each role, for leakage checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRoles {
    pub references: Vec<String>,
    pub queries: Vec<String>,
    pub train_classes: BTreeSet<ClassId>,
    pub test_classes: BTreeSet<ClassId>,
}

/// Receives protocol-level events in addition to training events.
pub trait EvalObserver: Observer {
    fn on_run(&mut self, _run: usize, _roles: &RunRoles) {}
}

impl EvalObserver for crate::trainer::NoObserver {}

fn siamese_predictions(model: &SiameseModel<f32>, db: &ReferenceDb, queries: &[&Spectrum], k: usize) -> Result<Vec<ClassId>> {
    let feats = model.embed_spectra(queries)?;
    feats.iter().map(|f| Ok(db.match_features(f, model, k)?.predicted)).collect()
}

fn baseline_predictions(refs: &[&Spectrum], queries: &[&Spectrum], metric: Metric) -> Result<Vec<ClassId>> {
    let raw: Vec<(ClassId, &[f32])> = refs.iter().map(|s| (s.class_id, s.intensities.as_slice())).collect();
    queries.iter().map(|q| Ok(match_raw(&raw, &q.intensities, metric)?.predicted)).collect()
}

pub fn run_one_shot(ds: &Dataset, cfg: &EvalConfig, obs: &mut dyn EvalObserver) -> Result<EvalReport> {
    let mut report = EvalReport::new(Protocol::OneShot);
    let (ftr, fva, fte) = cfg.split;
    for run in 0..cfg.repeats {
        let seed = cfg.run_seed(run);
        let split = split_classes(&ds.class_ids(), &SplitSpec::new(ftr, fva, fte, seed)?)?;
        let test = ds.restrict_to(&split.test);
        let mut refs: Vec<&Spectrum> = Vec::new();
        let mut queries: Vec<&Spectrum> = Vec::new();
        for (&class, members) in test.class_index() {
            let pick = rng_for(seed, &[stage::REFERENCE, u64::from(class)]).random_range(0..members.len());
            refs.push(test.get(members[pick]));
            if cfg.queries_are_references {
                queries.push(test.get(members[pick]));
            } else {
                queries.extend(members.iter().enumerate().filter(|&(i, _)| i != pick).map(|(_, &m)| test.get(m)));
            }
        }
        if queries.is_empty() {
            return Err(Error::InvalidConfig("test classes have no samples besides their references".into()));
        }
        let roles = RunRoles {
            references: refs.iter().map(|s| s.sample_id.clone()).collect(),
            queries: queries.iter().map(|s| s.sample_id.clone()).collect(),
            train_classes: split.train.clone(),
            test_classes: split.test.clone(),
        };
        obs.on_run(run, &roles);
        let truths: Vec<ClassId> = queries.iter().map(|s| s.class_id).collect();
        if cfg.with_siamese {
            let train = ds.restrict_to(&split.train);
            let val = ValidationPairs::from_classes(&ds.restrict_to(&split.val), cfg.train.val_pairs, seed)?;
            let tcfg = TrainConfig { seed, ..cfg.train.clone() };
            let (model, _) = train_siamese(&train, &val, &cfg.arch, &tcfg, obs)?;
            let mut db = ReferenceDb::new(&model);
            db.add_all(&refs, &model)?;
            let pred = siamese_predictions(&model, &db, &queries, cfg.k)?;
            report.push(Method::Siamese, RunMetrics::new(run, seed, &pred, &truths)?);
        }
        for (method, metric) in [(Method::NnL2, Metric::L2), (Method::NnCosine, Metric::Cosine)] {
            let pred = baseline_predictions(&refs, &queries, metric)?;
            report.push(method, RunMetrics::new(run, seed, &pred, &truths)?);
        }
        log::info!("one-shot run {run}: {}", report.summary().lines().skip(2).collect::<Vec<_>>().join(" | "));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MulticlassMode {
    Siamese,
    Classifier,
}

pub fn run_multiclass(ds: &Dataset, cfg: &EvalConfig, mode: MulticlassMode, obs: &mut dyn EvalObserver) -> Result<EvalReport> {
    let mut report = EvalReport::new(Protocol::Multiclass);
    for run in 0..cfg.repeats {
        let seed = cfg.run_seed(run);
        let (test_idx, rest_idx) = holdout_one_per_class(ds, seed);
        if test_idx.is_empty() {
            return Err(Error::InvalidConfig("no class has two or more samples".into()));
        }
        let rest = ds.select(&rest_idx);
        let (val_idx, train_idx) = holdout_one_per_class(&rest, derive_seed(seed, &[stage::VALIDATION]));
        let train = rest.select(&train_idx);
        let queries: Vec<&Spectrum> = test_idx.iter().map(|&i| ds.get(i)).collect();
        let truths: Vec<ClassId> = queries.iter().map(|s| s.class_id).collect();
        let roles = RunRoles {
            references: rest.spectra().iter().map(|s| s.sample_id.clone()).collect(),
            queries: queries.iter().map(|s| s.sample_id.clone()).collect(),
            train_classes: train.class_ids().into_iter().collect(),
            test_classes: truths.iter().copied().collect(),
        };
        obs.on_run(run, &roles);
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let (method, pred) = match mode {
            MulticlassMode::Siamese => {
                let val = ValidationPairs::anchored(&rest, &val_idx, &train_idx, cfg.train.val_pairs, seed)?;
                let (model, _) = train_siamese(&train, &val, &cfg.arch, &tcfg, obs)?;
                let mut db = ReferenceDb::new(&model);
                let refs: Vec<&Spectrum> = rest.spectra().iter().collect();
                db.add_all(&refs, &model)?;
                (Method::Siamese, siamese_predictions(&model, &db, &queries, cfg.k)?)
            }
            MulticlassMode::Classifier => {
                let val = rest.select(&val_idx);
                let (model, _) = train_classifier(&train, &val, &cfg.arch, &tcfg, obs)?;
                (Method::Classifier, model.predict_spectra(&queries)?)
            }
        };
        report.push(method, RunMetrics::new(run, seed, &pred, &truths)?);
        log::info!("multiclass run {run}: {}", report.summary().lines().skip(2).collect::<Vec<_>>().join(" | "));
    }
    Ok(report)
}
