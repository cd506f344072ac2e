//! Training loops for the Siamese model and the softmax classifier: Adam,
//! step-halving learning rate, per-epoch validation and early stopping that
//! returns the best parameters seen.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model_file::{self, SavedModel};
use crate::nn::Adam;
use crate::sampler::{anchored_pairs, balanced_pairs, sample_epoch, BootstrapPlan, IndexPair};
use crate::seed::{rng_for, stage};
use crate::siamese::{bce_with_logits, softmax, Architecture, ClassifierModel, SiameseModel};
use crate::spectra::{augment_with, AugmentPolicy, Dataset, Spectrum};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate halvings; `None` keeps it constant.
    pub lr_halving_period: Option<usize>,
    /// Pairs per step for the Siamese model, samples per step for the
    /// classifier.
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: Option<AugmentPolicy>,
    pub bias_enabled: bool,
    /// Size of the fixed validation pair set.
    pub val_pairs: usize,
    /// Written with the best model every time validation improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 1e-3,
            lr_halving_period: Some(10),
            batch_size: 64,
            patience: 5,
            seed: 0,
            augment: None,
            bias_enabled: true,
            val_pairs: 2000,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be > 0");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.lr_halving_period == Some(0) {
            return bad("lr_halving_period must be >= 1");
        }
        if self.val_pairs < 2 {
            return bad("val_pairs must be >= 2");
        }
        Ok(())
    }
}

/// `base_lr * 0.5^floor(epoch / period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.lr_halving_period {
        Some(p) => cfg.base_lr * 0.5f64.powi((epoch / p) as i32),
        None => cfg.base_lr,
    }
}

/// Instrumentation points. Every method defaults to a no-op.
pub trait Observer {
    /// Sample ids entering one gradient step.
    fn on_batch(&mut self, _sample_ids: &[&str]) {}
    /// Sample ids evaluated for validation loss.
    fn on_validation(&mut self, _sample_ids: &[&str]) {}
    /// Learning rate used by one optimizer step.
    fn on_step(&mut self, _epoch: usize, _lr: f64) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Last epoch that ran.
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    /// `epoch,train_loss,val_loss,lr` preceded by `#` comment lines. The
    /// wall-clock time is left out so reports of identical runs are
    /// byte-identical.
    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = String::new();
        for line in stamp.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# best_epoch={} early_stopped={}", self.best_epoch, self.early_stopped);
        out.push_str("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        out
    }
}

/// A fixed set of labelled pairs over its own dataset.
#[derive(Debug, Clone)]
pub struct ValidationPairs {
    pub data: Dataset,
    pub pairs: Vec<IndexPair>,
}

impl ValidationPairs {
    /// Balanced pairs among the samples of `val`, typically classes disjoint
    /// from training.
    pub fn from_classes(val: &Dataset, n_pairs: usize, seed: u64) -> Result<Self> {
        Ok(Self { pairs: balanced_pairs(val, n_pairs, seed)?, data: val.clone() })
    }

    /// Pairs of one held-out anchor and one partner sample from `ds`.
    pub fn anchored(ds: &Dataset, anchors: &[usize], partners: &[usize], n_pairs: usize, seed: u64) -> Result<Self> {
        Ok(Self { pairs: anchored_pairs(ds, anchors, partners, n_pairs, seed)?, data: ds.clone() })
    }

    /// Dataset indices referenced by any pair, ascending.
    pub fn used_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.pairs.iter().flat_map(|p| [p.a, p.b]).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Mean eval-mode BCE of `model` over the validation pairs. Each sample is
/// embedded once.
pub fn validation_loss(model: &SiameseModel<f32>, val: &ValidationPairs, obs: &mut dyn Observer) -> Result<f64> {
    let used = val.used_indices();
    let spectra: Vec<&Spectrum> = used.iter().map(|&i| val.data.get(i)).collect();
    obs.on_validation(&spectra.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>());
    let feats = model.embed_spectra(&spectra)?;
    let pos = |i: usize| used.binary_search(&i).unwrap();
    let total: f64 = val
        .pairs
        .iter()
        .map(|p| bce_with_logits(f64::from(model.logit(&feats[pos(p.a)], &feats[pos(p.b)])), p.label()))
        .sum();
    Ok(total / val.pairs.len() as f64)
}

fn maybe_augment<'a>(s: &'a Spectrum, policy: Option<&AugmentPolicy>, rng: &mut impl rand::Rng) -> Cow<'a, [f32]> {
    match policy {
        Some(p) => {
            let pert = p.draw(rng);
            Cow::Owned(augment_with(s, &pert, rng).intensities)
        }
        None => Cow::Borrowed(&s.intensities),
    }
}

struct EarlyStop<M> {
    best: Option<(f64, usize, M)>,
    patience: usize,
    wait: usize,
}

impl<M: Clone> EarlyStop<M> {
    fn new(patience: usize) -> Self {
        Self { best: None, patience, wait: 0 }
    }

    /// Records an epoch; returns whether it improved and whether to stop.
    fn update(&mut self, epoch: usize, val_loss: f64, model: &M) -> (bool, bool) {
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            self.best = Some((val_loss, epoch, model.clone()));
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        (improved, self.wait >= self.patience)
    }
}

fn finish<M>(
    stop: EarlyStop<M>,
    initial_val_loss: f64,
    epochs: Vec<EpochRecord>,
    early_stopped: bool,
    start: Instant,
) -> (M, TrainReport) {
    let (_, best_epoch, model) = stop.best.expect("at least one epoch ran");
    let stopped_epoch = epochs.last().map_or(0, |r| r.epoch);
    let report = TrainReport {
        initial_val_loss,
        epochs,
        best_epoch,
        stopped_epoch,
        early_stopped,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    (model, report)
}

/// Trains on balanced bootstrap pairs of `train`, validating on `val`
/// after every epoch, and returns the best-validation parameters.
pub fn train_siamese(
    train: &Dataset,
    val: &ValidationPairs,
    arch: &Architecture,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<(SiameseModel<f32>, TrainReport)> {
    cfg.validate()?;
    let grid = train.grid().ok_or(Error::EmptyDb)?;
    if val.pairs.is_empty() {
        return Err(Error::InvalidConfig("validation pair set is empty".into()));
    }
    let start = Instant::now();
    let mut model = SiameseModel::<f32>::new(arch, grid, cfg.bias_enabled, cfg.seed)?;
    let plan = BootstrapPlan::new(train, cfg.seed);
    let mut adam = Adam::<f32>::new(cfg.base_lr);
    let initial_val_loss = validation_loss(&model, val, obs)?;
    let mut stop = EarlyStop::new(cfg.patience);
    let mut records = Vec::new();
    let mut early_stopped = false;
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at(epoch, cfg);
        let pairs = sample_epoch(train, &plan, epoch as u64)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng_for(cfg.seed, &[stage::AUGMENT, epoch as u64, bi as u64]);
            let policy = cfg.augment.as_ref();
            let mut a_rows = Vec::with_capacity(batch.len());
            let mut b_rows = Vec::with_capacity(batch.len());
            let mut ids = Vec::with_capacity(2 * batch.len());
            for p in batch {
                let (sa, sb) = (train.get(p.a), train.get(p.b));
                a_rows.push(maybe_augment(sa, policy, &mut rng));
                b_rows.push(maybe_augment(sb, policy, &mut rng));
                ids.push(sa.sample_id.as_str());
                ids.push(sb.sample_id.as_str());
            }
            obs.on_batch(&ids);
            obs.on_step(epoch, adam.lr);
            let a: Vec<&[f32]> = a_rows.iter().map(|r| r.as_ref()).collect();
            let b: Vec<&[f32]> = b_rows.iter().map(|r| r.as_ref()).collect();
            let labels: Vec<f64> = batch.iter().map(IndexPair::label).collect();
            let (loss, grads) = model.pair_loss_grad(&a, &b, &labels)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_loss = validation_loss(&model, val, obs)?;
        records.push(EpochRecord { epoch, train_loss: loss_sum / pairs.len() as f64, val_loss, lr: adam.lr });
        log::info!("epoch {epoch}: train {:.4} val {val_loss:.4} lr {:e}", loss_sum / pairs.len() as f64, adam.lr);
        let (improved, halt) = stop.update(epoch, val_loss, &model);
        if improved {
            if let Some(path) = &cfg.checkpoint {
                model_file::save(&SavedModel::Siamese(model.clone()), "checkpoint", path)?;
            }
        }
        if halt && epoch + 1 < cfg.epochs {
            early_stopped = true;
            break;
        }
    }
    Ok(finish(stop, initial_val_loss, records, early_stopped, start))
}

fn classifier_loss(model: &ClassifierModel<f32>, val: &Dataset, obs: &mut dyn Observer) -> Result<(f64, f64)> {
    let spectra: Vec<&Spectrum> = val.spectra().iter().collect();
    obs.on_validation(&spectra.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>());
    let rows: Vec<&[f32]> = spectra.iter().map(|s| s.intensities.as_slice()).collect();
    let logits = model.logits_rows(&rows)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, l) in spectra.iter().zip(&logits) {
        let t = model.head_index(s.class_id).ok_or(Error::UnknownClass(s.class_id))?;
        let p = softmax(l);
        loss -= p[t].max(f64::MIN_POSITIVE).ln();
        let arg = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b });
        correct += usize::from(arg == t);
    }
    let n = spectra.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains the softmax classifier on every sample of `train` (shuffled each
/// epoch) with cross-entropy, validating on the samples of `val`.
pub fn train_classifier(
    train: &Dataset,
    val: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<(ClassifierModel<f32>, TrainReport)> {
    cfg.validate()?;
    let grid = train.grid().ok_or(Error::EmptyDb)?;
    if val.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let start = Instant::now();
    let mut model = ClassifierModel::<f32>::new(arch, train.class_ids(), grid, cfg.seed)?;
    let targets: Vec<usize> = train.spectra().iter().map(|s| model.head_index(s.class_id).unwrap()).collect();
    let mut adam = Adam::<f32>::new(cfg.base_lr);
    let initial_val_loss = classifier_loss(&model, val, obs)?.0;
    let mut stop = EarlyStop::new(cfg.patience);
    let mut records = Vec::new();
    let mut early_stopped = false;
    for epoch in 0..cfg.epochs {
        adam.lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stage::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng_for(cfg.seed, &[stage::AUGMENT, epoch as u64, bi as u64]);
            let rows_owned: Vec<Cow<[f32]>> =
                batch.iter().map(|&i| maybe_augment(train.get(i), cfg.augment.as_ref(), &mut rng)).collect();
            let ids: Vec<&str> = batch.iter().map(|&i| train.get(i).sample_id.as_str()).collect();
            obs.on_batch(&ids);
            obs.on_step(epoch, adam.lr);
            let rows: Vec<&[f32]> = rows_owned.iter().map(|r| r.as_ref()).collect();
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = model.loss_grad(&rows, &t)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, acc) = classifier_loss(&model, val, obs)?;
        records.push(EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_loss, lr: adam.lr });
        log::info!("epoch {epoch}: train {:.4} val {val_loss:.4} acc {acc:.3}", loss_sum / train.len() as f64);
        let (improved, halt) = stop.update(epoch, val_loss, &model);
        if improved {
            if let Some(path) = &cfg.checkpoint {
                model_file::save(&SavedModel::Classifier(model.clone()), "checkpoint", path)?;
            }
        }
        if halt && epoch + 1 < cfg.epochs {
            early_stopped = true;
            break;
        }
    }
    Ok(finish(stop, initial_val_loss, records, early_stopped, start))
}

/// Fraction of `ds` the classifier labels correctly.
pub fn classifier_accuracy(model: &ClassifierModel<f32>, ds: &Dataset) -> Result<f64> {
    let spectra: Vec<&Spectrum> = ds.spectra().iter().collect();
    let pred = model.predict_spectra(&spectra)?;
    let hits = pred.iter().zip(&spectra).filter(|(p, s)| **p == s.class_id).count();
    Ok(hits as f64 / spectra.len().max(1) as f64)
}
