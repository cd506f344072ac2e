//! Pair generation with bootstrap balancing, and dataset splits.
//!
//! A dataset of N classes with M samples each has M(M-1)N/2 positive and
//! M^2 N(N-1)/2 negative pairs. Each epoch draws S_m positives and S_m
//! negatives with replacement, where S_m is the number of available
//! positive pairs, so the rare positives are seen about once per epoch
//! while the negatives are subsampled.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{rng_for, stage};
use crate::spectra::{ClassId, Dataset};

/// `(positives, negatives)` for `n` classes of `m` samples each.
pub fn pair_counts(n: u64, m: u64) -> (u64, u64) {
    (m * m.saturating_sub(1) * n / 2, m * m * n * n.saturating_sub(1) / 2)
}

/// Two dataset indices and whether they share a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

impl IndexPair {
    pub fn label(&self) -> f64 {
        if self.same {
            1.0
        } else {
            0.0
        }
    }
}

/// Pair populations of a dataset and the per-epoch draw size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapPlan {
    pub s_m: u64,
    pub s_n: u64,
    /// Positives (and, separately, negatives) drawn per epoch.
    pub per_epoch: u64,
    pub seed: u64,
}

impl BootstrapPlan {
    pub fn new(ds: &Dataset, seed: u64) -> Self {
        let sizes: Vec<u64> = ds.class_index().values().map(|v| v.len() as u64).collect();
        let s_m: u64 = sizes.iter().map(|&n| n * n.saturating_sub(1) / 2).sum();
        let total: u64 = sizes.iter().sum();
        let s_n = (total * total - sizes.iter().map(|n| n * n).sum::<u64>()) / 2;
        if s_m > s_n {
            log::warn!("more positive pairs ({s_m}) than negative pairs ({s_n})");
        }
        Self { s_m, s_n, per_epoch: s_m, seed }
    }

    pub fn with_per_epoch(self, per_epoch: u64) -> Self {
        Self { per_epoch, ..self }
    }

    pub fn pairs_per_epoch(&self) -> u64 {
        2 * self.per_epoch
    }
}

/// Uniform draws from the positive and negative pair populations of a
/// dataset.
struct PairDrawer<'a> {
    ds: &'a Dataset,
    classes: Vec<&'a [usize]>,
    /// Cumulative positive-pair counts per class.
    cum_pos: Vec<u64>,
}

impl<'a> PairDrawer<'a> {
    fn new(ds: &'a Dataset) -> Result<Self> {
        if ds.n_classes() < 2 {
            return Err(Error::TooFewClasses { needed: 2, got: ds.n_classes() });
        }
        let classes: Vec<&[usize]> = ds.class_index().values().map(Vec::as_slice).collect();
        let mut acc = 0u64;
        let cum_pos = classes
            .iter()
            .map(|c| {
                let n = c.len() as u64;
                acc += n * n.saturating_sub(1) / 2;
                acc
            })
            .collect();
        if acc == 0 {
            return Err(Error::NoPositivePairs);
        }
        Ok(Self { ds, classes, cum_pos })
    }

    fn positive<R: Rng>(&self, rng: &mut R) -> IndexPair {
        let total = *self.cum_pos.last().unwrap();
        let u = rng.random_range(0..total);
        let c = self.cum_pos.partition_point(|&x| x <= u);
        let members = self.classes[c];
        let i = rng.random_range(0..members.len());
        let mut j = rng.random_range(0..members.len() - 1);
        if j >= i {
            j += 1;
        }
        IndexPair { a: members[i], b: members[j], same: true }
    }

    /// Rejection sampling over ordered sample pairs; exactly uniform over
    /// the negative population whatever the class sizes.
    fn negative<R: Rng>(&self, rng: &mut R) -> IndexPair {
        let n = self.ds.len();
        loop {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if self.ds.get(a).class_id != self.ds.get(b).class_id {
                return IndexPair { a, b, same: false };
            }
        }
    }

    fn balanced<R: Rng>(&self, per_label: u64, rng: &mut R) -> Vec<IndexPair> {
        let mut pairs = Vec::with_capacity(2 * per_label as usize);
        for _ in 0..per_label {
            pairs.push(self.positive(rng));
        }
        for _ in 0..per_label {
            pairs.push(self.negative(rng));
        }
        pairs.shuffle(rng);
        pairs
    }
}

/// The shuffled, balanced pairs of one epoch; a pure function of
/// `(dataset, plan, epoch)`.
pub fn sample_epoch(ds: &Dataset, plan: &BootstrapPlan, epoch: u64) -> Result<Vec<IndexPair>> {
    let drawer = PairDrawer::new(ds)?;
    let mut rng = rng_for(plan.seed, &[stage::EPOCH, epoch]);
    Ok(drawer.balanced(plan.per_epoch, &mut rng))
}

/// `n_pairs` balanced pairs drawn with replacement (`n_pairs / 2` of each
/// label, rounded down).
pub fn balanced_pairs(ds: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<IndexPair>> {
    let drawer = PairDrawer::new(ds)?;
    let mut rng = rng_for(seed, &[stage::VALIDATION]);
    Ok(drawer.balanced(n_pairs as u64 / 2, &mut rng))
}

/// Balanced pairs whose first element is an anchor and whose second is a
/// partner. Used to validate on held-out samples of classes that also
/// appear in training: anchors never mix with each other.
pub fn anchored_pairs(ds: &Dataset, anchors: &[usize], partners: &[usize], n_pairs: usize, seed: u64) -> Result<Vec<IndexPair>> {
    let class_of = |i: usize| ds.get(i).class_id;
    let pos_anchors: Vec<usize> =
        anchors.iter().copied().filter(|&a| partners.iter().any(|&p| class_of(p) == class_of(a))).collect();
    if pos_anchors.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    let partner_classes: BTreeSet<ClassId> = partners.iter().map(|&p| class_of(p)).collect();
    if anchors.iter().all(|&a| partner_classes.iter().all(|&c| c == class_of(a))) {
        return Err(Error::TooFewClasses { needed: 2, got: partner_classes.len() });
    }
    let mut rng = rng_for(seed, &[stage::VALIDATION, 1]);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs / 2 {
        let a = pos_anchors[rng.random_range(0..pos_anchors.len())];
        let same: Vec<usize> = partners.iter().copied().filter(|&p| class_of(p) == class_of(a)).collect();
        pairs.push(IndexPair { a, b: same[rng.random_range(0..same.len())], same: true });
    }
    let mut negatives = 0;
    while negatives < n_pairs / 2 {
        let a = anchors[rng.random_range(0..anchors.len())];
        let b = partners[rng.random_range(0..partners.len())];
        if class_of(a) != class_of(b) {
            pairs.push(IndexPair { a, b, same: false });
            negatives += 1;
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Class fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let ok = [train, val, test].iter().all(|f| (0.0..=1.0).contains(f)) && (train + val + test - 1.0).abs() < 1e-9;
        if !ok {
            return Err(Error::InvalidConfig(format!("split fractions {train}/{val}/{test} must be in [0,1] and sum to 1")));
        }
        Ok(Self { train, val, test, seed })
    }

    pub fn paper(seed: u64) -> Self {
        Self { train: 0.5, val: 0.1, test: 0.4, seed }
    }

    /// Split sizes for `n` classes: train rounds, validation floors and
    /// test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).floor() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: BTreeSet<ClassId>,
    pub val: BTreeSet<ClassId>,
    pub test: BTreeSet<ClassId>,
}

pub fn split_classes(class_ids: &[ClassId], spec: &SplitSpec) -> Result<ClassSplit> {
    let mut ids: Vec<ClassId> = class_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 3 {
        return Err(Error::TooFewClasses { needed: 3, got: ids.len() });
    }
    let (n_train, n_val, _) = spec.sizes(ids.len());
    ids.shuffle(&mut rng_for(spec.seed, &[stage::SPLIT]));
    Ok(ClassSplit {
        train: ids[..n_train].iter().copied().collect(),
        val: ids[n_train..n_train + n_val].iter().copied().collect(),
        test: ids[n_train + n_val..].iter().copied().collect(),
    })
}

/// One random sample per class with at least two samples goes to the
/// first list, everything else to the second. Both lists are ascending.
pub fn holdout_one_per_class(ds: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut test = Vec::new();
    for (&class, members) in ds.class_index() {
        if members.len() < 2 {
            log::warn!("class {class} has a single sample; kept out of the held-out set");
            continue;
        }
        let mut rng = rng_for(seed, &[stage::HOLDOUT, u64::from(class)]);
        test.push(members[rng.random_range(0..members.len())]);
    }
    test.sort_unstable();
    let rest = (0..ds.len()).filter(|i| test.binary_search(i).is_err()).collect();
    (test, rest)
}
