//! Reference database and nearest-reference classification.
//!
//! References are embedded once when added; matching a query costs one twin
//! forward pass plus D-dimensional arithmetic per reference. A class scores
//! the best similarity among its references. Rankings order by score,
//! highest first, with ties going to the smaller class id.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model_file::snapshot_id;
use crate::siamese::{logistic, SiameseModel};
use crate::spectra::{ClassId, Grid, Spectrum};

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub features: Vec<f32>,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDb {
    snapshot: u32,
    feature_len: usize,
    grid: Grid,
    entries: BTreeMap<ClassId, Vec<DbEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub class_id: ClassId,
    /// Similarity in (0, 1) for the learned metric; for baselines, the
    /// metric's own score (higher is better).
    pub score: f64,
    /// Quantity the ranking sorts on: the pre-sigmoid value for the learned
    /// metric, the score itself for baselines.
    pub key: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub ranking: Vec<Ranked>,
    pub predicted: ClassId,
}

impl MatchResult {
    pub fn top(&self, n: usize) -> &[Ranked] {
        &self.ranking[..n.min(self.ranking.len())]
    }
}

fn by_key_then_class(a: &(ClassId, f64), b: &(ClassId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Builds the result from one `(class, key)` per reference, in a stable
/// reference order. `score` maps a key to the reported score.
fn rank(per_ref: &[(ClassId, f64)], k: usize, score: impl Fn(f64) -> f64) -> Result<MatchResult> {
    if per_ref.is_empty() {
        return Err(Error::EmptyDb);
    }
    let mut best: BTreeMap<ClassId, f64> = BTreeMap::new();
    for &(c, key) in per_ref {
        let e = best.entry(c).or_insert(f64::NEG_INFINITY);
        if key > *e {
            *e = key;
        }
    }
    let mut classes: Vec<(ClassId, f64)> = best.into_iter().collect();
    classes.sort_by(by_key_then_class);
    let ranking: Vec<Ranked> = classes.iter().map(|&(c, key)| Ranked { class_id: c, score: score(key), key }).collect();
    let predicted = if k <= 1 {
        ranking[0].class_id
    } else {
        let mut refs = per_ref.to_vec();
        refs.sort_by(by_key_then_class);
        let mut votes: HashMap<ClassId, usize> = HashMap::new();
        for &(c, _) in refs.iter().take(k) {
            *votes.entry(c).or_default() += 1;
        }
        let most = *votes.values().max().unwrap();
        // ranking is ordered by best score, so the first tied class wins
        ranking.iter().find(|r| votes.get(&r.class_id) == Some(&most)).unwrap().class_id
    };
    Ok(MatchResult { ranking, predicted })
}

impl ReferenceDb {
    pub fn new(model: &SiameseModel<f32>) -> Self {
        Self::empty(snapshot_id(model), model.feature_len(), model.grid())
    }

    pub fn empty(snapshot: u32, feature_len: usize, grid: Grid) -> Self {
        Self { snapshot, feature_len, grid, entries: BTreeMap::new() }
    }

    pub fn snapshot_id(&self) -> u32 {
        self.snapshot
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Number of stored references.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self, class: ClassId) -> Option<&[DbEntry]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &DbEntry)> {
        self.entries.iter().flat_map(|(&c, v)| v.iter().map(move |e| (c, e)))
    }

    fn check_model(&self, model: &SiameseModel<f32>) -> Result<()> {
        let id = snapshot_id(model);
        if id != self.snapshot {
            return Err(Error::ModelMismatch { db: self.snapshot, model: id });
        }
        Ok(())
    }

    /// Embeds `spectrum` (one forward pass) and stores it under `class`.
    pub fn add(&mut self, class: ClassId, spectrum: &Spectrum, model: &SiameseModel<f32>) -> Result<()> {
        self.check_model(model)?;
        let features = model.embed_spectrum(spectrum)?;
        self.insert(class, features, spectrum.clone());
        Ok(())
    }

    /// Adds each spectrum under its own class id, embedding in batches.
    pub fn add_all(&mut self, spectra: &[&Spectrum], model: &SiameseModel<f32>) -> Result<()> {
        self.check_model(model)?;
        let feats = model.embed_spectra(spectra)?;
        for (s, f) in spectra.iter().zip(feats) {
            self.insert(s.class_id, f, (*s).clone());
        }
        Ok(())
    }

    fn insert(&mut self, class: ClassId, features: Vec<f32>, mut spectrum: Spectrum) {
        spectrum.class_id = class;
        self.entries.entry(class).or_default().push(DbEntry { features, spectrum });
    }

    pub fn remove(&mut self, class: ClassId) -> Result<Vec<DbEntry>> {
        self.entries.remove(&class).ok_or(Error::UnknownClass(class))
    }

    /// Ranks classes for a query given its features.
    pub fn match_features(&self, fq: &[f32], model: &SiameseModel<f32>, k: usize) -> Result<MatchResult> {
        if fq.len() != self.feature_len {
            return Err(Error::LengthMismatch(fq.len(), self.feature_len));
        }
        let per_ref: Vec<(ClassId, f64)> = self.iter().map(|(c, e)| (c, f64::from(model.logit(fq, &e.features)))).collect();
        rank(&per_ref, k, logistic)
    }

    pub fn match_one_shot(&self, query: &Spectrum, model: &SiameseModel<f32>, k: usize) -> Result<MatchResult> {
        if self.is_empty() {
            return Err(Error::EmptyDb);
        }
        self.check_model(model)?;
        self.match_features(&model.embed_spectrum(query)?, model, k)
    }

    pub fn match_baseline(&self, query: &Spectrum, metric: Metric) -> Result<MatchResult> {
        let refs: Vec<(ClassId, &[f32])> = self.iter().map(|(c, e)| (c, e.spectrum.intensities.as_slice())).collect();
        match_raw(&refs, &query.intensities, metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L2,
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::L2 => "nn_l2",
            Metric::Cosine => "nn_cosine",
        }
    }
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// Nearest-reference ranking on raw intensities. L2 scores are negated
/// distances so that higher is better for both metrics.
pub fn match_raw(refs: &[(ClassId, &[f32])], query: &[f32], metric: Metric) -> Result<MatchResult> {
    if refs.is_empty() {
        return Err(Error::EmptyDb);
    }
    let mut per_ref = Vec::with_capacity(refs.len());
    for &(c, r) in refs {
        if r.len() != query.len() {
            return Err(Error::LengthMismatch(query.len(), r.len()));
        }
        let s = match metric {
            Metric::L2 => -l2_distance(query, r),
            Metric::Cosine => cosine(query, r)?,
        };
        per_ref.push((c, s));
    }
    rank(&per_ref, 1, |s| s)
}

/// Writes `sample_id,class_id,f0..f{D-1}` rows, one per spectrum.
pub fn export_features<W: Write>(spectra: &[&Spectrum], model: &SiameseModel<f32>, mut sink: W) -> Result<()> {
    let feats = model.embed_spectra(spectra)?;
    write!(sink, "sample_id,class_id")?;
    for i in 0..model.feature_len() {
        write!(sink, ",f{i}")?;
    }
    writeln!(sink)?;
    for (s, f) in spectra.iter().zip(feats) {
        write!(sink, "{},{}", csv_field(&s.sample_id), s.class_id)?;
        for v in f {
            write!(sink, ",{v}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> Cow<'_, str> {
    if s.contains([',', '"', '\n']) {
        Cow::Owned(format!("\"{}\"", s.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(s)
    }
}

pub const MAGIC: &[u8; 4] = b"SPDB";
pub const VERSION: u32 = 1;

/// ```text
/// "SPDB" | version u32 | snapshot id u32 | stamp str | start f64 | end f64 | L u32 | D u32
/// then per entry: class_id u32 | sample_id str | D x f32 | L x f32
/// ```
pub fn encode_db(db: &ReferenceDb, stamp: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(db.snapshot);
    w.str(stamp);
    w.f64(db.grid.start);
    w.f64(db.grid.end);
    w.u32(db.grid.len as u32);
    w.u32(db.feature_len as u32);
    for (c, e) in db.iter() {
        w.u32(c);
        w.str(&e.spectrum.sample_id);
        w.f32s(&e.features);
        w.f32s(&e.spectrum.intensities);
    }
    w.into_inner()
}

pub fn decode_db(bytes: &[u8]) -> Result<(ReferenceDb, String)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SPDB version {version}")));
    }
    let snapshot = r.u32()?;
    let stamp = r.str()?;
    let start = r.f64()?;
    let end = r.f64()?;
    let grid = Grid::new(start, end, r.u32()? as usize)?;
    let d = r.u32()? as usize;
    let mut db = ReferenceDb::empty(snapshot, d, grid);
    while !r.is_at_end() {
        let class_id = r.u32()?;
        let sample_id = r.str()?;
        let features = r.f32s(d)?;
        let intensities = r.f32s(grid.len)?;
        db.insert(class_id, features, Spectrum { intensities, class_id, sample_id, grid });
    }
    Ok((db, stamp))
}

pub fn save_db(db: &ReferenceDb, stamp: &str, path: &Path) -> Result<()> {
    fs::write(path, encode_db(db, stamp))?;
    Ok(())
}

pub fn load_db(path: &Path) -> Result<(ReferenceDb, String)> {
    decode_db(&fs::read(path)?)
}
