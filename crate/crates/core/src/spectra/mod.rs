//! Spectrum types, RRUFF ingestion, gridding and synthetic data.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Float;

use crate::error::{Error, Result};

mod augment;
pub mod cache;
mod rruff;
mod synth;

pub use augment::{augment, augment_with, AugmentPolicy, Perturbation};
pub use rruff::{parse_rruff, serialize_rruff};
pub use synth::{synth_dataset, SynthConfig};

pub type ClassId = u32;

/// Default number of points on the common wavenumber grid.
pub const DEFAULT_GRID_LEN: usize = 1024;

/// A spectrum as read from disk: (wavenumber, intensity) points plus headers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpectrum {
    pub points: Vec<(f64, f64)>,
    pub metadata: BTreeMap<String, String>,
}

impl RawSpectrum {
    pub fn new(points: Vec<(f64, f64)>, metadata: BTreeMap<String, String>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::EmptySpectrum);
        }
        if let Some(i) = points.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(Error::NonMonotonicGrid(i + 2));
        }
        Ok(Self { points, metadata })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }
}

/// Evenly spaced wavenumber grid, inclusive of both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub len: usize,
}

impl Grid {
    pub fn new(start: f64, end: f64, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {len}")));
        }
        if !(start.is_finite() && end.is_finite()) || start >= end {
            return Err(Error::InvalidGrid(format!("start {start} must be below end {end}")));
        }
        Ok(Self { start, end, len })
    }

    pub fn step(&self) -> f64 {
        (self.end - self.start) / (self.len - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.len {
            self.end
        } else {
            self.start + i as f64 * self.step()
        }
    }

    /// Grid over the wavenumber range shared by every spectrum.
    pub fn intersection<'a>(
        spectra: impl IntoIterator<Item = &'a RawSpectrum>,
        len: usize,
    ) -> Result<Self> {
        let (lo, hi) = spectra
            .into_iter()
            .map(RawSpectrum::span)
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), (a, b)| {
                (lo.max(a), hi.min(b))
            });
        Grid::new(lo, hi, len)
    }
}

/// A labelled, gridded, min-max normalized spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub intensities: Vec<f32>,
    pub class_id: ClassId,
    pub sample_id: String,
    pub grid: Grid,
}

impl Spectrum {
    /// Resamples `raw` onto `grid` and min-max normalizes.
    pub fn from_raw(raw: &RawSpectrum, grid: Grid, class_id: ClassId, sample_id: impl Into<String>) -> Result<Self> {
        let values = normalize_minmax(&resample(raw, grid)?)?;
        Ok(Self {
            intensities: values.into_iter().map(|v| v as f32).collect(),
            class_id,
            sample_id: sample_id.into(),
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }
}

/// Linear interpolation of `raw` at every grid point. Grid points outside the
/// raw span take the nearest endpoint value.
pub fn resample(raw: &RawSpectrum, grid: Grid) -> Result<Vec<f64>> {
    let grid = Grid::new(grid.start, grid.end, grid.len)?;
    let pts = &raw.points;
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    Ok((0..grid.len)
        .map(|i| {
            let x = grid.point(i);
            if x <= first.0 {
                return first.1;
            }
            if x >= last.0 {
                return last.1;
            }
            // first index with wavenumber > x; 1 <= hi < len
            let hi = pts.partition_point(|p| p.0 <= x);
            let (x0, y0) = pts[hi - 1];
            let (x1, y1) = pts[hi];
            let t = (x - x0) / (x1 - x0);
            y0 + t * (y1 - y0)
        })
        .collect())
}

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn normalize_minmax<T: Float>(v: &[T]) -> Result<Vec<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let (lo, hi) = v
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if v.is_empty() || range <= T::zero() {
        return Ok(vec![T::zero(); v.len()]);
    }
    Ok(v.iter().map(|&x| (x - lo) / range).collect())
}

/// An immutable collection of spectra on one grid, indexed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spectra: Vec<Spectrum>,
    class_index: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(spectra: Vec<Spectrum>) -> Result<Self> {
        if let Some(first) = spectra.first() {
            if let Some(bad) = spectra.iter().find(|s| s.len() != first.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "spectrum {} has {} points, expected {}",
                    bad.sample_id,
                    bad.len(),
                    first.len()
                )));
            }
        }
        let mut class_index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in spectra.iter().enumerate() {
            class_index.entry(s.class_id).or_default().push(i);
        }
        Ok(Self { spectra, class_index })
    }

    pub fn spectra(&self) -> &[Spectrum] {
        &self.spectra
    }

    pub fn get(&self, i: usize) -> &Spectrum {
        &self.spectra[i]
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.class_index
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.class_index.keys().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn indices_of(&self, class: ClassId) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input_len(&self) -> Option<usize> {
        self.spectra.first().map(Spectrum::len)
    }

    pub fn grid(&self) -> Option<Grid> {
        self.spectra.first().map(|s| s.grid)
    }

    /// The spectra at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.spectra[i].clone()).collect())
            .expect("subset of a valid dataset is valid")
    }

    /// All spectra whose class is in `classes`, in dataset order.
    pub fn restrict_to(&self, classes: &BTreeSet<ClassId>) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.spectra[i].class_id))
            .collect();
        self.select(&idx)
    }

    pub fn map_intensities<F>(&self, mut f: F) -> Result<Dataset>
    where
        F: FnMut(&Spectrum) -> Result<Vec<f32>>,
    {
        let spectra = self
            .spectra
            .iter()
            .map(|s| {
                Ok(Spectrum {
                    intensities: f(s)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(spectra)
    }
}
