use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{normalize_minmax, ClassId, Dataset, Grid, Spectrum};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stage};

/// Parameters for a synthetic stand-in for a mineral library: each class is a
/// fixed set of Gaussian peaks, each sample adds a random polynomial baseline
/// and white noise, then the sum is min-max normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Inclusive range for the number of peaks per class.
    pub peak_count_range: (usize, usize),
    /// Peak standard deviation range as a fraction of the grid length.
    pub peak_width_range: (f64, f64),
    /// Polynomial degree of the per-sample baseline; `None` disables it.
    pub baseline_degree: Option<usize>,
    /// Baseline peak-to-peak range relative to the tallest peak (1.0).
    pub baseline_amplitude: f64,
    /// Noise standard deviation relative to the tallest peak.
    pub noise_sigma: f64,
    /// Confine each class's peaks to its own band of the grid.
    pub disjoint_peaks: bool,
    pub grid: Grid,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 5,
            peak_count_range: (3, 6),
            peak_width_range: (0.002, 0.01),
            baseline_degree: Some(3),
            baseline_amplitude: 3.0,
            noise_sigma: 0.02,
            disjoint_peaks: false,
            grid: Grid { start: 150.0, end: 1200.0, len: super::DEFAULT_GRID_LEN },
            seed: 0,
        }
    }
}

struct Peak {
    center: f64,
    sigma: f64,
    height: f64,
}

fn class_peaks(cfg: &SynthConfig, class: usize) -> Vec<Peak> {
    let mut rng = rng_for(cfg.seed, &[stage::SYNTH, 0, class as u64]);
    let len = cfg.grid.len as f64;
    let (lo_n, hi_n) = cfg.peak_count_range;
    let n = rng.random_range(lo_n..=hi_n);
    let (band_lo, band_hi) = if cfg.disjoint_peaks {
        let w = 0.9 * len / cfg.n_classes as f64;
        let lo = 0.05 * len + class as f64 * w;
        (lo + 0.15 * w, lo + 0.85 * w)
    } else {
        (0.05 * len, 0.95 * len)
    };
    (0..n)
        .map(|k| Peak {
            center: rng.random_range(band_lo..band_hi),
            sigma: len * rng.random_range(cfg.peak_width_range.0..=cfg.peak_width_range.1),
            // the first peak is the tallest so every class has a unit-height peak
            height: if k == 0 { 1.0 } else { rng.random_range(0.2..1.0) },
        })
        .collect()
}

fn baseline<R: Rng>(rng: &mut R, degree: usize, amplitude: f64, len: usize) -> Vec<f64> {
    let coeffs: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let u = 2.0 * i as f64 / (len - 1) as f64 - 1.0;
            coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let offset = rng.random_range(0.0..amplitude.max(f64::MIN_POSITIVE));
    if hi - lo <= 0.0 {
        return vec![offset; len];
    }
    let range = amplitude * rng.random_range(0.5..1.5);
    raw.iter().map(|x| offset + range * (x - lo) / (hi - lo)).collect()
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_classes < 2 {
        return Err(Error::TooFewClasses { needed: 2, got: cfg.n_classes });
    }
    if cfg.samples_per_class < 1 {
        return Err(Error::InvalidConfig("samples_per_class must be >= 1".into()));
    }
    let (lo, hi) = cfg.peak_count_range;
    if lo < 1 || lo > hi {
        return Err(Error::InvalidConfig(format!("bad peak count range ({lo}, {hi})")));
    }
    let len = cfg.grid.len;
    let mut spectra = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for class in 0..cfg.n_classes {
        let peaks = class_peaks(cfg, class);
        let clean: Vec<f64> = (0..len)
            .map(|i| {
                let x = i as f64;
                peaks
                    .iter()
                    .map(|p| p.height * (-0.5 * ((x - p.center) / p.sigma).powi(2)).exp())
                    .sum()
            })
            .collect();
        for sample in 0..cfg.samples_per_class {
            let mut rng = rng_for(cfg.seed, &[stage::SYNTH, 1, class as u64, sample as u64]);
            let mut y = clean.clone();
            if let Some(deg) = cfg.baseline_degree {
                for (v, b) in y.iter_mut().zip(baseline(&mut rng, deg, cfg.baseline_amplitude, len)) {
                    *v += b;
                }
            }
            if cfg.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            spectra.push(Spectrum {
                intensities: normalize_minmax(&y)?.into_iter().map(|v| v as f32).collect(),
                class_id: class as ClassId,
                sample_id: format!("c{class:04}_s{sample:03}"),
                grid: cfg.grid,
            });
        }
    }
    Dataset::new(spectra)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_classes: 2,
            samples_per_class: 3,
            peak_count_range: (3, 6),
            baseline_degree: Some(3),
            grid: Grid::new(0.0, 1.0, 128).unwrap(),
            seed: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn cardinality() {
        let ds = synth_dataset(&small()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_classes(), 2);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(&small()).unwrap(), synth_dataset(&small()).unwrap());
        let other = SynthConfig { seed: 2, ..small() };
        assert_ne!(synth_dataset(&small()).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn constant_baseline_without_noise_gives_identical_samples() {
        let cfg = SynthConfig { baseline_degree: Some(0), noise_sigma: 0.0, ..small() };
        let ds = synth_dataset(&cfg).unwrap();
        for idx in ds.class_index().values() {
            for &i in idx {
                let (a, b) = (&ds.get(i).intensities, &ds.get(idx[0]).intensities);
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn normalized_and_finite() {
        let ds = synth_dataset(&small()).unwrap();
        for s in ds.spectra() {
            let lo = s.intensities.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = s.intensities.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn clean_data_nearest_neighbour_is_same_class() {
        let cfg = SynthConfig {
            n_classes: 8,
            samples_per_class: 3,
            baseline_degree: None,
            noise_sigma: 0.0,
            ..small()
        };
        let ds = synth_dataset(&cfg).unwrap();
        for (i, q) in ds.spectra().iter().enumerate() {
            let nn = (0..ds.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| -> f32 {
                        ds.get(j).intensities.iter().zip(&q.intensities).map(|(x, y)| (x - y).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(ds.get(nn).class_id, q.class_id);
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_dataset(&SynthConfig { n_classes: 1, ..small() }).is_err());
    }
}
