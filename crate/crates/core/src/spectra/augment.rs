use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normalize_minmax, Spectrum};
use crate::error::{Error, Result};

/// Bounds for random training-time perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    max_shift: usize,
    noise_sigma: f64,
    scale_range: (f64, f64),
}

impl AugmentPolicy {
    /// `max_shift` in bins, `noise_sigma` as a fraction of the spectrum's
    /// maximum, `scale_range` as an inclusive multiplicative range.
    pub fn new(max_shift: usize, noise_sigma: f64, scale_range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = scale_range;
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma} must be >= 0")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        Ok(Self { max_shift, noise_sigma, scale_range })
    }

    pub fn identity() -> Self {
        Self { max_shift: 0, noise_sigma: 0.0, scale_range: (1.0, 1.0) }
    }

    pub fn max_shift(&self) -> usize {
        self.max_shift
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn scale_range(&self) -> (f64, f64) {
        self.scale_range
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Perturbation {
        let m = self.max_shift as i64;
        let shift = if m == 0 { 0 } else { rng.random_range(-m..=m) as isize };
        let (lo, hi) = self.scale_range;
        let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        Perturbation { shift, noise_sigma: self.noise_sigma, scale }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { max_shift: 16, noise_sigma: 0.02, scale_range: (0.9, 1.1) }
    }
}

/// One concrete perturbation. Positive `shift` moves intensity towards higher
/// indices; vacated bins are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub shift: isize,
    pub noise_sigma: f64,
    pub scale: f64,
}

pub fn augment(s: &Spectrum, policy: &AugmentPolicy, seed: u64) -> Spectrum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = policy.draw(&mut rng);
    augment_with(s, &p, &mut rng)
}

/// Applies shift, then scaling, then noise. Whenever the intensity scale was
/// touched (noise or scale != 1) the result is min-max normalized again.
pub fn augment_with<R: Rng>(s: &Spectrum, p: &Perturbation, rng: &mut R) -> Spectrum {
    let n = s.len() as isize;
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let src = i - p.shift;
            if (0..n).contains(&src) {
                f64::from(s.intensities[src as usize])
            } else {
                0.0
            }
        })
        .collect();
    let touched = p.noise_sigma > 0.0 || p.scale != 1.0;
    if p.scale != 1.0 {
        v.iter_mut().for_each(|x| *x *= p.scale);
    }
    if p.noise_sigma > 0.0 {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak > 0.0 {
            let normal = Normal::new(0.0, p.noise_sigma * peak).expect("sigma is finite and positive");
            v.iter_mut().for_each(|x| *x += normal.sample(rng));
        }
    }
    if touched {
        v = normalize_minmax(&v).expect("finite by construction");
    }
    Spectrum {
        intensities: v.into_iter().map(|x| x as f32).collect(),
        ..s.clone()
    }
}
