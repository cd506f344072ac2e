//! Asymmetric least squares (AsLS) baseline estimation.
//!
//! The baseline `z` minimizes `sum_i w_i (y_i - z_i)^2 + lambda * sum_i (D2 z)_i^2`
//! with weights `w_i = p` where the signal lies above the baseline and `1 - p`
//! elsewhere. Each weighted problem is solved exactly through the normal
//! equations `(W + lambda D2'D2) z = W y`, a symmetric positive definite
//! pentadiagonal system factored by banded Cholesky in O(L).

use crate::error::{Error, Result};
use crate::spectra::{normalize_minmax, Dataset, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AslsConfig {
    pub lambda: f64,
    pub p: f64,
    pub max_iter: usize,
    /// Stop once the fraction of weights that flipped in an iteration is at
    /// most this value. Zero means "no flips".
    pub tol: f64,
}

impl Default for AslsConfig {
    fn default() -> Self {
        Self { lambda: 1e5, p: 1e-3, max_iter: 20, tol: 0.0 }
    }
}

impl AslsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidConfig(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// The three stored diagonals of `D2' D2` for a length-`n` signal.
pub fn second_difference_gram(n: usize) -> [Vec<f64>; 3] {
    let mut d0 = vec![0.0; n];
    let mut d1 = vec![0.0; n.saturating_sub(1)];
    let mut d2 = vec![0.0; n.saturating_sub(2)];
    const C: [f64; 3] = [1.0, -2.0, 1.0];
    for r in 0..n.saturating_sub(2) {
        for a in 0..3 {
            d0[r + a] += C[a] * C[a];
        }
        for a in 0..2 {
            d1[r + a] += C[a] * C[a + 1];
        }
        d2[r] += C[0] * C[2];
    }
    [d0, d1, d2]
}

/// Solves `(diag(w) + lambda D2'D2) z = w .* y`. The system is rewritten for
/// the residual `r = y - z`, i.e. `(W + lambda G) r = lambda G y`, so that the
/// round-off scales with the residual instead of the baseline and straight
/// lines come out exact. One step of iterative refinement follows.
pub fn solve_penalized(y: &[f64], w: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if w.len() != n {
        return Err(Error::LengthMismatch(n, w.len()));
    }
    let g = second_difference_gram(n);
    let chol = BandedCholesky::factor(w, lambda, &g)?;
    // lambda D2'(D2 y), so the right-hand side stays in the range of D2'
    let dy: Vec<f64> = y.windows(3).map(|t| t[0] - 2.0 * t[1] + t[2]).collect();
    let mut rhs = vec![0.0; n];
    for (k, d) in dy.iter().enumerate() {
        rhs[k] += lambda * d;
        rhs[k + 1] -= 2.0 * lambda * d;
        rhs[k + 2] += lambda * d;
    }
    let mut r = chol.solve(rhs.clone());
    let defect: Vec<f64> = (0..n).map(|i| rhs[i] - apply_system(w, lambda, &g, &r, i)).collect();
    for (ri, d) in r.iter_mut().zip(chol.solve(defect)) {
        *ri += d;
    }
    Ok(y.iter().zip(&r).map(|(y, r)| y - r).collect())
}

/// Row `i` of `(diag(w) + lambda G) z`.
fn apply_system(w: &[f64], lambda: f64, g: &[Vec<f64>; 3], z: &[f64], i: usize) -> f64 {
    let n = z.len();
    let mut acc = g[0][i] * z[i];
    if i >= 1 {
        acc += g[1][i - 1] * z[i - 1];
    }
    if i + 1 < n {
        acc += g[1][i] * z[i + 1];
    }
    if i >= 2 {
        acc += g[2][i - 2] * z[i - 2];
    }
    if i + 2 < n {
        acc += g[2][i] * z[i + 2];
    }
    w[i] * z[i] + lambda * acc
}

/// Lower factor: `c0` diagonal, `c1` first and `c2` second sub-diagonal.
struct BandedCholesky {
    c0: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
}

impl BandedCholesky {
    fn factor(w: &[f64], lambda: f64, g: &[Vec<f64>; 3]) -> Result<Self> {
        let n = w.len();
        let mut c0 = vec![0.0; n];
        let mut c1 = vec![0.0; n.saturating_sub(1)];
        let mut c2 = vec![0.0; n.saturating_sub(2)];
        for i in 0..n {
            let mut d = w[i] + lambda * g[0][i];
            if i >= 1 {
                d -= c1[i - 1] * c1[i - 1];
            }
            if i >= 2 {
                d -= c2[i - 2] * c2[i - 2];
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::SolveFailure(i));
            }
            c0[i] = d.sqrt();
            if i + 1 < n {
                let mut a = lambda * g[1][i];
                if i >= 1 {
                    a -= c2[i - 1] * c1[i - 1];
                }
                c1[i] = a / c0[i];
            }
            if i + 2 < n {
                c2[i] = lambda * g[2][i] / c0[i];
            }
        }
        Ok(Self { c0, c1, c2 })
    }

    fn solve(&self, mut z: Vec<f64>) -> Vec<f64> {
        let n = z.len();
        let (c0, c1, c2) = (&self.c0, &self.c1, &self.c2);
        for i in 0..n {
            let mut v = z[i];
            if i >= 1 {
                v -= c1[i - 1] * z[i - 1];
            }
            if i >= 2 {
                v -= c2[i - 2] * z[i - 2];
            }
            z[i] = v / c0[i];
        }
        for i in (0..n).rev() {
            let mut v = z[i];
            if i + 1 < n {
                v -= c1[i] * z[i + 1];
            }
            if i + 2 < n {
                v -= c2[i] * z[i + 2];
            }
            z[i] = v / c0[i];
        }
        z
    }
}

#[derive(Debug, Clone)]
pub struct AslsFit {
    pub baseline: Vec<f64>,
    pub weights: Vec<f64>,
    pub iterations: usize,
}

pub fn asls_fit(y: &[f64], cfg: &AslsConfig) -> Result<AslsFit> {
    cfg.validate()?;
    if y.len() < 3 {
        return Err(Error::InvalidConfig(format!("AsLS needs at least 3 points, got {}", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut w = vec![1.0; y.len()];
    let mut z = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        z = solve_penalized(y, &w, cfg.lambda)?;
        iterations += 1;
        let mut flips = 0usize;
        for ((wi, yi), zi) in w.iter_mut().zip(y).zip(&z) {
            let next = if yi > zi { cfg.p } else { 1.0 - cfg.p };
            if next != *wi {
                flips += 1;
            }
            *wi = next;
        }
        if flips as f64 <= cfg.tol * y.len() as f64 {
            break;
        }
    }
    Ok(AslsFit { baseline: z, weights: w, iterations })
}

pub fn asls_baseline(y: &[f64], cfg: &AslsConfig) -> Result<Vec<f64>> {
    asls_fit(y, cfg).map(|f| f.baseline)
}

/// `y - baseline(y)`, min-max normalized. Residuals whose range is at the
/// level of round-off are treated as a constant signal.
pub fn correct_values(y: &[f64], cfg: &AslsConfig) -> Result<Vec<f64>> {
    let z = asls_baseline(y, cfg)?;
    let r: Vec<f64> = y.iter().zip(&z).map(|(y, z)| y - z).collect();
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi - lo <= 1e-6 * scale {
        return Ok(vec![0.0; r.len()]);
    }
    normalize_minmax(&r)
}

pub fn correct(s: &Spectrum, cfg: &AslsConfig) -> Result<Spectrum> {
    let y: Vec<f64> = s.intensities.iter().map(|&v| f64::from(v)).collect();
    Ok(Spectrum {
        intensities: correct_values(&y, cfg)?.into_iter().map(|v| v as f32).collect(),
        ..s.clone()
    })
}

pub fn correct_dataset(ds: &Dataset, cfg: &AslsConfig) -> Result<Dataset> {
    ds.map_intensities(|s| Ok(correct(s, cfg)?.intensities))
}
