//! Central finite-difference gradient checking.
//!
//! Coordinates where the loss is not smooth within the probe radius (a
//! LeakyReLU input or an |f_a - f_b| term crossing zero, a max-pool window
//! changing its winner) are detected by comparing central differences at
//! step `h` and `h / 2`; they disagree at O(1) near a kink and agree to
//! O(h^2) elsewhere. Such coordinates are counted and excluded.

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Index of the worst coordinate.
    pub worst: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        let (max_rel_error, worst) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst)
        } else {
            (self.max_rel_error, self.worst)
        };
        GradCheck {
            max_rel_error,
            worst,
            checked: self.checked + other.checked,
            skipped_kinks: self.skipped_kinks + other.skipped_kinks,
        }
    }

    pub fn empty() -> GradCheck {
        GradCheck { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 }
    }
}

/// Denominator floor for the relative error, so components that are zero
/// up to round-off are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// `loss_at(i, delta)` must return the loss with coordinate `i` displaced by
/// `delta` (and leave the coordinate restored afterwards).
pub fn check<F>(analytic: &[f64], h: f64, mut loss_at: F) -> GradCheck
where
    F: FnMut(usize, f64) -> f64,
{
    let mut out = GradCheck::empty();
    for (i, &a) in analytic.iter().enumerate() {
        let central = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
        let half = (loss_at(i, h / 2.0) - loss_at(i, -h / 2.0)) / h;
        if (central - half).abs() > 1e-6 * central.abs().max(1.0) {
            out.skipped_kinks += 1;
            continue;
        }
        out.checked += 1;
        let e = relative_error(a, central);
        if e > out.max_rel_error {
            out.max_rel_error = e;
            out.worst = Some(i);
        }
    }
    out
}
