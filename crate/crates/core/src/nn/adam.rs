use super::Real;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates. Moments are allocated lazily
/// on the first step to match the parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeMismatch(format!("parameter of {} values, gradient of {}", p.len(), g.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut theta = vec![0.0f64];
        let mut adam = Adam::new(1e-3);
        adam.step(vec![&mut theta], &[vec![1.0]]).unwrap();
        assert!((theta[0] + 1e-3).abs() <= 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut theta = vec![0.3f64, -1.2];
        let mut adam = Adam::new(1e-2);
        for _ in 0..5 {
            adam.step(vec![&mut theta], &[vec![0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta, vec![0.3, -1.2]);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let (mut a, mut b) = (vec![1.0f64], vec![1.0f64]);
        let mut adam = Adam::new(1e-2);
        for k in 0..4 {
            let g = 0.1 * (k as f64 + 1.0);
            adam.step(vec![&mut a, &mut b], &[vec![g], vec![g]]).unwrap();
        }
        assert_eq!(a, b);
        assert!(adam.second_moments().iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f64; 2];
        let mut adam = Adam::new(1e-3);
        assert!(adam.step(vec![&mut p], &[vec![1.0]]).is_err());
        assert!(adam.step(vec![&mut p], &[]).is_err());
    }
}
