//! The Siamese similarity model and the softmax classifier built on the
//! same twin architecture.
//!
//! Similarity of two spectra with features `fa`, `fb` (one shared twin
//! network produces both):
//!
//! ```text
//! s = 1 / (1 + exp(-(w . |fa - fb| + b)))
//! ```
//!
//! `b` is a learnable bias; with `bias_enabled = false` it stays at zero and
//! the model is the plain weighted-L1 logistic. Label 1 means "same class".

use std::slice;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{infer_shapes, xavier_uniform, Gradients, LayerSpec, Mode, Network, Padding, Real, Tensor};
use crate::seed::{derive_seed, stage};
use crate::spectra::{ClassId, Grid, Spectrum};

/// Rows embedded per eval-mode forward pass.
const INFER_CHUNK: usize = 64;

/// Twin-network layer stack for a given input length.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_len: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// `filters.len()` blocks of Conv(same) -> BatchNorm -> LeakyReLU ->
    /// MaxPool(2, 2), then Flatten.
    pub fn blocks(input_len: usize, filters: &[usize], kernels: &[usize], slope: f64) -> Self {
        assert_eq!(filters.len(), kernels.len(), "one kernel size per block");
        let mut layers = Vec::with_capacity(filters.len() * 4 + 1);
        for (&f, &k) in filters.iter().zip(kernels) {
            layers.push(LayerSpec::Conv { filters: f, kernel: k, padding: Padding::Same });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::LeakyRelu { slope });
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        layers.push(LayerSpec::Flatten);
        Self { input_len, layers }
    }

    /// Six blocks with filters 32,32,16,16,8,8 and kernels 9,9,7,7,5,5.
    /// A 1024-point input yields 8 x 16 = 128 features.
    pub fn default_twin(input_len: usize) -> Self {
        Self::blocks(input_len, &[32, 32, 16, 16, 8, 8], &[9, 9, 7, 7, 5, 5], 0.01)
    }

    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        infer_shapes(&self.layers, (1, self.input_len))
    }

    /// Feature dimension from static shape inference.
    pub fn feature_len(&self) -> Result<usize> {
        let &(c, l) = self.shapes()?.last().unwrap();
        Ok(c * l)
    }

    pub fn with_head(&self, classes: usize) -> Vec<LayerSpec> {
        let mut layers = self.layers.clone();
        if layers.last() != Some(&LayerSpec::Flatten) {
            layers.push(LayerSpec::Flatten);
        }
        layers.push(LayerSpec::Dense { units: classes });
        layers
    }
}

/// Logistic function clamped to stay strictly inside (0, 1).
pub fn logistic(z: f64) -> f64 {
    let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Binary cross-entropy of a probability `s` against a label in {0, 1}.
pub fn bce_loss(s: f64, y: f64) -> f64 {
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Binary cross-entropy evaluated from the pre-sigmoid value, stable for any
/// finite `z`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn rows_tensor<T: Real>(rows: &[&[T]]) -> Result<Tensor<T>> {
    Tensor::from_rows(rows)
}

#[derive(Debug, Clone)]
pub struct SiameseModel<T: Real> {
    twin: Network<T>,
    metric_w: Vec<T>,
    metric_b: T,
    bias_enabled: bool,
    grid: Grid,
}

impl<T: Real> SiameseModel<T> {
    pub fn new(arch: &Architecture, grid: Grid, bias_enabled: bool, seed: u64) -> Result<Self> {
        if grid.len != arch.input_len {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} points, architecture expects {}",
                grid.len, arch.input_len
            )));
        }
        let twin = Network::new(&arch.layers, 1, arch.input_len, derive_seed(seed, &[stage::INIT, 0]))?;
        let d = twin.output_len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage::INIT, 1]));
        // non-positive: a larger distance starts out as a lower score
        let metric_w = xavier_uniform::<T, _>(&mut rng, d, d, 1).into_iter().map(|w| -w.abs()).collect();
        Ok(Self { twin, metric_w, metric_b: T::zero(), bias_enabled, grid })
    }

    pub fn from_parts(twin: Network<T>, metric_w: Vec<T>, metric_b: T, bias_enabled: bool, grid: Grid) -> Result<Self> {
        if metric_w.len() != twin.output_len() {
            return Err(Error::ShapeMismatch(format!(
                "metric has {} weights, twin emits {} features",
                metric_w.len(),
                twin.output_len()
            )));
        }
        if twin.input_shape() != (1, grid.len) {
            return Err(Error::ShapeMismatch("twin input does not match grid".into()));
        }
        let metric_b = if bias_enabled { metric_b } else { T::zero() };
        Ok(Self { twin, metric_w, metric_b, bias_enabled, grid })
    }

    pub fn twin(&self) -> &Network<T> {
        &self.twin
    }

    pub fn twin_mut(&mut self) -> &mut Network<T> {
        &mut self.twin
    }

    pub fn metric_w(&self) -> &[T] {
        &self.metric_w
    }

    pub fn metric_b(&self) -> T {
        self.metric_b
    }

    pub fn set_metric(&mut self, w: Vec<T>, b: T) -> Result<()> {
        if w.len() != self.metric_w.len() {
            return Err(Error::LengthMismatch(w.len(), self.metric_w.len()));
        }
        self.metric_w = w;
        self.metric_b = if self.bias_enabled { b } else { T::zero() };
        Ok(())
    }

    pub fn bias_enabled(&self) -> bool {
        self.bias_enabled
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn input_len(&self) -> usize {
        self.grid.len
    }

    pub fn feature_len(&self) -> usize {
        self.metric_w.len()
    }

    /// Eval-mode features for each row.
    pub fn embed_rows(&self, rows: &[&[T]]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(INFER_CHUNK) {
            let f = self.twin.infer(&rows_tensor(chunk)?)?;
            out.extend((0..chunk.len()).map(|b| f.sample(b).to_vec()));
        }
        Ok(out)
    }

    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.embed_rows(&[x])?.pop().unwrap())
    }

    /// `w . |fa - fb| + b`.
    pub fn logit(&self, fa: &[T], fb: &[T]) -> T {
        let mut z = self.metric_b;
        for ((w, a), b) in self.metric_w.iter().zip(fa).zip(fb) {
            z += *w * (*a - *b).abs();
        }
        z
    }

    pub fn similarity_of_features(&self, fa: &[T], fb: &[T]) -> f64 {
        logistic(self.logit(fa, fb).f64())
    }

    /// Similarity in (0, 1) of two input rows, in the given mode. Train mode
    /// runs both rows through one batch so batch statistics are shared.
    pub fn similarity(&mut self, a: &[T], b: &[T], mode: Mode) -> Result<f64> {
        match mode {
            Mode::Eval => {
                let f = self.embed_rows(&[a, b])?;
                Ok(self.similarity_of_features(&f[0], &f[1]))
            }
            Mode::Train => {
                let f = self.twin.forward(&rows_tensor(&[a, b])?, Mode::Train)?;
                Ok(self.similarity_of_features(f.sample(0), f.sample(1)))
            }
        }
    }

    /// Runs the `a` rows and the `b` rows as one train-mode batch and
    /// returns the pair logits plus the feature tensor.
    fn forward_pairs(&mut self, a: &[&[T]], b: &[&[T]]) -> Result<(Vec<T>, Tensor<T>)> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        let rows: Vec<&[T]> = a.iter().chain(b).copied().collect();
        let f = self.twin.forward(&rows_tensor(&rows)?, Mode::Train)?;
        let n = a.len();
        let z = (0..n).map(|i| self.logit(f.sample(i), f.sample(n + i))).collect();
        Ok((z, f))
    }

    /// Mean binary cross-entropy over the pairs, train mode.
    pub fn pair_loss(&mut self, a: &[&[T]], b: &[&[T]], labels: &[f64]) -> Result<f64> {
        let (z, _) = self.forward_pairs(a, b)?;
        if labels.len() != z.len() {
            return Err(Error::LengthMismatch(labels.len(), z.len()));
        }
        Ok(z.iter().zip(labels).map(|(z, &y)| bce_with_logits(z.f64(), y)).sum::<f64>() / z.len() as f64)
    }

    /// Train-mode loss and gradients in the order of [`Self::params_mut`].
    pub fn pair_loss_grad(&mut self, a: &[&[T]], b: &[&[T]], labels: &[f64]) -> Result<(f64, Gradients<T>)> {
        let (z, f) = self.forward_pairs(a, b)?;
        if labels.len() != z.len() {
            return Err(Error::LengthMismatch(labels.len(), z.len()));
        }
        let n = z.len();
        let d = self.feature_len();
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut gw = vec![T::zero(); d];
        let mut gb = T::zero();
        let mut gf = Tensor::zeros(f.shape());
        for (i, (&zi, &y)) in z.iter().zip(labels).enumerate() {
            let zf = zi.f64();
            loss += bce_with_logits(zf, y) * inv_n;
            let dz = T::lit((logistic_unclamped(zf) - y) * inv_n);
            gb += dz;
            let (fa, fb) = (f.sample(i), f.sample(n + i));
            let mut ga = vec![T::zero(); d];
            for k in 0..d {
                let diff = fa[k] - fb[k];
                gw[k] += dz * diff.abs();
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                ga[k] = dz * self.metric_w[k] * sign;
            }
            gf.data_mut()[i * d..(i + 1) * d].copy_from_slice(&ga);
            for (o, g) in gf.data_mut()[(n + i) * d..(n + i + 1) * d].iter_mut().zip(&ga) {
                *o = -*g;
            }
        }
        let (mut grads, _) = self.twin.backward(&gf)?;
        grads.push(gw);
        grads.push(vec![if self.bias_enabled { gb } else { T::zero() }]);
        Ok((loss, grads))
    }

    /// Twin trainables, then the metric weights, then the metric bias.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut p = self.twin.trainable_mut();
        p.push(&mut self.metric_w);
        p.push(slice::from_mut(&mut self.metric_b));
        p
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut p = self.twin.trainable();
        p.push(&self.metric_w);
        p.push(slice::from_ref(&self.metric_b));
        p
    }

    pub fn cast<U: Real>(&self) -> SiameseModel<U> {
        SiameseModel {
            twin: self.twin.cast(),
            metric_w: self.metric_w.iter().map(|v| U::lit(v.f64())).collect(),
            metric_b: U::lit(self.metric_b.f64()),
            bias_enabled: self.bias_enabled,
            grid: self.grid,
        }
    }
}

fn logistic_unclamped(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        z.exp() / (1.0 + z.exp())
    }
}

fn check_spectrum(s: &Spectrum, len: usize) -> Result<()> {
    if s.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "spectrum {} has {} points, model expects {len}",
            s.sample_id,
            s.len()
        )));
    }
    Ok(())
}

impl SiameseModel<f32> {
    pub fn embed_spectrum(&self, s: &Spectrum) -> Result<Vec<f32>> {
        check_spectrum(s, self.input_len())?;
        self.embed(&s.intensities)
    }

    pub fn embed_spectra(&self, spectra: &[&Spectrum]) -> Result<Vec<Vec<f32>>> {
        for s in spectra {
            check_spectrum(s, self.input_len())?;
        }
        let rows: Vec<&[f32]> = spectra.iter().map(|s| s.intensities.as_slice()).collect();
        self.embed_rows(&rows)
    }

    /// Eval-mode similarity of two spectra.
    pub fn similarity_spectra(&self, a: &Spectrum, b: &Spectrum) -> Result<f64> {
        let f = self.embed_spectra(&[a, b])?;
        Ok(self.similarity_of_features(&f[0], &f[1]))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The twin architecture followed by a dense softmax head over the trained
/// classes.
#[derive(Debug, Clone)]
pub struct ClassifierModel<T: Real> {
    net: Network<T>,
    classes: Vec<ClassId>,
    grid: Grid,
}

impl<T: Real> ClassifierModel<T> {
    pub fn new(arch: &Architecture, classes: Vec<ClassId>, grid: Grid, seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::TooFewClasses { needed: 1, got: 0 });
        }
        if grid.len != arch.input_len {
            return Err(Error::ShapeMismatch("grid does not match architecture".into()));
        }
        let net = Network::new(&arch.with_head(classes.len()), 1, arch.input_len, derive_seed(seed, &[stage::INIT, 2]))?;
        Ok(Self { net, classes, grid })
    }

    pub fn from_parts(net: Network<T>, classes: Vec<ClassId>, grid: Grid) -> Result<Self> {
        if net.output_len() != classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "head has {} outputs for {} classes",
                net.output_len(),
                classes.len()
            )));
        }
        Ok(Self { net, classes, grid })
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Eval-mode logits per row.
    pub fn logits_rows(&self, rows: &[&[T]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(INFER_CHUNK) {
            let y = self.net.infer(&rows_tensor(chunk)?)?;
            out.extend((0..chunk.len()).map(|b| y.sample(b).iter().map(|v| v.f64()).collect::<Vec<_>>()));
        }
        Ok(out)
    }

    pub fn probabilities(&self, x: &[T]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_rows(&[x])?[0]))
    }

    /// Argmax class; ties go to the lower head index.
    pub fn predict_rows(&self, rows: &[&[T]]) -> Result<Vec<ClassId>> {
        Ok(self
            .logits_rows(rows)?
            .iter()
            .map(|l| {
                let best = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b });
                self.classes[best]
            })
            .collect())
    }

    /// Mean cross-entropy and gradients; `targets` are head indices.
    pub fn loss_grad(&mut self, rows: &[&[T]], targets: &[usize]) -> Result<(f64, Gradients<T>)> {
        if rows.len() != targets.len() {
            return Err(Error::LengthMismatch(rows.len(), targets.len()));
        }
        let y = self.net.forward(&rows_tensor(rows)?, Mode::Train)?;
        let k = self.classes.len();
        let n = rows.len() as f64;
        let mut loss = 0.0;
        let mut g = Tensor::zeros(y.shape());
        for (b, &t) in targets.iter().enumerate() {
            let logits: Vec<f64> = y.sample(b).iter().map(|v| v.f64()).collect();
            let p = softmax(&logits);
            loss -= p[t].max(f64::MIN_POSITIVE).ln() / n;
            for c in 0..k {
                let onehot = if c == t { 1.0 } else { 0.0 };
                g.data_mut()[b * k + c] = T::lit((p[c] - onehot) / n);
            }
        }
        let (grads, _) = self.net.backward(&g)?;
        Ok((loss, grads))
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.net.trainable_mut()
    }

    pub fn head_index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

impl ClassifierModel<f32> {
    pub fn predict_spectra(&self, spectra: &[&Spectrum]) -> Result<Vec<ClassId>> {
        for s in spectra {
            check_spectrum(s, self.grid.len)?;
        }
        let rows: Vec<&[f32]> = spectra.iter().map(|s| s.intensities.as_slice()).collect();
        self.predict_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(len: usize) -> Architecture {
        Architecture::blocks(len, &[3, 2], &[3, 3], 0.01)
    }

    fn grid(len: usize) -> Grid {
        Grid::new(0.0, 1.0, len).unwrap()
    }

    fn row(len: usize, phase: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64) * 0.37 + phase).sin().abs()).collect()
    }

    #[test]
    fn default_feature_length() {
        let arch = Architecture::default_twin(1024);
        let shapes = arch.shapes().unwrap();
        let &(c, l) = shapes.last().unwrap();
        assert_eq!((c, l), (128, 1));
        assert_eq!(shapes[shapes.len() - 2], (8, 16));
        assert_eq!(arch.feature_len().unwrap(), 128);
    }

    #[test]
    fn embedding_matches_shape_inference() {
        let arch = tiny_arch(32);
        let m = SiameseModel::<f64>::new(&arch, grid(32), true, 1).unwrap();
        let f = m.embed(&row(32, 0.0)).unwrap();
        assert_eq!(f.len(), arch.feature_len().unwrap());
        assert_eq!(f, m.embed(&row(32, 0.0)).unwrap());
        assert_ne!(f, m.embed(&row(32, 1.0)).unwrap());
    }

    #[test]
    fn self_similarity_is_half_without_bias() {
        let mut m = SiameseModel::<f64>::new(&tiny_arch(32), grid(32), false, 1).unwrap();
        let x = row(32, 0.3);
        assert_eq!(m.similarity(&x, &x, Mode::Eval).unwrap(), 0.5);
    }

    #[test]
    fn engineered_logit() {
        let mut m = SiameseModel::<f64>::new(&tiny_arch(32), grid(32), true, 1).unwrap();
        let d = m.feature_len();
        let mut w = vec![0.0; d];
        w[0] = 1.0;
        w[1] = 0.5;
        m.set_metric(w, 0.0).unwrap();
        let fa = vec![0.0; d];
        let mut fb = vec![0.0; d];
        fb[0] = -1.0;
        fb[1] = 2.0;
        let s = m.similarity_of_features(&fa, &fb);
        assert!((s - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((s - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn symmetric_and_interior() {
        let mut m = SiameseModel::<f32>::new(&tiny_arch(32), grid(32), true, 4).unwrap();
        let a: Vec<f32> = row(32, 0.0).iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = row(32, 2.0).iter().map(|&v| v as f32).collect();
        let ab = m.similarity(&a, &b, Mode::Eval).unwrap();
        let ba = m.similarity(&b, &a, Mode::Eval).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab > 0.0 && ab < 1.0);
        assert!(logistic(1e4) < 1.0 && logistic(-1e4) > 0.0);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-7, 1.0) < 1.1e-7);
        assert!((bce_loss(0.8808, 0.0) - 2.1269).abs() < 1e-4);
        for z in [-8.0, -2.0, 0.0, 0.7, 9.0] {
            for y in [0.0, 1.0] {
                let direct = bce_loss(logistic_unclamped(z), y);
                assert!((bce_with_logits(z, y) - direct).abs() < 1e-9 * direct.max(1.0));
            }
        }
        assert!(bce_with_logits(1e6, 0.0).is_finite());
    }

    #[test]
    fn self_pairs_push_bias_up() {
        let mut m = SiameseModel::<f64>::new(&tiny_arch(32), grid(32), true, 2).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|i| row(32, i as f64)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, grads) = m.pair_loss_grad(&refs, &refs, &[1.0; 3]).unwrap();
        assert!(grads.last().unwrap()[0] < 0.0);
    }

    #[test]
    fn weight_sharing_is_structural() {
        // both branches are rows of one batch through the single twin
        let mut m = SiameseModel::<f64>::new(&tiny_arch(32), grid(32), true, 3).unwrap();
        let a = row(32, 0.1);
        let b = row(32, 0.9);
        let before = m.similarity(&a, &b, Mode::Eval).unwrap();
        m.twin_mut().trainable_mut()[0][0] += 0.5;
        let fa = m.embed(&a).unwrap();
        let fb = m.embed(&b).unwrap();
        let f = m.embed_rows(&[&a, &b]).unwrap();
        assert_eq!((fa, fb), (f[0].clone(), f[1].clone()));
        assert_ne!(before, m.similarity(&a, &b, Mode::Eval).unwrap());
    }

    #[test]
    fn classifier_softmax() {
        let arch = tiny_arch(32);
        let mut c = ClassifierModel::<f64>::new(&arch, vec![5, 6, 7], grid(32), 1).unwrap();
        let x = row(32, 0.4);
        let p = c.probabilities(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        {
            let mut params = c.net_mut().trainable_mut();
            let n = params.len();
            params[n - 2].fill(0.0);
            params[n - 1].fill(0.0);
        }
        for v in c.probabilities(&x).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.0, 2.5];
        let shifted: Vec<f64> = l.iter().map(|v| v + 100.0).collect();
        let (a, b) = (softmax(&l), softmax(&shifted));
        let arg = |p: &[f64]| (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(arg(&a), arg(&b));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
