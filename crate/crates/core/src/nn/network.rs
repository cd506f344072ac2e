use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::Layer;
use super::{LayerSpec, Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Parameter gradients in the order of [`Network::trainable_mut`].
pub type Gradients<T> = Vec<Vec<T>>;

/// Static shape inference: `(channels, length)` after every layer, starting
/// with the input shape.
pub fn infer_shapes(specs: &[LayerSpec], input: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut shapes = vec![input];
    for spec in specs {
        let next = spec.output_shape(*shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// A sequential network. Train-mode forward passes cache what backward
/// needs; eval-mode inference goes through [`Network::infer`] and never
/// mutates anything except the pass counter.
#[derive(Debug)]
pub struct Network<T> {
    input: (usize, usize),
    layers: Vec<Layer<T>>,
    passes: AtomicUsize,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            input: self.input,
            layers: self.layers.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> Network<T> {
    /// Xavier-initialized network, deterministic per seed.
    pub fn new(specs: &[LayerSpec], in_channels: usize, in_len: usize, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(specs, (in_channels, in_len))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .zip(&shapes)
            .map(|(s, &shape)| Layer::init(s.clone(), shape, &mut rng))
            .collect();
        Ok(Self { input: (in_channels, in_len), layers, passes: AtomicUsize::new(0) })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let specs = self.specs();
        *infer_shapes(&specs, self.input).expect("validated at construction").last().unwrap()
    }

    /// Flattened per-sample output size.
    pub fn output_len(&self) -> usize {
        let (c, l) = self.output_shape();
        c * l
    }

    /// Number of forward passes (train or eval) run so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if (x.channels(), x.len()) != self.input {
            return Err(Error::ShapeMismatch(format!(
                "network expects (channels, length) = {:?}, got {:?}",
                self.input,
                (x.channels(), x.len())
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        self.check_input(x)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, Mode::Train)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Gradients of every trainable tensor plus the input gradient, given the
    /// gradient of the loss with respect to the last train-mode output.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            let mut gs = Vec::new();
            g = layer.backward(&g, &mut gs)?;
            per_layer.push(gs);
        }
        let grads = per_layer.into_iter().rev().flatten().collect();
        Ok((grads, g))
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.trainable()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect()
    }

    /// Every stored tensor, batch-norm running statistics included.
    pub fn state(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.state()).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.state_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|p| p.len()).sum()
    }

    /// Copy of this network in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::new(&self.specs(), self.input.0, self.input.1, 0)
            .expect("same architecture");
        for (dst, src) in out.state_mut().into_iter().zip(self.state()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.f64());
            }
        }
        out
    }
}
