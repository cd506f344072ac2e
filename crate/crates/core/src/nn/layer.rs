use rand::Rng;

use super::ops::{self, BatchNormCache};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics at each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding that keeps the output as long as the input.
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, padding: Padding },
    BatchNorm,
    LeakyRelu { slope: f64 },
    MaxPool { kernel: usize, stride: usize },
    Dense { units: usize },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv { filters, kernel, .. } => filters >= 1 && kernel >= 1,
            LayerSpec::LeakyRelu { slope } => slope > 0.0 && slope < 1.0,
            LayerSpec::MaxPool { kernel, stride } => kernel >= 1 && stride >= 1,
            LayerSpec::Dense { units } => units >= 1,
            LayerSpec::BatchNorm | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid layer {self:?}")))
        }
    }

    /// `(channels, length)` after this layer, given the input `(channels, length)`.
    pub fn output_shape(&self, (c, l): (usize, usize)) -> Result<(usize, usize)> {
        self.validate()?;
        let bad = || Error::ShapeMismatch(format!("{self:?} cannot take input ({c}, {l})"));
        Ok(match *self {
            LayerSpec::Conv { filters, kernel, padding } => {
                (filters, ops::conv_out_len(l, kernel, padding).filter(|&n| n > 0).ok_or_else(bad)?)
            }
            LayerSpec::BatchNorm | LayerSpec::LeakyRelu { .. } => (c, l),
            LayerSpec::MaxPool { kernel, stride } => (c, ops::pool_out_len(l, kernel, stride).ok_or_else(bad)?),
            LayerSpec::Dense { units } => {
                if l != 1 {
                    return Err(bad());
                }
                (units, 1)
            }
            LayerSpec::Flatten => (c * l, 1),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Params<T> {
    None,
    Conv { weight: Vec<T>, bias: Vec<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T> },
    Dense { weight: Vec<T>, bias: Vec<T> },
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    Pool { in_shape: [usize; 3], argmax: Vec<usize> },
    Shape([usize; 3]),
}

#[derive(Debug, Clone)]
pub(crate) struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Params<T>,
    cache: Option<Cache<T>>,
}

/// Half-width of the Xavier (Glorot) uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let a = xavier_bound(fan_in, fan_out);
    (0..n).map(|_| T::lit(rng.random_range(-a..=a))).collect()
}

impl<T: Real> Layer<T> {
    /// Xavier-uniform weights, zero biases, unit batch-norm scale.
    pub fn init<R: Rng>(spec: LayerSpec, (c, l): (usize, usize), rng: &mut R) -> Self {
        let params = match spec {
            LayerSpec::Conv { filters, kernel, .. } => Params::Conv {
                weight: xavier_uniform(rng, filters * c * kernel, c * kernel, filters * kernel),
                bias: vec![T::zero(); filters],
            },
            LayerSpec::BatchNorm => Params::BatchNorm {
                gamma: vec![T::one(); c],
                beta: vec![T::zero(); c],
                running_mean: vec![T::zero(); c],
                running_var: vec![T::one(); c],
            },
            LayerSpec::Dense { units } => {
                let f = c * l;
                Params::Dense { weight: xavier_uniform(rng, f * units, f, units), bias: vec![T::zero(); units] }
            }
            _ => Params::None,
        };
        Self { spec, params, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = match (&self.spec, &mut self.params) {
            (&LayerSpec::Conv { filters, kernel, padding }, Params::Conv { weight, bias }) => {
                let y = ops::conv1d_forward(x, weight, bias, filters, kernel, padding)?;
                if mode == Mode::Train {
                    self.cache = Some(Cache::Input(x.clone()));
                }
                y
            }
            (LayerSpec::BatchNorm, Params::BatchNorm { gamma, beta, running_mean, running_var }) => match mode {
                Mode::Eval => ops::batchnorm_forward_eval(x, gamma, beta, running_mean, running_var, T::lit(BN_EPS))?,
                Mode::Train => {
                    let (y, cache, stats) = ops::batchnorm_forward_train(x, gamma, beta, T::lit(BN_EPS))?;
                    let keep = T::lit(BN_MOMENTUM);
                    let unbias = T::lit(stats.count as f64 / (stats.count - 1) as f64);
                    for c in 0..gamma.len() {
                        running_mean[c] = keep * running_mean[c] + (T::one() - keep) * stats.mean[c];
                        running_var[c] = keep * running_var[c] + (T::one() - keep) * stats.var[c] * unbias;
                    }
                    self.cache = Some(Cache::BatchNorm(cache));
                    y
                }
            },
            (&LayerSpec::LeakyRelu { slope }, _) => {
                if mode == Mode::Train {
                    self.cache = Some(Cache::Input(x.clone()));
                }
                ops::leakyrelu_forward(x, T::lit(slope))
            }
            (&LayerSpec::MaxPool { kernel, stride }, _) => {
                let (y, argmax) = ops::maxpool_forward(x, kernel, stride)?;
                if mode == Mode::Train {
                    self.cache = Some(Cache::Pool { in_shape: x.shape(), argmax });
                }
                y
            }
            (&LayerSpec::Dense { units }, Params::Dense { weight, bias }) => {
                let y = ops::dense_forward(x, weight, bias, units)?;
                if mode == Mode::Train {
                    self.cache = Some(Cache::Input(x.clone()));
                }
                y
            }
            (LayerSpec::Flatten, _) => {
                if mode == Mode::Train {
                    self.cache = Some(Cache::Shape(x.shape()));
                }
                let [b, c, l] = x.shape();
                x.clone().reshape([b, c * l, 1])?
            }
            (spec, _) => return Err(Error::ShapeMismatch(format!("parameters do not match layer {spec:?}"))),
        };
        Ok(out)
    }

    /// Eval-mode forward that touches no state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match (&self.spec, &self.params) {
            (&LayerSpec::Conv { filters, kernel, padding }, Params::Conv { weight, bias }) => {
                ops::conv1d_forward(x, weight, bias, filters, kernel, padding)
            }
            (LayerSpec::BatchNorm, Params::BatchNorm { gamma, beta, running_mean, running_var }) => {
                ops::batchnorm_forward_eval(x, gamma, beta, running_mean, running_var, T::lit(BN_EPS))
            }
            (&LayerSpec::LeakyRelu { slope }, _) => Ok(ops::leakyrelu_forward(x, T::lit(slope))),
            (&LayerSpec::MaxPool { kernel, stride }, _) => Ok(ops::maxpool_forward(x, kernel, stride)?.0),
            (&LayerSpec::Dense { units }, Params::Dense { weight, bias }) => ops::dense_forward(x, weight, bias, units),
            (LayerSpec::Flatten, _) => {
                let [b, c, l] = x.shape();
                x.clone().reshape([b, c * l, 1])
            }
            (spec, _) => Err(Error::ShapeMismatch(format!("parameters do not match layer {spec:?}"))),
        }
    }

    /// Returns the input gradient and pushes parameter gradients (in
    /// declaration order) onto `grads`.
    pub fn backward(&mut self, grad_out: &Tensor<T>, grads: &mut Vec<Vec<T>>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        match (&self.spec, &self.params, cache) {
            (&LayerSpec::Conv { filters, kernel, padding }, Params::Conv { weight, .. }, Cache::Input(x)) => {
                let g = ops::conv1d_backward(&x, weight, grad_out, filters, kernel, padding)?;
                grads.push(g.weight);
                grads.push(g.bias);
                Ok(g.input)
            }
            (LayerSpec::BatchNorm, Params::BatchNorm { gamma, .. }, Cache::BatchNorm(c)) => {
                let (gx, dgamma, dbeta) = ops::batchnorm_backward(&c, gamma, grad_out)?;
                grads.push(dgamma);
                grads.push(dbeta);
                Ok(gx)
            }
            (&LayerSpec::LeakyRelu { slope }, _, Cache::Input(x)) => {
                Ok(ops::leakyrelu_backward(&x, T::lit(slope), grad_out))
            }
            (LayerSpec::MaxPool { .. }, _, Cache::Pool { in_shape, argmax }) => {
                ops::maxpool_backward(in_shape, &argmax, grad_out)
            }
            (&LayerSpec::Dense { units }, Params::Dense { weight, .. }, Cache::Input(x)) => {
                let (gx, gw, gb) = ops::dense_backward(&x, weight, grad_out, units)?;
                grads.push(gw);
                grads.push(gb);
                Ok(gx)
            }
            (LayerSpec::Flatten, _, Cache::Shape(shape)) => grad_out.clone().reshape(shape),
            _ => Err(Error::NoForwardCache),
        }
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        match &self.params {
            Params::None => vec![],
            Params::Conv { weight, bias } | Params::Dense { weight, bias } => vec![weight, bias],
            Params::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        match &mut self.params {
            Params::None => vec![],
            Params::Conv { weight, bias } | Params::Dense { weight, bias } => vec![weight, bias],
            Params::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    /// Every stored tensor including running statistics, in declaration order.
    pub fn state(&self) -> Vec<&[T]> {
        match &self.params {
            Params::BatchNorm { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
            _ => self.trainable(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        match &mut self.params {
            Params::None => vec![],
            Params::Conv { weight, bias } | Params::Dense { weight, bias } => vec![weight, bias],
            Params::BatchNorm { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
        }
    }
}
