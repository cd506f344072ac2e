//! Helpers shared by the integration tests and the acceptance target:
//! independent oracles and the checks built on them. Each check takes its
//! size as a parameter so unit-sized runs and full acceptance runs share code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spectromatch::nn::gradcheck::{check, GradCheck};
use spectromatch::nn::{ops, LayerSpec, Mode, Network, Padding, Tensor, BN_EPS};
use spectromatch::preprocess::AslsConfig;
use spectromatch::sampler::{sample_epoch, BootstrapPlan};
use spectromatch::siamese::{Architecture, SiameseModel};
use spectromatch::spectra::{AugmentPolicy, ClassId, Dataset, Grid, Spectrum, SynthConfig};
use spectromatch::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor<f64> {
    Tensor::new(shape, random_vec(r, shape.iter().product())).unwrap()
}

// ---------------------------------------------------------------- gradients

pub const LAYER_KINDS: [&str; 6] = ["conv", "batchnorm", "leakyrelu", "maxpool", "dense", "flatten"];

/// Finite-difference step for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

/// A random single-layer network of the given kind and a matching input.
fn layer_case(kind: &str, seed: u64) -> (Network<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let batch = r.random_range(1..=3);
    let chans = r.random_range(1..=3);
    let mut len = r.random_range(4..=12);
    let spec = match kind {
        "conv" => {
            let kernel = r.random_range(1..=5);
            let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            LayerSpec::Conv { filters: r.random_range(1..=3), kernel, padding }
        }
        "batchnorm" => LayerSpec::BatchNorm,
        "leakyrelu" => LayerSpec::LeakyRelu { slope: r.random_range(0.01..0.3) },
        "maxpool" => {
            let kernel = r.random_range(1..=3);
            LayerSpec::MaxPool { kernel, stride: r.random_range(1..=3) }
        }
        "dense" => {
            len = 1;
            LayerSpec::Dense { units: r.random_range(1..=4) }
        }
        "flatten" => LayerSpec::Flatten,
        other => panic!("unknown layer kind {other}"),
    };
    let net = Network::<f64>::new(&[spec], chans, len, r.random()).unwrap();
    let mut x = random_tensor(&mut r, [batch.max(if kind == "batchnorm" { 2 } else { 1 }), chans, len]);
    if kind == "batchnorm" {
        // non-trivial scale and shift so gamma and beta matter
        let net_params: Vec<f64> = random_vec(&mut r, 2 * chans).iter().map(|v| 1.0 + 0.5 * v).collect();
        let mut net = net;
        for (p, v) in net.trainable_mut().into_iter().flatten().zip(net_params) {
            *p = v;
        }
        x.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + 0.3);
        return (net, x);
    }
    (net, x)
}

fn projected_loss(net: &mut Network<f64>, x: &Tensor<f64>, proj: &[f64]) -> f64 {
    let y = net.forward(x, Mode::Train).unwrap();
    y.data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Checks parameter and input gradients of one random layer against central
/// differences of `sum(proj * layer(x))`.
pub fn gradcheck_layer(kind: &str, seed: u64) -> GradCheck {
    let (mut net, x) = layer_case(kind, seed);
    let y = net.forward(&x, Mode::Train).unwrap();
    let proj = random_vec(&mut rng(seed ^ 0x5eed), y.data().len());
    let (grads, gx) = net.backward(&Tensor::new(y.shape(), proj.clone()).unwrap()).unwrap();
    let analytic: Vec<f64> = grads.iter().flatten().copied().collect();
    let params = check(&analytic, FD_STEP, |i, d| {
        let bump = |net: &mut Network<f64>, d: f64| {
            let mut k = i;
            for p in net.trainable_mut() {
                if k < p.len() {
                    p[k] += d;
                    return;
                }
                k -= p.len();
            }
        };
        bump(&mut net, d);
        let l = projected_loss(&mut net, &x, &proj);
        bump(&mut net, -d);
        l
    });
    let mut xp = x.clone();
    let inputs = check(gx.data(), FD_STEP, |i, d| {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + d;
        let l = projected_loss(&mut net, &xp, &proj);
        xp.data_mut()[i] = orig;
        l
    });
    params.merge(inputs)
}

/// End-to-end check of the pair loss of a two-block Siamese model on
/// length-32 inputs.
pub fn gradcheck_siamese(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let f1 = r.random_range(1..=3);
    let f2 = r.random_range(1..=3);
    let arch = Architecture::blocks(32, &[f1, f2], &[r.random_range(1..=5), r.random_range(1..=5)], 0.1);
    let grid = Grid::new(0.0, 1.0, 32).unwrap();
    let mut model = SiameseModel::<f64>::new(&arch, grid, r.random_bool(0.5), r.random()).unwrap();
    let n = r.random_range(2..=4);
    let rows: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..32).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let a: Vec<&[f64]> = rows[..n].iter().map(|v| v.as_slice()).collect();
    let b: Vec<&[f64]> = rows[n..].iter().map(|v| v.as_slice()).collect();
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let bias = model.bias_enabled();
    let (_, grads) = model.pair_loss_grad(&a, &b, &labels).unwrap();
    let mut analytic: Vec<f64> = grads.iter().flatten().copied().collect();
    if !bias {
        // the bias is frozen; drop it from the comparison
        analytic.pop();
    }
    check(&analytic, FD_STEP, |i, d| {
        let bump = |m: &mut SiameseModel<f64>, d: f64| {
            let mut k = i;
            for p in m.params_mut() {
                if k < p.len() {
                    p[k] += d;
                    return;
                }
                k -= p.len();
            }
        };
        bump(&mut model, d);
        let l = model.pair_loss(&a, &b, &labels).unwrap();
        bump(&mut model, -d);
        l
    })
}

// ---------------------------------------------------------- forward oracles

pub fn naive_conv(x: &Tensor<f64>, w: &[f64], bias: &[f64], filters: usize, kernel: usize, same: bool) -> Vec<f64> {
    let [batch, chans, len] = x.shape();
    let left = if same { (kernel - 1) / 2 } else { 0 };
    let out_len = if same { len } else { len - kernel + 1 };
    let mut out = Vec::with_capacity(batch * filters * out_len);
    for b in 0..batch {
        for m in 0..filters {
            for i in 0..out_len {
                let mut acc = bias[m];
                for c in 0..chans {
                    for k in 0..kernel {
                        let src = i as isize + k as isize - left as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += w[(m * chans + c) * kernel + k] * x.row(b, c)[src as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor<f64>, kernel: usize, stride: usize) -> Vec<f64> {
    let [batch, chans, len] = x.shape();
    let mut out = Vec::new();
    for b in 0..batch {
        for c in 0..chans {
            let row = x.row(b, c);
            let mut start = 0;
            while start + kernel <= len {
                out.push(row[start..start + kernel].iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                start += stride;
            }
        }
    }
    out
}

pub fn naive_dense(x: &Tensor<f64>, w: &[f64], bias: &[f64], units: usize) -> Vec<f64> {
    let [batch, features, _] = x.shape();
    let mut out = Vec::new();
    for b in 0..batch {
        for u in 0..units {
            let mut acc = bias[u];
            for f in 0..features {
                acc += x.sample(b)[f] * w[f * units + u];
            }
            out.push(acc);
        }
    }
    out
}

pub fn naive_batchnorm_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let [batch, chans, len] = x.shape();
    let n = (batch * len) as f64;
    let mut out = x.data().to_vec();
    for c in 0..chans {
        let vals: Vec<f64> = (0..batch).flat_map(|b| x.row(b, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for b in 0..batch {
            for i in 0..len {
                let idx = (b * chans + c) * len + i;
                out[idx] = gamma[c] * (x.data()[idx] - mean) / (var + BN_EPS).sqrt() + beta[c];
            }
        }
    }
    out
}

pub fn naive_batchnorm_eval(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    let [_, chans, len] = x.shape();
    x.data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let c = (idx / len) % chans;
            gamma[c] * (v - mean[c]) / (var[c] + BN_EPS).sqrt() + beta[c]
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle output length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute deviation of each forward kernel from its naive oracle
/// over `shapes` random shapes.
pub fn forward_oracle_errors(shapes: u64) -> BTreeMap<&'static str, f64> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for s in 0..shapes {
        let mut r = rng(1_000_000 + s);
        let batch = r.random_range(1..=4);
        let chans = r.random_range(1..=4);
        let len = r.random_range(1..=40);
        let x = random_tensor(&mut r, [batch, chans, len]);

        let kernel = r.random_range(1..=len.min(9));
        let filters = r.random_range(1..=5);
        let w = random_vec(&mut r, filters * chans * kernel);
        let bias = random_vec(&mut r, filters);
        for (same, padding) in [(true, Padding::Same), (false, Padding::Valid)] {
            let y = ops::conv1d_forward(&x, &w, &bias, filters, kernel, padding).unwrap();
            note("conv1d", max_abs_diff(y.data(), &naive_conv(&x, &w, &bias, filters, kernel, same)));
        }

        let pk = r.random_range(1..=len.min(4));
        let stride = r.random_range(1..=3);
        let (y, _) = ops::maxpool_forward(&x, pk, stride).unwrap();
        note("maxpool", max_abs_diff(y.data(), &naive_maxpool(&x, pk, stride)));

        let flat = Tensor::new([batch, chans * len, 1], x.data().to_vec()).unwrap();
        let units = r.random_range(1..=6);
        let dw = random_vec(&mut r, chans * len * units);
        let db = random_vec(&mut r, units);
        let y = ops::dense_forward(&flat, &dw, &db, units).unwrap();
        note("dense", max_abs_diff(y.data(), &naive_dense(&flat, &dw, &db, units)));

        let gamma = random_vec(&mut r, chans);
        let beta = random_vec(&mut r, chans);
        if batch * len >= 2 {
            let (y, _, _) = ops::batchnorm_forward_train(&x, &gamma, &beta, BN_EPS).unwrap();
            note("batchnorm_train", max_abs_diff(y.data(), &naive_batchnorm_train(&x, &gamma, &beta)));
        }
        let mean = random_vec(&mut r, chans);
        let var: Vec<f64> = (0..chans).map(|_| r.random_range(0.1..3.0)).collect();
        let y = ops::batchnorm_forward_eval(&x, &gamma, &beta, &mean, &var, BN_EPS).unwrap();
        note("batchnorm_eval", max_abs_diff(y.data(), &naive_batchnorm_eval(&x, &gamma, &beta, &mean, &var)));
    }
    worst
}

// -------------------------------------------------------------- AsLS oracle

/// Dense-matrix AsLS: explicit `D2`, `A = W + lambda D2'D2` solved by
/// Cholesky with one refinement step, same weight rule and stopping rule.
pub fn dense_asls(y: &[f64], cfg: &AslsConfig) -> Vec<f64> {
    let n = y.len();
    let mut d = DMatrix::<f64>::zeros(n - 2, n);
    for r in 0..n - 2 {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    let penalty = d.transpose() * &d * cfg.lambda;
    let yv = DVector::from_column_slice(y);
    let mut w = vec![1.0; n];
    let mut z = DVector::zeros(n);
    for _ in 0..cfg.max_iter {
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&w)) + &penalty;
        // solved for the residual y - z, which keeps lines exact
        let rhs = d.transpose() * (&d * &yv) * cfg.lambda;
        let chol = a.clone().cholesky().expect("SPD system");
        let mut r = chol.solve(&rhs);
        let defect = &rhs - &a * &r;
        r += chol.solve(&defect);
        z = &yv - r;
        let mut flips = 0;
        for i in 0..n {
            let next = if y[i] > z[i] { cfg.p } else { 1.0 - cfg.p };
            if next != w[i] {
                flips += 1;
            }
            w[i] = next;
        }
        if flips as f64 <= cfg.tol * n as f64 {
            break;
        }
    }
    z.iter().copied().collect()
}

/// Linear ramp plus Gaussian peaks on `n` points.
pub fn ramp_peak_signal(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let slope = r.random_range(-2.0..2.0) / n as f64;
    let offset = r.random_range(0.0..1.0);
    let peaks: Vec<(f64, f64, f64)> = (0..r.random_range(1..=3))
        .map(|_| (r.random_range(0.1..0.9) * n as f64, r.random_range(1.0..6.0), r.random_range(0.2..1.0)))
        .collect();
    (0..n)
        .map(|i| {
            let x = i as f64;
            offset + slope * x + peaks.iter().map(|(c, s, h)| h * (-0.5 * ((x - c) / s).powi(2)).exp()).sum::<f64>()
        })
        .collect()
}

// ----------------------------------------------------------- matcher oracle

/// Brute force over every reference: similarity through the logistic,
/// classes ordered by their best similarity, ties by ascending id.
pub fn brute_force_ranking(model: &SiameseModel<f32>, refs: &[&Spectrum], query: &Spectrum) -> Vec<ClassId> {
    let fq = model.embed_spectrum(query).unwrap();
    let mut best: BTreeMap<ClassId, f64> = BTreeMap::new();
    for r in refs {
        let fr = model.embed_spectrum(r).unwrap();
        let z: f64 = model.metric_b() as f64
            + model.metric_w().iter().zip(&fq).zip(&fr).map(|((w, a), b)| *w as f64 * (*a as f64 - *b as f64).abs()).sum::<f64>();
        let s = 1.0 / (1.0 + (-z).exp());
        let e = best.entry(r.class_id).or_insert(f64::NEG_INFINITY);
        *e = e.max(s);
    }
    let mut v: Vec<(ClassId, f64)> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v.into_iter().map(|(c, _)| c).collect()
}

// ------------------------------------------------------------- pair checks

/// Small dataset with `sizes[c]` samples in class `c`.
pub fn toy_dataset(sizes: &[usize], len: usize) -> Dataset {
    let grid = Grid::new(0.0, 1.0, len).unwrap();
    let mut spectra = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for s in 0..n {
            let intensities = (0..len).map(|i| if i == (c * 3 + s) % len { 1.0 } else { 0.0 }).collect();
            spectra.push(Spectrum { intensities, class_id: c as ClassId, sample_id: format!("c{c}s{s}"), grid });
        }
    }
    Dataset::new(spectra).unwrap()
}

/// Counts of each unordered positive index pair over `epochs` epochs.
pub fn positive_pair_frequencies(ds: &Dataset, epochs: u64, seed: u64) -> BTreeMap<(usize, usize), u64> {
    let plan = BootstrapPlan::new(ds, seed);
    let mut counts = BTreeMap::new();
    for e in 0..epochs {
        for p in sample_epoch(ds, &plan, e).unwrap() {
            if p.same {
                *counts.entry((p.a.min(p.b), p.a.max(p.b))).or_insert(0) += 1;
            }
        }
    }
    counts
}

// -------------------------------------------------------- desk-scale setup

/// Grid length for the desk-scale synthetic experiments.
pub const DESK_LEN: usize = 512;

/// 50 classes x 6 samples, cubic baselines and noise on.
pub fn desk_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_classes: 50,
        samples_per_class: 6,
        baseline_degree: Some(3),
        noise_sigma: 0.02,
        grid: Grid::new(150.0, 1200.0, DESK_LEN).unwrap(),
        seed,
        ..SynthConfig::default()
    }
}

/// Training settings for the small synthetic sets: smaller batches and a
/// higher step size than the defaults, which are sized for thousands of pairs
/// per epoch.
pub fn desk_train() -> TrainConfig {
    TrainConfig { batch_size: 16, base_lr: 3e-3, patience: 10, ..TrainConfig::default() }
}

/// Shift bound of 4 bins on the 512-point grid, about the width of a
/// synthetic peak.
pub fn desk_augment() -> AugmentPolicy {
    AugmentPolicy::new(4, 0.02, (0.9, 1.1)).unwrap()
}
