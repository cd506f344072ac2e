//! Forward and backward kernels for each layer kind.

use super::{Padding, Real, Tensor};
use crate::error::{Error, Result};

/// Dot product with eight independent accumulators; the summation order is
/// fixed, so results are reproducible, and the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Sum with eight independent accumulators so it vectorizes.
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let mut tail = T::zero();
    for v in chunks.remainder() {
        tail += *v;
    }
    for x in chunks {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `sum (a_i - mean)^2`, vectorizable like [`sum`].
fn sq_dev_sum<T: Real>(a: &[T], mean: T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let mut tail = T::zero();
    for v in chunks.remainder() {
        tail += (*v - mean) * (*v - mean);
    }
    for x in chunks {
        for k in 0..8 {
            let d = x[k] - mean;
            acc[k] += d * d;
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn pad_amounts(kernel: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let left = (kernel - 1) / 2;
            (left, kernel - 1 - left)
        }
    }
}

pub fn conv_out_len(len: usize, kernel: usize, padding: Padding) -> Option<usize> {
    let (l, r) = pad_amounts(kernel, padding);
    (len + l + r).checked_sub(kernel).map(|v| v + 1)
}

fn check_conv(x: &Tensor<impl Real>, w_len: usize, b_len: usize, filters: usize, kernel: usize) -> Result<()> {
    let c = x.channels();
    if kernel == 0 || filters == 0 {
        return Err(Error::ShapeMismatch("conv needs filters >= 1 and kernel >= 1".into()));
    }
    if w_len != filters * c * kernel || b_len != filters {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {w_len} / bias {b_len} do not fit {filters} filters x {c} channels x kernel {kernel}"
        )));
    }
    Ok(())
}

/// Filters and output positions per register block of [`correlate`].
const FILTER_BLOCK: usize = 4;
const LANE_BLOCK: usize = 16;

/// Copies one sample's rows into zero-padded rows of length
/// `left + len + right`.
fn pad_rows<T: Real>(x: &[T], chans: usize, len: usize, left: usize, right: usize) -> Vec<T> {
    let plen = left + len + right;
    let mut out = vec![T::zero(); chans * plen];
    for c in 0..chans {
        out[c * plen + left..c * plen + left + len].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

/// `out[m][i] += sum_c sum_k w[m][c][k] * xp[c][i + k]` for `i < out_len`,
/// where `xp` holds `chans` rows of `xp_len >= out_len + kernel - 1`.
#[allow(clippy::too_many_arguments)]
fn correlate<T: Real>(
    xp: &[T],
    xp_len: usize,
    chans: usize,
    w: &[T],
    filters: usize,
    kernel: usize,
    out: &mut [T],
    out_len: usize,
) {
    let mut m = 0;
    while m + FILTER_BLOCK <= filters {
        correlate_block::<T, FILTER_BLOCK>(xp, xp_len, chans, w, m, kernel, out, out_len);
        m += FILTER_BLOCK;
    }
    while m < filters {
        correlate_block::<T, 1>(xp, xp_len, chans, w, m, kernel, out, out_len);
        m += 1;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn correlate_block<T: Real, const F: usize>(
    xp: &[T],
    xp_len: usize,
    chans: usize,
    w: &[T],
    m0: usize,
    kernel: usize,
    out: &mut [T],
    out_len: usize,
) {
    let ck = chans * kernel;
    let ws: [&[T]; F] = std::array::from_fn(|f| &w[(m0 + f) * ck..(m0 + f + 1) * ck]);
    let mut i0 = 0;
    while i0 + LANE_BLOCK <= out_len {
        let mut acc = [[T::zero(); LANE_BLOCK]; F];
        for c in 0..chans {
            let xr = &xp[c * xp_len + i0..];
            for k in 0..kernel {
                let xs: &[T; LANE_BLOCK] = xr[k..k + LANE_BLOCK].try_into().unwrap();
                for f in 0..F {
                    let wv = ws[f][c * kernel + k];
                    for j in 0..LANE_BLOCK {
                        acc[f][j] += wv * xs[j];
                    }
                }
            }
        }
        for (f, a) in acc.iter().enumerate() {
            let row = &mut out[(m0 + f) * out_len + i0..(m0 + f) * out_len + i0 + LANE_BLOCK];
            for (o, v) in row.iter_mut().zip(a) {
                *o += *v;
            }
        }
        i0 += LANE_BLOCK;
    }
    for f in 0..F {
        for i in i0..out_len {
            let mut acc = T::zero();
            for c in 0..chans {
                let xr = &xp[c * xp_len + i..];
                for k in 0..kernel {
                    acc += ws[f][c * kernel + k] * xr[k];
                }
            }
            out[(m0 + f) * out_len + i] += acc;
        }
    }
}

/// Cross-correlation, stride 1: `out[b,m,i] = bias[m] + sum_{c,k} w[m,c,k] x[b,c,i+k-left]`
/// with zero padding outside the signal. Weights are laid out `[m][c][k]`.
pub fn conv1d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    filters: usize,
    kernel: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_conv(x, weight.len(), bias.len(), filters, kernel)?;
    let [batch, chans, len] = x.shape();
    let out_len = conv_out_len(len, kernel, padding)
        .filter(|&l| l > 0)
        .ok_or_else(|| Error::ShapeMismatch(format!("kernel {kernel} longer than input {len}")))?;
    let (left, right) = pad_amounts(kernel, padding);
    let mut out = Tensor::zeros([batch, filters, out_len]);
    for b in 0..batch {
        let xp = pad_rows(x.sample(b), chans, len, left, right);
        let ob = &mut out.data_mut()[b * filters * out_len..(b + 1) * filters * out_len];
        for m in 0..filters {
            ob[m * out_len..(m + 1) * out_len].fill(bias[m]);
        }
        correlate(&xp, left + len + right, chans, weight, filters, kernel, ob, out_len);
    }
    Ok(out)
}

/// `gw[m][c][k] += sum_i g[m][i] * xp[c][i + k]`. Works on the transposed
/// upstream gradient so the filter axis is contiguous and each step is an
/// outer-product update of a register block.
#[allow(clippy::too_many_arguments)]
fn weight_grad<T: Real>(
    g: &[T],
    out_len: usize,
    filters: usize,
    xp: &[T],
    xp_len: usize,
    chans: usize,
    kernel: usize,
    gw: &mut [T],
) {
    let mut gt = vec![T::zero(); g.len()];
    for m in 0..filters {
        for i in 0..out_len {
            gt[i * filters + m] = g[m * out_len + i];
        }
    }
    let ck = chans * kernel;
    let col = |j: usize| (j / kernel) * xp_len + j % kernel;
    let mut m = 0;
    while m < filters {
        let mb = if m + 16 <= filters {
            16
        } else if m + 8 <= filters {
            8
        } else {
            1
        };
        let mut j = 0;
        while j < ck {
            if j + 4 <= ck {
                let cols = std::array::from_fn(|q| col(j + q));
                match mb {
                    16 => weight_grad_block::<T, 16, 4>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                    8 => weight_grad_block::<T, 8, 4>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                    _ => weight_grad_block::<T, 1, 4>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                }
                j += 4;
            } else {
                let cols = [col(j)];
                match mb {
                    16 => weight_grad_block::<T, 16, 1>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                    8 => weight_grad_block::<T, 8, 1>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                    _ => weight_grad_block::<T, 1, 1>(&gt, filters, out_len, m, xp, cols, ck, j, gw),
                }
                j += 1;
            }
        }
        m += mb;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn weight_grad_block<T: Real, const MB: usize, const CB: usize>(
    gt: &[T],
    filters: usize,
    out_len: usize,
    m0: usize,
    xp: &[T],
    cols: [usize; CB],
    ck: usize,
    j0: usize,
    gw: &mut [T],
) {
    let mut acc = [[T::zero(); MB]; CB];
    for i in 0..out_len {
        let gv: &[T; MB] = gt[i * filters + m0..i * filters + m0 + MB].try_into().unwrap();
        for q in 0..CB {
            let xv = xp[cols[q] + i];
            for l in 0..MB {
                acc[q][l] += xv * gv[l];
            }
        }
    }
    for q in 0..CB {
        for l in 0..MB {
            gw[(m0 + l) * ck + j0 + q] += acc[q][l];
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    filters: usize,
    kernel: usize,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let [batch, chans, len] = x.shape();
    let out_len = grad_out.len();
    if grad_out.batch() != batch || grad_out.channels() != filters || conv_out_len(len, kernel, padding) != Some(out_len) {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream gradient {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let (left, right) = pad_amounts(kernel, padding);
    let xp_len = left + len + right;
    // The input gradient is a correlation of the zero-padded upstream
    // gradient with the channel-transposed, tap-reversed kernel.
    let mut w_t = vec![T::zero(); weight.len()];
    for m in 0..filters {
        for c in 0..chans {
            for k in 0..kernel {
                w_t[(c * filters + m) * kernel + (kernel - 1 - k)] = weight[(m * chans + c) * kernel + k];
            }
        }
    }
    let g_left = kernel - 1 - left;
    let g_right = len + kernel - 1 - g_left - out_len;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); filters];
    for b in 0..batch {
        let g = grad_out.sample(b);
        let xp = pad_rows(x.sample(b), chans, len, left, right);
        for m in 0..filters {
            let gr = &g[m * out_len..(m + 1) * out_len];
            gb[m] += sum(gr);
        }
        weight_grad(g, out_len, filters, &xp, xp_len, chans, kernel, &mut gw);
        let gp = pad_rows(g, filters, out_len, g_left, g_right);
        let gxb = &mut gx.data_mut()[b * chans * len..(b + 1) * chans * len];
        correlate(&gp, g_left + out_len + g_right, filters, &w_t, chans, kernel, gxb, len);
    }
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}

/// Cached quantities of a train-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-N) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

fn check_bn<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.channels() || beta.len() != x.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch-norm has {} channels, input has {}",
            gamma.len(),
            x.channels()
        )));
    }
    Ok(())
}

/// Normalizes each channel by its statistics over (batch, length).
pub fn batchnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    check_bn(x, gamma, beta)?;
    let [batch, chans, len] = x.shape();
    let count = batch * len;
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let n = T::lit(count as f64);
    let mut mean = vec![T::zero(); chans];
    let mut var = vec![T::zero(); chans];
    for c in 0..chans {
        let mut s = T::zero();
        for b in 0..batch {
            s += sum(x.row(b, c));
        }
        mean[c] = s / n;
        let mut ss = T::zero();
        for b in 0..batch {
            ss += sq_dev_sum(x.row(b, c), mean[c]);
        }
        var[c] = ss / n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for b in 0..batch {
        for c in 0..chans {
            let (m, s, g, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (h, o) in x_hat.row_mut(b, c).iter_mut().zip(y.row_mut(b, c)) {
                *h = (*h - m) * s;
                *o = g * *h + be;
            }
        }
    }
    Ok((y, BatchNormCache { x_hat, inv_std }, BatchStats { mean, var, count }))
}

pub fn batchnorm_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    check_bn(x, gamma, beta)?;
    let mut y = x.clone();
    for b in 0..y.batch() {
        for c in 0..y.channels() {
            let scale = gamma[c] / (running_var[c] + eps).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            for v in y.row_mut(b, c) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Full train-mode gradient, including the dependence of the batch mean and
/// variance on every input.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [batch, chans, len] = cache.x_hat.shape();
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::ShapeMismatch("batch-norm upstream gradient shape".into()));
    }
    let n = T::lit((batch * len) as f64);
    let mut dgamma = vec![T::zero(); chans];
    let mut dbeta = vec![T::zero(); chans];
    for b in 0..batch {
        for c in 0..chans {
            let g = grad_out.row(b, c);
            dbeta[c] += sum(g);
            dgamma[c] += dot(g, cache.x_hat.row(b, c));
        }
    }
    let mut gx = Tensor::zeros(cache.x_hat.shape());
    for b in 0..batch {
        for c in 0..chans {
            let k = gamma[c] * cache.inv_std[c] / n;
            let xh = cache.x_hat.row(b, c);
            let g = grad_out.row(b, c);
            for ((o, &gi), &xi) in gx.row_mut(b, c).iter_mut().zip(g).zip(xh) {
                *o = k * (n * gi - dbeta[c] - xi * dgamma[c]);
            }
        }
    }
    Ok((gx, dgamma, dbeta))
}

pub fn leakyrelu_forward<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
    y
}

pub fn leakyrelu_backward<T: Real>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
        if xi < T::zero() {
            *gi = *gi * slope;
        }
    }
    g
}

pub fn pool_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > len {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// Max over each window; `argmax` holds the input position (within the row)
/// of each output, ties resolved to the lowest position.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [batch, chans, len] = x.shape();
    let out_len = pool_out_len(len, kernel, stride).ok_or_else(|| {
        Error::ShapeMismatch(format!("max-pool kernel {kernel} stride {stride} on length {len}"))
    })?;
    let mut out = Tensor::zeros([batch, chans, out_len]);
    let mut argmax = vec![0usize; batch * chans * out_len];
    for (r, (orow, arow)) in out.data_mut().chunks_exact_mut(out_len).zip(argmax.chunks_exact_mut(out_len)).enumerate() {
        let xr = &x.data()[r * len..(r + 1) * len];
        for (i, (o, a)) in orow.iter_mut().zip(arow).enumerate() {
            let start = i * stride;
            let mut best = start;
            for j in start + 1..start + kernel {
                if xr[j] > xr[best] {
                    best = j;
                }
            }
            *o = xr[best];
            *a = best;
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(in_shape: [usize; 3], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.data().len() {
        return Err(Error::ShapeMismatch("max-pool routing table".into()));
    }
    let mut gx = Tensor::zeros(in_shape);
    let out_len = grad_out.len();
    for b in 0..grad_out.batch() {
        for c in 0..grad_out.channels() {
            let g = grad_out.row(b, c);
            let base = (b * grad_out.channels() + c) * out_len;
            let gxr = gx.row_mut(b, c);
            for (i, &gi) in g.iter().enumerate() {
                gxr[argmax[base + i]] += gi;
            }
        }
    }
    Ok(gx)
}

/// `out = x W + b` with `x` as `(batch, features, 1)` and `W` laid out
/// `[feature][unit]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], units: usize) -> Result<Tensor<T>> {
    let [batch, features, len] = x.shape();
    if len != 1 || weight.len() != features * units || bias.len() != units {
        return Err(Error::ShapeMismatch(format!(
            "dense {features}x{units} (weights {}, bias {}) on input {:?}",
            weight.len(),
            bias.len(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros([batch, units, 1]);
    for b in 0..batch {
        let xr = x.sample(b);
        let o = &mut out.data_mut()[b * units..(b + 1) * units];
        o.copy_from_slice(bias);
        for (f, &xv) in xr.iter().enumerate() {
            axpy(xv, &weight[f * units..(f + 1) * units], o);
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    units: usize,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [batch, features, _] = x.shape();
    if grad_out.shape() != [batch, units, 1] {
        return Err(Error::ShapeMismatch("dense upstream gradient shape".into()));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); units];
    for b in 0..batch {
        let g = grad_out.sample(b);
        let xr = x.sample(b);
        for (u, &gu) in g.iter().enumerate() {
            gb[u] += gu;
        }
        for f in 0..features {
            axpy(xr[f], g, &mut gw[f * units..(f + 1) * units]);
        }
        let gxr = &mut gx.data_mut()[b * features..(b + 1) * features];
        for (f, o) in gxr.iter_mut().enumerate() {
            *o = dot(&weight[f * units..(f + 1) * units], g);
        }
    }
    Ok((gx, gw, gb))
}
