//! Forward operators and their vector-Jacobian products.
//!
//! Convolutions are fixed at 3x3 kernels, stride 1, padding 1. All reductions
//! run in a fixed order so identical inputs give bitwise-identical outputs.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside batch normalization.
pub const BN_EPSILON: f64 = 1e-3;

/// Momentum applied to running statistics in training mode.
pub const BN_MOMENTUM: f64 = 0.99;

/// Fixed-order dot product over eight interleaved partial sums.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::shape(op, format!("expected rank-2 tensor, got {s:?}"))),
    }
}

/// Valid output index range along one axis for a kernel offset `d` in {-1,0,1}.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len - 1 } else { len };
    (lo, hi)
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<([usize; 4], [usize; 4])> {
    let x = dims4(input, "conv2d")?;
    let k = dims4(kernel, "conv2d")?;
    if k[2] != 3 || k[3] != 3 {
        return Err(Error::shape("conv2d", format!("kernel must be 3x3, got {k:?}")));
    }
    if k[1] != x[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", x[1], k[1]),
        ));
    }
    Ok((x, k))
}

/// Same-padded 3x3 cross-correlation. `input` is `[B,C,H,W]`, `kernel` is
/// `[F,C,3,3]`, `bias` is `[F]`; the result is `[B,F,H,W]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ([b, c, h, w], [f, ..]) = check_conv(input, kernel)?;
    if bias.len() != f {
        return Err(Error::shape("conv2d", format!("bias has {} values, need {f}", bias.len())));
    }
    let plane = h * w;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![T::zero(); b * f * plane];
    for bi in 0..b {
        for fi in 0..f {
            let o = &mut out[(bi * f + fi) * plane..][..plane];
            o.fill(bias.data()[fi]);
            for ci in 0..c {
                let src = &x[(bi * c + ci) * plane..][..plane];
                let taps = &k[(fi * c + ci) * 9..][..9];
                accumulate_shifted(src, taps, o, h, w);
            }
        }
    }
    Tensor::new(vec![b, f, h, w], out)
}

/// `dst[y][x] += sum_k taps[k] * src[y+dy][x+dx]` over the 3x3 neighborhood.
#[inline]
fn accumulate_shifted<T: Scalar>(src: &[T], taps: &[T], dst: &mut [T], h: usize, w: usize) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        let (y0, y1) = span(h, dy);
        for kx in 0..3 {
            let wt = taps[ky * 3 + kx];
            if wt == T::zero() {
                continue;
            }
            let dx = kx as isize - 1;
            let (x0, x1) = span(w, dx);
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                axpy(wt, s, &mut dst[y * w + x0..y * w + x1]);
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ([b, c, h, w], [f, ..]) = check_conv(input, kernel)?;
    if grad_out.shape() != [b, f, h, w] {
        return Err(Error::shape("conv2d_backward", format!("{:?}", grad_out.shape())));
    }
    let plane = h * w;
    let (x, k, g) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); f];

    for bi in 0..b {
        for fi in 0..f {
            let go = &g[(bi * f + fi) * plane..][..plane];
            gb[fi] = gb[fi] + go.iter().copied().sum::<T>();
            for ci in 0..c {
                let src = &x[(bi * c + ci) * plane..][..plane];
                let gsrc = &mut gx[(bi * c + ci) * plane..][..plane];
                let taps = &k[(fi * c + ci) * 9..][..9];
                let gtaps = &mut gk[(fi * c + ci) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(w, dx);
                        let wt = taps[ky * 3 + kx];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let soff = sy * w + (x0 as isize + dx) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            acc = acc + dot(grow, &src[soff..soff + (x1 - x0)]);
                            axpy(wt, grow, &mut gsrc[soff..soff + (x1 - x0)]);
                        }
                        gtaps[ky * 3 + kx] = gtaps[ky * 3 + kx] + acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![f], gb)?,
    ))
}

/// `input · weights + bias` for `input: [B,N]`, `weights: [N,M]`, `bias: [M]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, n] = dims2(input, "dense")?;
    let [wn, m] = dims2(weights, "dense")?;
    if wn != n || bias.len() != m {
        return Err(Error::shape(
            "dense",
            format!(
                "input {:?}, weights {:?}, bias {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![T::zero(); b * m];
    for (row, o) in input.data().chunks_exact(n).zip(out.chunks_exact_mut(m)) {
        dense_row(row, weights.data(), bias.data(), o);
    }
    Tensor::new(vec![b, m], out)
}

/// One output row of a dense layer; the reference summation order shared by
/// the inference engine's dense kernels.
#[inline]
pub(crate) fn dense_row<T: Scalar>(x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let m = out.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, &w[i * m..(i + 1) * m], out);
        }
    }
}

/// Gradients of [`dense`] with respect to input, weights and bias.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, n] = dims2(input, "dense_backward")?;
    let [_, m] = dims2(weights, "dense_backward")?;
    if grad_out.shape() != [b, m] {
        return Err(Error::shape("dense_backward", format!("{:?}", grad_out.shape())));
    }
    let (x, wt, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![T::zero(); b * n];
    let mut gw = vec![T::zero(); n * m];
    let mut gb = vec![T::zero(); m];
    for bi in 0..b {
        let grow = &g[bi * m..(bi + 1) * m];
        axpy(T::one(), grow, &mut gb);
        for i in 0..n {
            let wrow = &wt[i * m..(i + 1) * m];
            gx[bi * n + i] = dot(grow, wrow);
            let xi = x[bi * n + i];
            if xi != T::zero() {
                axpy(xi, grow, &mut gw[i * m..(i + 1) * m]);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, n], gx)?,
        Tensor::new(vec![n, m], gw)?,
        Tensor::new(vec![m], gb)?,
    ))
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor {
        shape: output.shape().to_vec(),
        data,
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape().to_vec(),
        data,
    })
}

/// Mean of squared elementwise differences.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / T::from_usize(pred.len()).unwrap())
}

pub fn mse_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, grad: T) -> Tensor<T> {
    let scale = grad * T::lit(2.0) / T::from_usize(pred.len()).unwrap();
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Tensor {
        shape: pred.shape().to_vec(),
        data,
    }
}

/// Per-channel affine and statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Saved values from a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub normalized: Tensor<T>,
}

fn check_bn<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<[usize; 4]> {
    let d = dims4(input, "batch_norm")?;
    if d[0] == 0 {
        return Err(Error::Empty("batch_norm batch"));
    }
    if d[1] != channels {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {} channels, params {channels}", d[1]),
        ));
    }
    Ok(d)
}

/// Batch normalization over `[B,C,H,W]`.
///
/// In training mode the batch statistics are used and folded into the running
/// statistics with momentum [`BN_MOMENTUM`]; the biased batch variance is used
/// for both.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Infer => batch_norm_infer(input, params),
        BnMode::Train => {
            let (out, cache) = batch_norm_train(input, &params.scale, &params.shift)?;
            let mom = T::lit(BN_MOMENTUM);
            for c in 0..params.channels() {
                params.running_mean[c] = mom * params.running_mean[c] + (T::one() - mom) * cache.mean[c];
                params.running_var[c] = mom * params.running_var[c] + (T::one() - mom) * cache.var[c];
            }
            Ok(out)
        }
    }
}

pub fn batch_norm_infer<T: Scalar>(input: &Tensor<T>, params: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_bn(input, params.channels())?;
    let plane = h * w;
    let eps = T::lit(BN_EPSILON);
    let mut out = input.data().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::one() / (params.running_var[ci] + eps).sqrt();
            let a = params.scale[ci] * inv;
            let s = params.shift[ci] - a * params.running_mean[ci];
            for v in &mut out[(bi * c + ci) * plane..][..plane] {
                *v = a * *v + s;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Training-mode normalization without touching running statistics.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [b, c, h, w] = check_bn(input, scale.len())?;
    let plane = h * w;
    let count = T::from_usize(b * plane).unwrap();
    let x = input.data();
    let eps = T::lit(BN_EPSILON);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s = s + x[(bi * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for bi in 0..b {
            q = q + x[(bi * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
        mean[ci] = m;
        var[ci] = q / count;
    }
    let mut norm = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::one() / (var[ci] + eps).sqrt();
            let off = (bi * c + ci) * plane;
            for i in off..off + plane {
                norm[i] = (x[i] - mean[ci]) * inv;
                out[i] = scale[ci] * norm[i] + shift[ci];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            mean,
            var,
            normalized: Tensor::new(shape, norm)?,
        },
    ))
}

/// Gradients of training-mode batch normalization with respect to the input,
/// the scale and the shift.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    scale: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [b, c, h, w] = dims4(grad_out, "batch_norm_backward")?;
    let plane = h * w;
    let count = T::from_usize(b * plane).unwrap();
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let eps = T::lit(BN_EPSILON);
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ci in 0..c {
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            gshift[ci] = gshift[ci] + g[off..off + plane].iter().copied().sum::<T>();
            gscale[ci] = gscale[ci] + dot(&g[off..off + plane], &xh[off..off + plane]);
        }
    }
    let mut gx = vec![T::zero(); g.len()];
    for ci in 0..c {
        let inv = T::one() / (cache.var[ci] + eps).sqrt();
        let k = scale[ci] * inv / count;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for i in off..off + plane {
                gx[i] = k * (count * g[i] - gshift[ci] - xh[i] * gscale[ci]);
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), gx)?, gscale, gshift))
}
