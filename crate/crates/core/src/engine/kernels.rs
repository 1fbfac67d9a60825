//! Dense-layer kernels for every weight representation.
//!
//! Inputs are `[B, N]` row-major, outputs `[B, M]`. Kernels that iterate a
//! bitmap work on batch columns: activations are transposed to `[N, B]` so
//! each surviving weight does one contiguous multiply-add over the batch.

use half::f16;

use crate::error::{Error, Result};
use crate::model::DenseLayer;
use crate::store::{Bitmap, Values, WeightStore};
use crate::tensor::ops::{axpy, dense_row};
use crate::tensor::Tensor;

/// Work done by one or more kernel invocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates actually issued.
    pub macs: u64,
    /// Weight, activation and output bytes read or written.
    pub bytes_touched: u64,
}

impl Counters {
    pub fn add(&mut self, other: Counters) {
        self.macs += other.macs;
        self.bytes_touched += other.bytes_touched;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    ConvF32,
    DenseF32,
    DenseF16,
    Sparse,
    Quantized,
    SparseQuantized,
    ClusteredGather,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::ConvF32 => "conv-f32",
            KernelKind::DenseF32 => "dense-f32",
            KernelKind::DenseF16 => "dense-f16",
            KernelKind::Sparse => "sparse",
            KernelKind::Quantized => "quantized",
            KernelKind::SparseQuantized => "sparse-quantized",
            KernelKind::ClusteredGather => "clustered-gather",
        }
    }
}

/// Activation quantization of one sample: `x ≈ (q - zero_point) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicQuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

/// Asymmetric int8 quantization of `x` over its observed range widened to
/// include zero, so zero is always exact. Returns centered integers
/// `q - zero_point`.
pub fn quantize_activations(x: &[f32]) -> (Vec<i32>, DynamicQuantParams) {
    let (lo, hi) = x
        .iter()
        .fold((0.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return (
            vec![0; x.len()],
            DynamicQuantParams {
                scale: 1.0,
                zero_point: 0,
            },
        );
    }
    // 254 steps keep round(lo/s)..round(hi/s) inside 256 codes without clamping
    let scale = (hi - lo) / 254.0;
    let lo_code = (lo / scale).round() as i32;
    let zero_point = (-128 - lo_code).clamp(-128, 127);
    let centered = x
        .iter()
        .map(|&v| ((v / scale).round() as i32).clamp(-128 - zero_point, 127 - zero_point))
        .collect();
    (
        centered,
        DynamicQuantParams {
            scale,
            zero_point: zero_point as i8,
        },
    )
}

#[derive(Clone, Debug)]
enum Repr {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Sparse { mask: Bitmap, values: Vec<f32> },
    Quantized { q: Vec<i8>, scale: f32 },
    SparseQuantized { mask: Bitmap, q: Vec<i8>, scale: f32 },
    Clustered { table: Vec<f32>, indices: Vec<u16> },
}

/// A dense layer prepared for execution with the kernel matching its store.
#[derive(Clone, Debug)]
pub struct DenseKernel {
    inputs: usize,
    outputs: usize,
    bias: Vec<f32>,
    repr: Repr,
}

impl DenseKernel {
    pub fn new(layer: &DenseLayer, force_dense: bool) -> Result<Self> {
        Self::from_store(&layer.weights, layer.inputs, layer.outputs, &layer.bias, force_dense)
    }

    /// With `force_dense`, sparse stores are materialized with explicit zeros
    /// and run through the plain dense kernel of the same precision.
    pub fn from_store(
        store: &WeightStore,
        inputs: usize,
        outputs: usize,
        bias: &[f32],
        force_dense: bool,
    ) -> Result<Self> {
        if store.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::shape(
                "dense kernel",
                format!(
                    "{} weights and {} biases for a {inputs}x{outputs} layer",
                    store.len(),
                    bias.len()
                ),
            ));
        }
        store.validate()?;
        let repr = match store {
            WeightStore::DenseF32(w) => Repr::F32(w.clone()),
            WeightStore::DenseF16(w) => Repr::F16(w.clone()),
            WeightStore::QuantizedI8 { values, scale } => Repr::Quantized {
                q: values.clone(),
                scale: *scale,
            },
            WeightStore::SparseBitmap { mask, values } => match (values, force_dense) {
                (Values::I8 { q, scale }, false) => Repr::SparseQuantized {
                    mask: mask.clone(),
                    q: q.clone(),
                    scale: *scale,
                },
                (Values::I8 { q, scale }, true) => {
                    let mut dense = vec![0i8; mask.len()];
                    for (p, &v) in mask.iter_ones().zip(q) {
                        dense[p] = v;
                    }
                    Repr::Quantized { q: dense, scale: *scale }
                }
                (Values::F16(h), true) => {
                    let mut dense = vec![f16::ZERO; mask.len()];
                    for (p, &v) in mask.iter_ones().zip(h) {
                        dense[p] = v;
                    }
                    Repr::F16(dense)
                }
                (_, true) => Repr::F32(store.to_f32()),
                (v, false) => Repr::Sparse {
                    mask: mask.clone(),
                    values: v.to_f32(),
                },
            },
            WeightStore::Clustered { centroids, indices } => Repr::Clustered {
                table: centroids.to_f32(),
                indices: indices.unpack().into_iter().map(|i| i as u16).collect(),
            },
        };
        Ok(Self {
            inputs,
            outputs,
            bias: bias.to_vec(),
            repr,
        })
    }

    pub fn kind(&self) -> KernelKind {
        match self.repr {
            Repr::F32(_) => KernelKind::DenseF32,
            Repr::F16(_) => KernelKind::DenseF16,
            Repr::Sparse { .. } => KernelKind::Sparse,
            Repr::Quantized { .. } => KernelKind::Quantized,
            Repr::SparseQuantized { .. } => KernelKind::SparseQuantized,
            Repr::Clustered { .. } => KernelKind::ClusteredGather,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Runs the layer on `x: [batch, inputs]`.
    pub fn apply(&self, x: &[f32], batch: usize, counters: &mut Counters) -> Result<Vec<f32>> {
        let (n, m) = (self.inputs, self.outputs);
        if x.len() != batch * n || batch == 0 {
            return Err(Error::shape(
                "dense kernel",
                format!("{} activations for batch {batch} of {n} inputs", x.len()),
            ));
        }
        let act_bytes = 4 * (batch * (n + m)) as u64;
        let out = match &self.repr {
            Repr::F32(w) => {
                let mut out = vec![0.0; batch * m];
                for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
                    dense_row(row, w, &self.bias, o);
                }
                counters.macs += (batch * n * m) as u64;
                counters.bytes_touched += (4 * n * m) as u64 + act_bytes;
                out
            }
            Repr::F16(w) => {
                let out = expand_rows(x, batch, n, &self.bias, |i, row| {
                    for (r, h) in row.iter_mut().zip(&w[i * m..(i + 1) * m]) {
                        *r = h.to_f32();
                    }
                });
                counters.macs += (batch * n * m) as u64;
                counters.bytes_touched += (2 * n * m) as u64 + act_bytes;
                out
            }
            Repr::Clustered { table, indices } => {
                let out = expand_rows(x, batch, n, &self.bias, |i, row| {
                    for (r, &c) in row.iter_mut().zip(&indices[i * m..(i + 1) * m]) {
                        *r = table[c as usize];
                    }
                });
                counters.macs += (batch * n * m) as u64;
                counters.bytes_touched += (2 * n * m + 4 * table.len()) as u64 + act_bytes;
                out
            }
            Repr::Sparse { mask, values } => {
                let out = sparse_f32(mask, values, &self.bias, x, batch, n, m);
                counters.macs += (values.len() * batch) as u64;
                counters.bytes_touched += (mask.byte_len() + 4 * values.len()) as u64 + act_bytes;
                out
            }
            Repr::Quantized { q, scale } => {
                let out = quantized(q, *scale, &self.bias, x, batch, n, m);
                counters.macs += (batch * n * m) as u64;
                counters.bytes_touched += (n * m + 4) as u64 + act_bytes;
                out
            }
            Repr::SparseQuantized { mask, q, scale } => {
                let out = sparse_quantized(mask, q, *scale, &self.bias, x, batch, n, m);
                counters.macs += (q.len() * batch) as u64;
                counters.bytes_touched += (mask.byte_len() + q.len() + 4) as u64 + act_bytes;
                out
            }
        };
        Ok(out)
    }
}

/// Dense compute over rows produced on the fly. The per-output summation
/// order is that of [`dense_row`], so the result is bitwise equal to dense
/// compute on the expanded weights.
fn expand_rows(
    x: &[f32],
    batch: usize,
    n: usize,
    bias: &[f32],
    mut fill: impl FnMut(usize, &mut [f32]),
) -> Vec<f32> {
    let m = bias.len();
    let mut out: Vec<f32> = bias.iter().copied().cycle().take(batch * m).collect();
    let mut row = vec![0.0; m];
    for i in 0..n {
        fill(i, &mut row);
        for b in 0..batch {
            let xi = x[b * n + i];
            if xi != 0.0 {
                axpy(xi, &row, &mut out[b * m..(b + 1) * m]);
            }
        }
    }
    out
}

fn transpose<T: Copy + Default>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::default(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// Calls `f(j, k)` for every set bit of row `i` of a row-major `[n, m]`
/// mask, where `k` is the bit's rank in the whole mask. `k0` is the rank of
/// the row's first bit; returns the rank after the row.
#[inline(always)]
fn row_nonzeros(words: &[u64], i: usize, m: usize, k0: usize, mut f: impl FnMut(usize, usize)) -> usize {
    let (start, end) = (i * m, (i + 1) * m);
    let mut k = k0;
    let mut p = start;
    while p < end {
        let bit = p % 64;
        let span = (64 - bit).min(end - p);
        let mut word = words[p / 64] >> bit;
        if span < 64 {
            word &= (1u64 << span) - 1;
        }
        let base = p - start;
        while word != 0 {
            f(base + word.trailing_zeros() as usize, k);
            k += 1;
            word &= word - 1;
        }
        p += span;
    }
    k
}

fn row_popcount(words: &[u64], i: usize, m: usize) -> usize {
    row_nonzeros(words, i, m, 0, |_, _| {})
}

fn sparse_f32(mask: &Bitmap, values: &[f32], bias: &[f32], x: &[f32], batch: usize, n: usize, m: usize) -> Vec<f32> {
    let words = mask.words();
    let mut k = 0;
    if batch == 1 {
        let mut y = bias.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                k += row_popcount(words, i, m);
                continue;
            }
            k = row_nonzeros(words, i, m, k, |j, k| y[j] += xi * values[k]);
        }
        return y;
    }
    let xt = transpose(x, batch, n);
    let mut yt = vec![0.0f32; m * batch];
    for (j, col) in yt.chunks_exact_mut(batch).enumerate() {
        col.fill(bias[j]);
    }
    for i in 0..n {
        let xrow = &xt[i * batch..(i + 1) * batch];
        k = row_nonzeros(words, i, m, k, |j, k| {
            axpy(values[k], xrow, &mut yt[j * batch..(j + 1) * batch]);
        });
    }
    transpose(&yt, m, batch)
}

fn quantize_batch(x: &[f32], batch: usize, n: usize) -> (Vec<i32>, Vec<f32>) {
    let mut centered = Vec::with_capacity(batch * n);
    let mut scales = Vec::with_capacity(batch);
    for row in x.chunks_exact(n) {
        let (c, p) = quantize_activations(row);
        centered.extend_from_slice(&c);
        scales.push(p.scale);
    }
    (centered, scales)
}

#[inline]
fn dequantize_output(acc: i32, act_scale: f32, weight_scale: f32, bias: f32) -> f32 {
    acc as f32 * (act_scale * weight_scale) + bias
}

fn quantized(q: &[i8], scale: f32, bias: &[f32], x: &[f32], batch: usize, n: usize, m: usize) -> Vec<f32> {
    let (xc, sx) = quantize_batch(x, batch, n);
    let mut out = vec![0.0; batch * m];
    let mut acc = vec![0i32; m];
    for b in 0..batch {
        acc.fill(0);
        for i in 0..n {
            let c = xc[b * n + i];
            if c != 0 {
                for (a, &w) in acc.iter_mut().zip(&q[i * m..(i + 1) * m]) {
                    *a += c * w as i32;
                }
            }
        }
        for j in 0..m {
            out[b * m + j] = dequantize_output(acc[j], sx[b], scale, bias[j]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn sparse_quantized(
    mask: &Bitmap,
    q: &[i8],
    scale: f32,
    bias: &[f32],
    x: &[f32],
    batch: usize,
    n: usize,
    m: usize,
) -> Vec<f32> {
    let (xc, sx) = quantize_batch(x, batch, n);
    let xct = transpose(&xc, batch, n);
    let words = mask.words();
    let mut acc = vec![0i32; m * batch];
    let mut k = 0;
    for i in 0..n {
        let xrow = &xct[i * batch..(i + 1) * batch];
        if xrow.iter().all(|&c| c == 0) {
            k += row_popcount(words, i, m);
            continue;
        }
        k = row_nonzeros(words, i, m, k, |j, k| {
            let w = q[k] as i32;
            for (a, &c) in acc[j * batch..(j + 1) * batch].iter_mut().zip(xrow) {
                *a += w * c;
            }
        });
    }
    let mut out = vec![0.0; batch * m];
    for b in 0..batch {
        for j in 0..m {
            out[b * m + j] = dequantize_output(acc[j * batch + b], sx[b], scale, bias[j]);
        }
    }
    out
}

fn run_checked(
    store: &WeightStore,
    expected: KernelKind,
    bias: &[f32],
    input: &Tensor<f32>,
) -> Result<(Tensor<f32>, Counters)> {
    let [batch, n] = match *input.shape() {
        [b, n] => [b, n],
        ref s => return Err(Error::shape("matvec", format!("expected [B, N] input, got {s:?}"))),
    };
    let m = bias.len();
    if n == 0 || store.len() % n != 0 || store.len() / n != m {
        return Err(Error::shape(
            "matvec",
            format!("{} weights cannot map {n} inputs to {m} outputs", store.len()),
        ));
    }
    let kernel = DenseKernel::from_store(store, n, m, bias, false)?;
    if kernel.kind() != expected {
        return Err(Error::InvalidConfig(format!(
            "{:?} store runs on the {} kernel, not {}",
            store.tag(),
            kernel.kind().name(),
            expected.name()
        )));
    }
    let mut counters = Counters::default();
    let out = kernel.apply(input.data(), batch, &mut counters)?;
    Ok((Tensor::new(vec![batch, m], out)?, counters))
}

/// Skips pruned weights via the bitmap.
pub fn sparse_dense_matvec(store: &WeightStore, bias: &[f32], input: &Tensor<f32>) -> Result<(Tensor<f32>, Counters)> {
    run_checked(store, KernelKind::Sparse, bias, input)
}

/// Int8 weights times dynamically quantized int8 activations.
pub fn dynamic_quant_matvec(store: &WeightStore, bias: &[f32], input: &Tensor<f32>) -> Result<(Tensor<f32>, Counters)> {
    run_checked(store, KernelKind::Quantized, bias, input)
}

/// Integer accumulation over surviving int8 weights only.
pub fn sparse_quant_matvec(store: &WeightStore, bias: &[f32], input: &Tensor<f32>) -> Result<(Tensor<f32>, Counters)> {
    run_checked(store, KernelKind::SparseQuantized, bias, input)
}

/// Centroid lookup followed by dense compute.
pub fn clustered_gather_matvec(store: &WeightStore, bias: &[f32], input: &Tensor<f32>) -> Result<(Tensor<f32>, Counters)> {
    run_checked(store, KernelKind::ClusteredGather, bias, input)
}
