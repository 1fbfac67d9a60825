use std::fs;
use std::path::Path;

use num_complex::Complex64;

use super::ComplexMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CSID";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 4 + 4 + 4;

/// Affine map from physical values onto `[0, 1]`: `n = (v - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub offset: f32,
    pub scale: f32,
}

impl Normalization {
    /// Maps the observed minimum to 0 and maximum to 1. A constant input maps
    /// to 0.5 with scale 1.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { offset: -0.5, scale: 1.0 };
        }
        let scale = (hi - lo) as f32;
        if scale > 0.0 && scale.is_normal() {
            Self { offset: lo as f32, scale }
        } else {
            Self {
                offset: (lo - 0.5) as f32,
                scale: 1.0,
            }
        }
    }

    pub fn normalize(&self, v: f64) -> f32 {
        ((v - self.offset as f64) / self.scale as f64) as f32
    }

    pub fn denormalize(&self, n: f32) -> f64 {
        n as f64 * self.scale as f64 + self.offset as f64
    }
}

/// One normalized, truncated angular-delay matrix stored as two real planes
/// (real, imaginary), shape `[2, rows, antennas]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub data: Tensor<f32>,
    pub norm: Normalization,
}

impl ChannelSample {
    pub fn rows(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn antennas(&self) -> usize {
        self.data.shape()[2]
    }

    /// Undoes the normalization and reassembles the complex matrix.
    pub fn to_complex(&self) -> ComplexMatrix {
        planes_to_complex(self.data.data(), self.rows(), self.antennas(), self.norm)
    }
}

fn planes_to_complex(planes: &[f32], rows: usize, cols: usize, norm: Normalization) -> ComplexMatrix {
    let n = rows * cols;
    let data = (0..n)
        .map(|i| Complex64::new(norm.denormalize(planes[i]), norm.denormalize(planes[n + i])))
        .collect();
    ComplexMatrix::new(rows, cols, data).expect("plane sizes")
}

fn truncated_values(h: &ComplexMatrix, rows: usize) -> impl Iterator<Item = f64> + '_ {
    h.data()[..rows * h.cols()].iter().flat_map(|z| [z.re, z.im])
}

fn write_planes(h: &ComplexMatrix, rows: usize, norm: Normalization, out: &mut Vec<f32>) {
    let kept = &h.data()[..rows * h.cols()];
    out.extend(kept.iter().map(|z| norm.normalize(z.re)));
    out.extend(kept.iter().map(|z| norm.normalize(z.im)));
}

/// Keeps the first `rows` delay rows of one angular-delay matrix and maps it
/// onto `[0, 1]` using its own extremes.
pub fn truncate_and_normalize(h: &ComplexMatrix, rows: usize) -> Result<ChannelSample> {
    if rows == 0 || rows > h.rows() {
        return Err(Error::InvalidConfig(format!(
            "cannot keep {rows} rows of a {}-row matrix",
            h.rows()
        )));
    }
    let norm = Normalization::fit(truncated_values(h, rows));
    let mut data = Vec::with_capacity(2 * rows * h.cols());
    write_planes(h, rows, norm, &mut data);
    Ok(ChannelSample {
        data: Tensor::new(vec![2, rows, h.cols()], data)?,
        norm,
    })
}

/// A batch of samples sharing one dataset-wide normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor<f32>,
    pub norm: Normalization,
}

impl Dataset {
    /// `samples` has shape `[count, 2, rows, antennas]`.
    pub fn new(samples: Tensor<f32>, norm: Normalization) -> Result<Self> {
        match samples.shape() {
            [_, 2, _, _] => Ok(Self { samples, norm }),
            s => Err(Error::shape("dataset", format!("expected [count, 2, rows, cols], got {s:?}"))),
        }
    }

    /// Truncates every matrix and normalizes with the global min/max.
    pub fn from_angular_delay(matrices: &[ComplexMatrix], rows: usize) -> Result<Self> {
        let first = matrices.first().ok_or(Error::Empty("dataset"))?;
        let cols = first.cols();
        for m in matrices {
            if rows == 0 || rows > m.rows() || m.cols() != cols {
                return Err(Error::InvalidConfig(format!(
                    "cannot keep {rows} rows of a {}x{} matrix",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let norm = Normalization::fit(matrices.iter().flat_map(|m| truncated_values(m, rows)));
        let mut data = Vec::with_capacity(matrices.len() * 2 * rows * cols);
        for m in matrices {
            write_planes(m, rows, norm, &mut data);
        }
        Self::new(Tensor::new(vec![matrices.len(), 2, rows, cols], data)?, norm)
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn antennas(&self) -> usize {
        self.samples.shape()[3]
    }

    /// All samples as one `[count, 2, rows, antennas]` tensor.
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> ChannelSample {
        let data = self.samples.slice_batch(i, i + 1).expect("index in range");
        let shape = data.shape()[1..].to_vec();
        ChannelSample {
            data: data.reshape(shape).expect("same length"),
            norm: self.norm,
        }
    }

    /// First `count` samples.
    pub fn take(&self, count: usize) -> Result<Self> {
        Self::new(self.samples.slice_batch(0, count.min(self.len()))?, self.norm)
    }

    /// Splits into `[0, at)` and `[at, len)`, both keeping this normalization.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.len() {
            return Err(Error::InvalidConfig(format!("cannot split {} samples at {at}", self.len())));
        }
        Ok((
            Self::new(self.samples.slice_batch(0, at)?, self.norm)?,
            Self::new(self.samples.slice_batch(at, self.len())?, self.norm)?,
        ))
    }

    /// Physical-scale complex matrices of all samples.
    pub fn to_complex(&self) -> Vec<ComplexMatrix> {
        let (rows, cols) = (self.rows(), self.antennas());
        self.samples
            .data()
            .chunks_exact(2 * rows * cols)
            .map(|p| planes_to_complex(p, rows, cols, self.norm))
            .collect()
    }
}

/// Writes a dataset in the `CSID` format. Returns the number of bytes written.
pub fn export_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = encode_dataset(dataset)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::InvalidConfig(format!("{what} does not fit the dataset header"));
    let ants = u16::try_from(dataset.antennas()).map_err(|_| too_big("antenna count"))?;
    let rows = u16::try_from(dataset.rows()).map_err(|_| too_big("row count"))?;
    let count = u32::try_from(dataset.len()).map_err(|_| too_big("sample count"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * dataset.samples.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&ants.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dataset.norm.offset.to_le_bytes());
    out.extend_from_slice(&dataset.norm.scale.to_le_bytes());
    for v in dataset.samples.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn import_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("dataset header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"CSID\""));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != DATASET_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset version {version} (this build reads {DATASET_VERSION})"),
        ));
    }
    let ants = u16_at(6) as usize;
    let rows = u16_at(8) as usize;
    let count = u32_at(10) as usize;
    if ants == 0 {
        return Err(Error::format(6, "antenna count is zero"));
    }
    if rows == 0 {
        return Err(Error::format(8, "row count is zero"));
    }
    if count == 0 {
        return Err(Error::format(10, "sample count is zero"));
    }
    let offset = f32::from_bits(u32_at(14));
    let scale = f32::from_bits(u32_at(18));
    if !offset.is_finite() || !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::format(14, "normalization offset/scale not usable"));
    }
    let values = count * 2 * rows * ants;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != values * 4 {
        return Err(Error::format(
            (HEADER_LEN + payload.len().min(values * 4)) as u64,
            format!(
                "header declares {count} samples ({} payload bytes) but payload has {} bytes",
                values * 4,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Dataset::new(
        Tensor::new(vec![count, 2, rows, ants], data)?,
        Normalization { offset, scale },
    )
}
