//! Compression states of a layer's weight tensor.

use half::f16;

use crate::error::{Error, Result};

/// Largest magnitude of a symmetric int8 code. -128 is never produced.
pub const I8_LIMIT: f32 = 127.0;

/// Symmetric per-tensor int8 quantization: `scale = max|w| / 127`,
/// `q = clamp(round(w / scale), -127, 127)` rounding half away from zero.
/// An all-zero tensor gets scale 1.
pub fn quantize_symmetric(values: &[f32]) -> (Vec<i8>, f32) {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return (vec![0; values.len()], 1.0);
    }
    let scale = (max as f64 / I8_LIMIT as f64) as f32;
    // The ratio is taken against max rather than the rounded scale so exact
    // halves such as 0.5 * 127 round as written.
    let k = I8_LIMIT as f64 / max as f64;
    let q = values
        .iter()
        .map(|&w| (w as f64 * k).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, scale)
}

pub fn dequantize_symmetric(q: &[i8], scale: f32) -> Vec<f32> {
    q.iter().map(|&v| v as f32 * scale).collect()
}

/// A flat list of weight values in one of the supported number formats.
#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8 { q: Vec<i8>, scale: f32 },
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F16(v) => v.len(),
            Values::I8 { q, .. } => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Values::F32(v) => v.clone(),
            Values::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
            Values::I8 { q, scale } => dequantize_symmetric(q, *scale),
        }
    }

    pub fn to_f16(values: &[f32]) -> Self {
        Values::F16(values.iter().map(|&v| f16::from_f32(v)).collect())
    }

    pub fn quantize(values: &[f32]) -> Self {
        let (q, scale) = quantize_symmetric(values);
        Values::I8 { q, scale }
    }

    /// Serialized payload size: element bytes plus the scale for int8.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Values::F32(v) => 4 * v.len(),
            Values::F16(v) => 2 * v.len(),
            Values::I8 { q, .. } => q.len() + 4,
        }
    }
}

/// One bit per weight position, least-significant bit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    len: usize,
    words: Vec<u64>,
}

impl Bitmap {
    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; len.div_ceil(64)];
        for i in 0..len {
            if f(i) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Positions of set bits in increasing order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + tz)
            })
        })
    }

    pub fn byte_len(&self) -> usize {
        self.len.div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.byte_len());
        out
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::shape("bitmap", format!("{len} bits in {} bytes", bytes.len())));
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        // Bits past `len` must be clear for popcount to mean anything.
        if len % 64 != 0 {
            if let Some(last) = words.last() {
                if last >> (len % 64) != 0 {
                    return Err(Error::shape("bitmap", "padding bits set"));
                }
            }
        }
        Ok(Self { len, words })
    }
}

/// Number of bits needed to store indices below `k`.
pub fn index_bits(k: usize) -> u8 {
    if k <= 1 {
        0
    } else {
        (usize::BITS - (k - 1).leading_zeros()) as u8
    }
}

/// Fixed-width unsigned integers packed least-significant bit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedIndices {
    len: usize,
    bits: u8,
    bytes: Vec<u8>,
}

impl PackedIndices {
    pub fn pack(indices: &[u32], bits: u8) -> Result<Self> {
        let len = indices.len();
        let mut bytes = vec![0u8; (len * bits as usize).div_ceil(8)];
        for (i, &v) in indices.iter().enumerate() {
            if bits < 32 && v >> bits != 0 {
                return Err(Error::Invariant(format!("index {v} does not fit in {bits} bits")));
            }
            let mut pos = i * bits as usize;
            for b in 0..bits {
                if v >> b & 1 == 1 {
                    bytes[pos / 8] |= 1 << (pos % 8);
                }
                pos += 1;
            }
        }
        Ok(Self { len, bits, bytes })
    }

    pub fn from_bytes(len: usize, bits: u8, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != (len * bits as usize).div_ceil(8) {
            return Err(Error::shape("packed_indices", format!("{len}x{bits} bits in {} bytes", bytes.len())));
        }
        Ok(Self { len, bits, bytes })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> u32 {
        let mut pos = i * self.bits as usize;
        let mut v = 0u32;
        for b in 0..self.bits {
            v |= ((self.bytes[pos / 8] >> (pos % 8) & 1) as u32) << b;
            pos += 1;
        }
        v
    }

    pub fn unpack(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

/// Variant tags used by the model file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StoreTag {
    DenseF32 = 0,
    DenseF16 = 1,
    QuantizedI8 = 2,
    SparseF32 = 3,
    SparseF16 = 4,
    SparseI8 = 5,
    ClusteredF32 = 6,
    ClusteredF16 = 7,
    ClusteredI8 = 8,
}

impl StoreTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        use StoreTag::*;
        [
            DenseF32,
            DenseF16,
            QuantizedI8,
            SparseF32,
            SparseF16,
            SparseI8,
            ClusteredF32,
            ClusteredF16,
            ClusteredI8,
        ]
        .into_iter()
        .find(|t| *t as u8 == v)
    }
}

/// The compression state of one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightStore {
    DenseF32(Vec<f32>),
    DenseF16(Vec<f16>),
    QuantizedI8 { values: Vec<i8>, scale: f32 },
    /// Positions with a set bit hold the entries of `values`, in position order;
    /// every other position is exactly zero.
    SparseBitmap { mask: Bitmap, values: Values },
    /// Each weight is `centroids[indices[i]]`.
    Clustered { centroids: Values, indices: PackedIndices },
}

impl WeightStore {
    pub fn len(&self) -> usize {
        match self {
            WeightStore::DenseF32(v) => v.len(),
            WeightStore::DenseF16(v) => v.len(),
            WeightStore::QuantizedI8 { values, .. } => values.len(),
            WeightStore::SparseBitmap { mask, .. } => mask.len(),
            WeightStore::Clustered { indices, .. } => indices.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag(&self) -> StoreTag {
        match self {
            WeightStore::DenseF32(_) => StoreTag::DenseF32,
            WeightStore::DenseF16(_) => StoreTag::DenseF16,
            WeightStore::QuantizedI8 { .. } => StoreTag::QuantizedI8,
            WeightStore::SparseBitmap { values, .. } => match values {
                Values::F32(_) => StoreTag::SparseF32,
                Values::F16(_) => StoreTag::SparseF16,
                Values::I8 { .. } => StoreTag::SparseI8,
            },
            WeightStore::Clustered { centroids, .. } => match centroids {
                Values::F32(_) => StoreTag::ClusteredF32,
                Values::F16(_) => StoreTag::ClusteredF16,
                Values::I8 { .. } => StoreTag::ClusteredI8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightStore::QuantizedI8 { scale, .. } if !(*scale > 0.0) || !scale.is_finite() => {
                Err(Error::Invariant(format!("quantization scale {scale} must be positive")))
            }
            WeightStore::SparseBitmap { mask, values } => {
                if mask.count_ones() != values.len() {
                    return Err(Error::Invariant(format!(
                        "bitmap has {} set bits but {} values",
                        mask.count_ones(),
                        values.len()
                    )));
                }
                check_values(values)
            }
            WeightStore::Clustered { centroids, indices } => {
                let k = centroids.len();
                if k == 0 {
                    return Err(Error::Invariant("empty centroid table".into()));
                }
                if indices.bits() != index_bits(k) {
                    return Err(Error::Invariant(format!(
                        "{k} centroids need {}-bit indices, found {}",
                        index_bits(k),
                        indices.bits()
                    )));
                }
                if let Some(bad) = indices.unpack().into_iter().find(|&i| i as usize >= k) {
                    return Err(Error::Invariant(format!("cluster index {bad} >= {k}")));
                }
                check_values(centroids)
            }
            _ => Ok(()),
        }
    }

    /// Expands to plain `f32` weights.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            WeightStore::DenseF32(v) => v.clone(),
            WeightStore::DenseF16(v) => v.iter().map(|h| h.to_f32()).collect(),
            WeightStore::QuantizedI8 { values, scale } => dequantize_symmetric(values, *scale),
            WeightStore::SparseBitmap { mask, values } => {
                let mut out = vec![0.0; mask.len()];
                for (pos, v) in mask.iter_ones().zip(values.to_f32()) {
                    out[pos] = v;
                }
                out
            }
            WeightStore::Clustered { centroids, indices } => {
                let table = centroids.to_f32();
                (0..indices.len()).map(|i| table[indices.get(i) as usize]).collect()
            }
        }
    }

    /// Fraction of positions that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let zeros = match self {
            WeightStore::SparseBitmap { mask, .. } => mask.len() - mask.count_ones(),
            other => other.to_f32().iter().filter(|&&v| v == 0.0).count(),
        };
        zeros as f64 / self.len().max(1) as f64
    }

    /// Bytes of the variant payload in the model file.
    pub fn payload_bytes(&self) -> usize {
        match self {
            WeightStore::DenseF32(v) => 4 * v.len(),
            WeightStore::DenseF16(v) => 2 * v.len(),
            WeightStore::QuantizedI8 { values, .. } => values.len() + 4,
            WeightStore::SparseBitmap { mask, values } => mask.byte_len() + values.payload_bytes(),
            WeightStore::Clustered { centroids, indices } => {
                centroids.payload_bytes() + indices.bytes().len()
            }
        }
    }

    /// Bytes between the variant tag and the payload (the centroid count of
    /// clustered stores).
    pub fn header_bytes(&self) -> usize {
        match self {
            WeightStore::Clustered { .. } => 2,
            _ => 0,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(
            self,
            WeightStore::DenseF32(_)
                | WeightStore::SparseBitmap { values: Values::F32(_), .. }
                | WeightStore::Clustered { centroids: Values::F32(_), .. }
        )
    }
}

fn check_values(values: &Values) -> Result<()> {
    match values {
        Values::I8 { scale, .. } if !(*scale > 0.0) || !scale.is_finite() => {
            Err(Error::Invariant(format!("quantization scale {scale} must be positive")))
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_hand_example() {
        let (q, scale) = quantize_symmetric(&[-1.0, 0.5, 0.25]);
        assert_eq!(q, vec![-127, 64, 32]);
        assert_eq!(scale, (1.0f64 / 127.0) as f32);
    }

    #[test]
    fn quantize_all_zero() {
        let (q, scale) = quantize_symmetric(&[0.0; 5]);
        assert_eq!(q, vec![0; 5]);
        assert_eq!(scale, 1.0);
        assert!(dequantize_symmetric(&q, scale).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn index_bit_widths() {
        assert_eq!(index_bits(1), 0);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(3), 2);
        assert_eq!(index_bits(32), 5);
        assert_eq!(index_bits(33), 6);
    }

    #[test]
    fn sparse_store_invariant_checked() {
        let mask = Bitmap::from_fn(10, |i| i % 3 == 0);
        let ok = WeightStore::SparseBitmap {
            mask: mask.clone(),
            values: Values::F32(vec![1.0; 4]),
        };
        ok.validate().unwrap();
        let bad = WeightStore::SparseBitmap {
            mask,
            values: Values::F32(vec![1.0; 3]),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clustered_index_bound_checked() {
        let indices = PackedIndices::pack(&[0, 1, 2, 3], 2).unwrap();
        let store = WeightStore::Clustered {
            centroids: Values::F32(vec![0.0, 1.0, 2.0]),
            indices,
        };
        assert!(store.validate().is_err());
    }

    proptest! {
        #[test]
        fn quantization_error_within_half_step(w in prop::collection::vec(-10.0f32..10.0, 1..200)) {
            let (q, s) = quantize_symmetric(&w);
            for (a, b) in w.iter().zip(dequantize_symmetric(&q, s)) {
                prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-5));
            }
        }

        #[test]
        fn requantizing_is_idempotent(w in prop::collection::vec(-1e3f32..1e3, 1..200)) {
            let (q, s) = quantize_symmetric(&w);
            let (q2, s2) = quantize_symmetric(&dequantize_symmetric(&q, s));
            prop_assert_eq!(q, q2);
            prop_assert_eq!(s.to_bits(), s2.to_bits());
        }

        #[test]
        fn packed_indices_roundtrip(bits in 1u8..9, raw in prop::collection::vec(any::<u32>(), 0..300)) {
            let idx: Vec<u32> = raw.iter().map(|v| v & ((1u32 << bits) - 1)).collect();
            let p = PackedIndices::pack(&idx, bits).unwrap();
            prop_assert_eq!(p.bytes().len(), (idx.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(p.unpack(), idx);
        }

        #[test]
        fn bitmap_bytes_roundtrip(mask in prop::collection::vec(any::<bool>(), 0..300)) {
            let b = Bitmap::from_fn(mask.len(), |i| mask[i]);
            let back = Bitmap::from_bytes(mask.len(), &b.to_bytes()).unwrap();
            prop_assert_eq!(&back, &b);
            let ones: Vec<usize> = back.iter_ones().collect();
            let expect: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            prop_assert_eq!(ones, expect);
        }
    }
}
