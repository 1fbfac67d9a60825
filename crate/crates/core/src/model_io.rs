//! The `CSIM` model file. All integers and floats are little-endian.
//!
//! ```text
//! header   magic "CSIM" | version u16
//! spec     planes u16 | rows u16 | antennas u16 | gamma f64 | codeword_len u32 | leaky_slope f32 | layer count u32
//! layer    kind u8 | kind-specific record
//! ```
//!
//! Weighted layers store their dimensions as `u32`, then the weight store
//! (tag u8, optional header, payload), then the bias as `f32`. The file size is
//! a function of the architecture, the store tags, the sparsity pattern counts
//! and the centroid counts alone; [`size_of`] computes it without encoding.

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::model::{ConvLayer, DenseLayer, Layer, LayerKind, Model, ModelSpec, TrainingMeta};
use crate::store::{index_bits, Bitmap, PackedIndices, StoreTag, Values, WeightStore};
use crate::tensor::ops::BatchNormParams;

pub const MODEL_MAGIC: &[u8; 4] = b"CSIM";
pub const MODEL_VERSION: u16 = 1;
/// Magic, version and the spec block.
pub const HEADER_LEN: usize = 4 + 2 + (2 + 2 + 2 + 8 + 4 + 4 + 4);

fn store_len(store: &WeightStore) -> usize {
    1 + store.header_bytes() + store.payload_bytes()
}

fn layer_len(layer: &Layer) -> usize {
    1 + match layer {
        Layer::Conv2d(c) => 8 + store_len(&c.kernel) + 4 * c.bias.len(),
        Layer::Dense(d) => 8 + store_len(&d.weights) + 4 * d.bias.len(),
        Layer::BatchNorm(p) => 4 + 16 * p.channels(),
        Layer::LeakyRelu { .. } => 4,
        Layer::Reshape { .. } => 12,
        Layer::Sigmoid | Layer::Flatten | Layer::SkipBegin | Layer::SkipEnd => 0,
    }
}

/// Exact serialized size in bytes.
pub fn size_of(model: &Model) -> u64 {
    (HEADER_LEN + model.layers.iter().map(layer_len).sum::<usize>()) as u64
}

/// Encodes `model` and writes it to `path`. Returns the bytes written.
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = encode_model(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

fn dim<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit the model file")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn f16s(&mut self, v: &[f16]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn i8s(&mut self, v: &[i8]) {
        self.0.extend(v.iter().map(|&x| x as u8));
    }
    fn values(&mut self, v: &Values) {
        match v {
            Values::F32(x) => self.f32s(x),
            Values::F16(x) => self.f16s(x),
            Values::I8 { q, scale } => {
                self.f32s(&[*scale]);
                self.i8s(q);
            }
        }
    }
    fn store(&mut self, store: &WeightStore) -> Result<()> {
        self.u8(store.tag() as u8);
        match store {
            WeightStore::DenseF32(v) => self.f32s(v),
            WeightStore::DenseF16(v) => self.f16s(v),
            WeightStore::QuantizedI8 { values, scale } => {
                self.f32s(&[*scale]);
                self.i8s(values);
            }
            WeightStore::SparseBitmap { mask, values } => {
                self.0.extend_from_slice(&mask.to_bytes());
                self.values(values);
            }
            WeightStore::Clustered { centroids, indices } => {
                self.u16(dim(centroids.len(), "centroid count")?);
                self.values(centroids);
                self.0.extend_from_slice(indices.bytes());
            }
        }
        Ok(())
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let s = &model.spec;
    let mut w = Writer(Vec::with_capacity(size_of(model) as usize));
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u16(MODEL_VERSION);
    w.u16(dim(s.planes, "plane count")?);
    w.u16(dim(s.rows, "row count")?);
    w.u16(dim(s.antennas, "antenna count")?);
    w.0.extend_from_slice(&s.gamma.to_le_bytes());
    w.u32(dim(s.codeword_len, "codeword length")?);
    w.f32s(&[s.leaky_slope]);
    w.u32(dim(model.layers.len(), "layer count")?);
    for layer in &model.layers {
        w.u8(layer.kind() as u8);
        match layer {
            Layer::Conv2d(c) => {
                w.u32(dim(c.in_channels, "channel count")?);
                w.u32(dim(c.out_channels, "channel count")?);
                w.store(&c.kernel)?;
                w.f32s(&c.bias);
            }
            Layer::Dense(d) => {
                w.u32(dim(d.inputs, "dense width")?);
                w.u32(dim(d.outputs, "dense width")?);
                w.store(&d.weights)?;
                w.f32s(&d.bias);
            }
            Layer::BatchNorm(p) => {
                w.u32(dim(p.channels(), "channel count")?);
                w.f32s(&p.scale);
                w.f32s(&p.shift);
                w.f32s(&p.running_mean);
                w.f32s(&p.running_var);
            }
            Layer::LeakyRelu { slope } => w.f32s(&[*slope]),
            Layer::Reshape { channels, rows, cols } => {
                w.u32(dim(*channels, "reshape dim")?);
                w.u32(dim(*rows, "reshape dim")?);
                w.u32(dim(*cols, "reshape dim")?);
            }
            Layer::Sigmoid | Layer::Flatten | Layer::SkipBegin | Layer::SkipEnd => {}
        }
    }
    debug_assert_eq!(w.0.len() as u64, size_of(model));
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(
                self.buf.len() as u64,
                format!("truncated: {what} needs {n} bytes at offset {}", self.pos),
            )
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f16s(&mut self, n: usize, what: &str) -> Result<Vec<f16>> {
        let bytes = self.take(n.checked_mul(2).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(bytes.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn scale(&mut self, what: &str) -> Result<f32> {
        let at = self.pos;
        let s = self.f32(what)?;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::format(at as u64, format!("{what} scale {s} must be positive")));
        }
        Ok(s)
    }
    fn i8s(&mut self, n: usize, what: &str) -> Result<Vec<i8>> {
        Ok(self.take(n, what)?.iter().map(|&b| b as i8).collect())
    }
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.pos as u64, reason)
    }
    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        match self.u32(what)? {
            0 => Err(Error::format(at as u64, format!("{what} is zero"))),
            v => Ok(v as usize),
        }
    }

    fn values(&mut self, tag: StoreTag, n: usize) -> Result<Values> {
        use StoreTag::*;
        Ok(match tag {
            SparseF32 | ClusteredF32 => Values::F32(self.f32s(n, "values")?),
            SparseF16 | ClusteredF16 => Values::F16(self.f16s(n, "values")?),
            _ => {
                let scale = self.scale("values")?;
                Values::I8 { q: self.i8s(n, "values")?, scale }
            }
        })
    }

    fn store(&mut self, len: usize) -> Result<WeightStore> {
        use StoreTag::*;
        let at = self.pos;
        let raw = self.u8("store tag")?;
        let tag = StoreTag::from_u8(raw)
            .ok_or_else(|| Error::format(at as u64, format!("unknown weight store tag {raw}")))?;
        Ok(match tag {
            DenseF32 => WeightStore::DenseF32(self.f32s(len, "dense weights")?),
            DenseF16 => WeightStore::DenseF16(self.f16s(len, "dense weights")?),
            QuantizedI8 => {
                let scale = self.scale("quantized weights")?;
                WeightStore::QuantizedI8 { values: self.i8s(len, "quantized weights")?, scale }
            }
            SparseF32 | SparseF16 | SparseI8 => {
                let mask_at = self.pos;
                let bytes = self.take(len.div_ceil(8), "sparsity bitmap")?;
                let mask = Bitmap::from_bytes(len, bytes).map_err(|e| Error::format(mask_at as u64, e.to_string()))?;
                let values = self.values(tag, mask.count_ones())?;
                WeightStore::SparseBitmap { mask, values }
            }
            ClusteredF32 | ClusteredF16 | ClusteredI8 => {
                let k_at = self.pos;
                let k = self.u16("centroid count")? as usize;
                if k == 0 {
                    return Err(Error::format(k_at as u64, "centroid count is zero"));
                }
                let centroids = self.values(tag, k)?;
                let idx_at = self.pos;
                let bits = index_bits(k);
                let bytes = self.take((len * bits as usize).div_ceil(8), "cluster indices")?;
                let indices = PackedIndices::from_bytes(len, bits, bytes.to_vec())
                    .map_err(|e| Error::format(idx_at as u64, e.to_string()))?;
                if let Some(bad) = indices.unpack().into_iter().find(|&i| i as usize >= k) {
                    return Err(Error::format(idx_at as u64, format!("cluster index {bad} >= {k}")));
                }
                WeightStore::Clustered { centroids, indices }
            }
        })
    }
}

fn layer_kind(raw: u8) -> Option<LayerKind> {
    use LayerKind::*;
    [Conv2d, BatchNorm, LeakyRelu, Sigmoid, Flatten, Dense, Reshape, SkipBegin, SkipEnd]
        .into_iter()
        .find(|k| *k as u8 == raw)
}

/// Parses a complete model. Any defect is reported with the byte offset where
/// it was found; nothing is returned for a partial file.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"CSIM\""));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported model file version {version} (this build reads version {MODEL_VERSION})"),
        ));
    }
    let planes = r.u16("plane count")? as usize;
    if planes != 2 {
        return Err(Error::format(6, format!("expected 2 planes, found {planes}")));
    }
    let rows = r.u16("row count")? as usize;
    let antennas = r.u16("antenna count")? as usize;
    let gamma = f64::from_le_bytes(r.take(8, "gamma")?.try_into().unwrap());
    let codeword_len = r.u32("codeword length")? as usize;
    let leaky_slope = r.f32("leaky slope")?;
    let mut spec = ModelSpec::new(rows, antennas, gamma).map_err(|e| Error::format(8, e.to_string()))?;
    if spec.codeword_len != codeword_len {
        return Err(Error::format(
            18,
            format!("codeword length {codeword_len} disagrees with gamma {gamma} (expected {})", spec.codeword_len),
        ));
    }
    spec.leaky_slope = leaky_slope;
    let count = r.u32("layer count")? as usize;

    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let raw = r.u8("layer kind")?;
        let kind = layer_kind(raw).ok_or_else(|| Error::format(at as u64, format!("unknown layer kind {raw}")))?;
        layers.push(match kind {
            LayerKind::Conv2d => {
                let in_channels = r.dim("input channels")?;
                let out_channels = r.dim("output channels")?;
                let kernel = r.store(out_channels * in_channels * 9)?;
                let bias = r.f32s(out_channels, "conv bias")?;
                Layer::Conv2d(ConvLayer { in_channels, out_channels, kernel, bias })
            }
            LayerKind::Dense => {
                let inputs = r.dim("dense inputs")?;
                let outputs = r.dim("dense outputs")?;
                let weights = r.store(inputs * outputs)?;
                let bias = r.f32s(outputs, "dense bias")?;
                Layer::Dense(DenseLayer { inputs, outputs, weights, bias })
            }
            LayerKind::BatchNorm => {
                let c = r.dim("batch norm channels")?;
                Layer::BatchNorm(BatchNormParams {
                    scale: r.f32s(c, "batch norm scale")?,
                    shift: r.f32s(c, "batch norm shift")?,
                    running_mean: r.f32s(c, "batch norm mean")?,
                    running_var: r.f32s(c, "batch norm variance")?,
                })
            }
            LayerKind::LeakyRelu => Layer::LeakyRelu { slope: r.f32("leaky slope")? },
            LayerKind::Reshape => Layer::Reshape {
                channels: r.dim("reshape channels")?,
                rows: r.dim("reshape rows")?,
                cols: r.dim("reshape cols")?,
            },
            LayerKind::Sigmoid => Layer::Sigmoid,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::SkipBegin => Layer::SkipBegin,
            LayerKind::SkipEnd => Layer::SkipEnd,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after the last layer", bytes.len() - r.pos)));
    }
    let model = Model { spec, layers, meta: TrainingMeta::default() };
    model.validate().map_err(|e| Error::format(bytes.len() as u64, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, Environment, Profile, ScenarioConfig};
    use crate::compress::{cluster_weights, prune_magnitude, quantize, ClusterConfig, PruneConfig, QuantLevel};
    use crate::engine::{plan, run};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(gamma: f64) -> Model {
        Model::build(ModelSpec::new(16, 16, gamma).unwrap(), 3)
    }

    fn random_model(rng: &mut ChaCha8Rng) -> Model {
        let rows = rng.gen_range(2..12);
        let ants = rng.gen_range(2..12);
        let gamma = [1.0, 0.5, 0.25, 0.125][rng.gen_range(0..4)];
        let spec = match ModelSpec::new(rows, ants, gamma) {
            Ok(s) => s,
            Err(_) => ModelSpec::new(rows, ants, 1.0).unwrap(),
        };
        let mut m = Model::build(spec, rng.gen());
        match rng.gen_range(0..4) {
            0 => {}
            1 => m = prune_magnitude(&m, &PruneConfig::new(rng.gen_range(0.1..0.95))).unwrap(),
            2 => m = cluster_weights(&m, &ClusterConfig { k: rng.gen_range(2..6), ..ClusterConfig::default() }).unwrap(),
            _ => m = prune_magnitude(&m, &PruneConfig::new(0.5)).unwrap(),
        }
        match rng.gen_range(0..3) {
            0 => m,
            1 => quantize(&m, QuantLevel::Float16),
            _ => quantize(&m, QuantLevel::DynamicRangeI8),
        }
    }

    #[test]
    fn layer_payload_examples() {
        let t = 2048 * 512;
        let w: Vec<f32> = (0..t).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 + i as f32 }).collect();
        assert_eq!(WeightStore::DenseF32(w.clone()).payload_bytes(), 4_194_304);
        let mask = Bitmap::from_fn(t, |i| w[i] != 0.0);
        let nz: Vec<f32> = w.iter().copied().filter(|&v| v != 0.0).collect();
        let sparse = WeightStore::SparseBitmap { mask, values: Values::F32(nz) };
        assert_eq!(sparse.payload_bytes(), 131_072 + 2_097_152);
        let idx: Vec<u32> = (0..t as u32).map(|i| i % 32).collect();
        let clustered = WeightStore::Clustered {
            centroids: Values::F32((0..32).map(|c| c as f32).collect()),
            indices: PackedIndices::pack(&idx, 5).unwrap(),
        };
        assert_eq!(clustered.payload_bytes(), 128 + 655_360);
        assert_eq!(clustered.header_bytes(), 2);
    }

    #[test]
    fn round_trip_is_byte_identical_and_bitwise_equivalent() {
        let cfg = ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 5);
        let x = generate_dataset(&cfg, 3).unwrap().tensor().clone();
        let base = desk(0.25);
        let pruned = prune_magnitude(&base, &PruneConfig::new(0.5)).unwrap();
        let clustered = cluster_weights(&base, &ClusterConfig { k: 8, ..ClusterConfig::default() }).unwrap();
        for m in [
            base.clone(),
            quantize(&base, QuantLevel::Float16),
            quantize(&pruned, QuantLevel::DynamicRangeI8),
            quantize(&clustered, QuantLevel::DynamicRangeI8),
            clustered,
            pruned,
        ] {
            let a = encode_model(&m).unwrap();
            let back = decode_model(&a).unwrap();
            assert_eq!(back.layers, m.layers);
            assert_eq!(encode_model(&back).unwrap(), a);
            let (y0, _) = run(&plan(&m, false).unwrap(), &x).unwrap();
            let (y1, _) = run(&plan(&back, false).unwrap(), &x).unwrap();
            assert_eq!(y0, y1);
        }
    }

    #[test]
    fn size_of_matches_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for i in 0..20 {
            let m = random_model(&mut rng);
            let path = dir.path().join(format!("m{i}.csim"));
            let written = save(&m, &path).unwrap();
            assert_eq!(written, size_of(&m));
            assert_eq!(fs::metadata(&path).unwrap().len(), size_of(&m));
            assert_eq!(load(&path).unwrap().layers, m.layers);
        }
    }

    #[test]
    fn malformed_files_are_rejected_with_offsets() {
        let bytes = encode_model(&desk(0.5)).unwrap();
        for cut in [0, 3, 5, HEADER_LEN - 1, HEADER_LEN + 3, bytes.len() / 2, bytes.len() - 1] {
            match decode_model(&bytes[..cut]) {
                Err(Error::Format { offset, reason }) => {
                    assert_eq!(offset, cut as u64);
                    assert!(reason.contains("truncated"), "{reason}");
                }
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bumped = bytes.clone();
        bumped[4..6].copy_from_slice(&(MODEL_VERSION + 1).to_le_bytes());
        let err = decode_model(&bumped).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }));
        assert!(err.to_string().contains("unsupported model file version 2"), "{err}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());

        let mut kind = bytes;
        kind[HEADER_LEN] = 200;
        assert!(matches!(decode_model(&kind), Err(Error::Format { offset, .. }) if offset == HEADER_LEN as u64));
    }

    #[test]
    fn quantizing_never_grows_and_combined_is_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = random_model(&mut rng);
            for level in [QuantLevel::Float16, QuantLevel::DynamicRangeI8] {
                assert!(size_of(&quantize(&m, level)) <= size_of(&m));
            }
        }
        let base = desk(0.25);
        let pruned = prune_magnitude(&base, &PruneConfig::new(0.5)).unwrap();
        let q = quantize(&base, QuantLevel::DynamicRangeI8);
        let pq = quantize(&pruned, QuantLevel::DynamicRangeI8);
        assert!(size_of(&pq) < size_of(&pruned).min(size_of(&q)));
    }

    #[test]
    fn size_ordering_on_default_architecture() {
        let base = desk(0.25);
        let pruned = prune_magnitude(&base, &PruneConfig::new(0.5)).unwrap();
        let clustered = cluster_weights(&base, &ClusterConfig::default()).unwrap();
        let sizes = [
            size_of(&quantize(&pruned, QuantLevel::DynamicRangeI8)),
            size_of(&quantize(&clustered, QuantLevel::DynamicRangeI8)),
            size_of(&clustered),
            size_of(&quantize(&base, QuantLevel::DynamicRangeI8)),
            size_of(&pruned),
            size_of(&base),
        ];
        assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
    }
}
