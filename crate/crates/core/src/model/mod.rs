//! The CsiNet-style autoencoder: construction, the reference forward pass,
//! encode/decode and end-to-end training.
//!
//! A model is a flat list of layers. Residual blocks are expressed with a
//! `SkipBegin` marker that saves the current activation and a `SkipEnd` marker
//! that adds it back, so the list doubles as the on-disk layer order.

mod train;

pub use train::{train, TrainConfig, TrainReport};
#[allow(unused_imports)]
pub(crate) use train::{forward_tape, TrainableParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSample, Dataset};
use crate::error::{Error, Result};
use crate::store::WeightStore;
use crate::tensor::ops::{self, BatchNormParams};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.3;

/// Filter counts inside one refinement block.
pub const REFINE_FILTERS: [usize; 3] = [8, 16, 2];
pub const REFINE_BLOCKS: usize = 2;

/// Input geometry and compression ratio of an autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub planes: usize,
    pub rows: usize,
    pub antennas: usize,
    /// γ = M / N.
    pub gamma: f64,
    pub codeword_len: usize,
    pub leaky_slope: f32,
}

impl ModelSpec {
    pub fn new(rows: usize, antennas: usize, gamma: f64) -> Result<Self> {
        if rows == 0 || antennas == 0 {
            return Err(Error::InvalidConfig(format!(
                "input dims must be positive, got {rows}x{antennas}"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {gamma}")));
        }
        let n = 2 * rows * antennas;
        let m = (gamma * n as f64).round() as usize;
        if m == 0 {
            return Err(Error::InvalidConfig(format!("gamma {gamma} leaves an empty codeword for N = {n}")));
        }
        Ok(Self {
            planes: 2,
            rows,
            antennas,
            gamma,
            codeword_len: m,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// N: real values per sample.
    pub fn feedback_len(&self) -> usize {
        self.planes * self.rows * self.antennas
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.planes, self.rows, self.antennas]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]` row-major.
    pub kernel: WeightStore,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[inputs, outputs]` row-major.
    pub weights: WeightStore,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(ConvLayer),
    BatchNorm(BatchNormParams<f32>),
    LeakyRelu { slope: f32 },
    Sigmoid,
    Flatten,
    Dense(DenseLayer),
    Reshape { channels: usize, rows: usize, cols: usize },
    SkipBegin,
    SkipEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 0,
    BatchNorm = 1,
    LeakyRelu = 2,
    Sigmoid = 3,
    Flatten = 4,
    Dense = 5,
    Reshape = 6,
    SkipBegin = 7,
    SkipEnd = 8,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::LeakyRelu { .. } => LayerKind::LeakyRelu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Reshape { .. } => LayerKind::Reshape,
            Layer::SkipBegin => LayerKind::SkipBegin,
            Layer::SkipEnd => LayerKind::SkipEnd,
        }
    }

    pub fn weights(&self) -> Option<&WeightStore> {
        match self {
            Layer::Conv2d(c) => Some(&c.kernel),
            Layer::Dense(d) => Some(&d.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut WeightStore> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.kernel),
            Layer::Dense(d) => Some(&mut d.weights),
            _ => None,
        }
    }

    /// Trainable scalars held by this layer.
    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.out_channels * c.in_channels * 9 + c.out_channels,
            Layer::BatchNorm(p) => 2 * p.channels(),
            Layer::Dense(d) => d.inputs * d.outputs + d.outputs,
            _ => 0,
        }
    }
}

/// Codeword produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Codeword(pub Vec<f32>);

impl Codeword {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Bookkeeping from training runs. Not serialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub loss_history: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub meta: TrainingMeta,
}

fn uniform_init(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let limit = (3.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn conv(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv2d(ConvLayer {
        in_channels,
        out_channels,
        kernel: WeightStore::DenseF32(uniform_init(out_channels * in_channels * 9, in_channels * 9, rng)),
        bias: vec![0.0; out_channels],
    })
}

fn dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Dense(DenseLayer {
        inputs,
        outputs,
        weights: WeightStore::DenseF32(uniform_init(inputs * outputs, inputs, rng)),
        bias: vec![0.0; outputs],
    })
}

impl Model {
    /// Builds the encoder and decoder for `spec` with seeded fan-in-scaled
    /// uniform weights and zero biases.
    pub fn build(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = spec.leaky_slope;
        let (n, m) = (spec.feedback_len(), spec.codeword_len);
        let p = spec.planes;

        let mut layers = vec![
            conv(p, p, &mut rng),
            Layer::BatchNorm(BatchNormParams::identity(p)),
            Layer::LeakyRelu { slope },
            Layer::Flatten,
            dense(n, m, &mut rng),
            dense(m, n, &mut rng),
            Layer::Reshape {
                channels: p,
                rows: spec.rows,
                cols: spec.antennas,
            },
        ];
        for _ in 0..REFINE_BLOCKS {
            layers.push(Layer::SkipBegin);
            let mut c = p;
            for f in REFINE_FILTERS {
                layers.push(conv(c, f, &mut rng));
                layers.push(Layer::BatchNorm(BatchNormParams::identity(f)));
                layers.push(Layer::LeakyRelu { slope });
                c = f;
            }
            layers.push(Layer::SkipEnd);
        }
        layers.push(conv(p, p, &mut rng));
        layers.push(Layer::Sigmoid);

        Self {
            spec,
            layers,
            meta: TrainingMeta::default(),
        }
    }

    /// Index of the first decoder layer (just after the encoder's dense layer).
    pub fn decoder_start(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Dense(_)))
            .map(|i| i + 1)
            .unwrap_or(self.layers.len())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = (usize, &DenseLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Dense(d) => Some((i, d)),
            _ => None,
        })
    }

    /// Checks layer shapes, store sizes and skip nesting.
    pub fn validate(&self) -> Result<()> {
        let mut depth = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |m: String| Err(Error::Invariant(format!("layer {i}: {m}")));
            match layer {
                Layer::Conv2d(c) => {
                    if c.kernel.len() != c.out_channels * c.in_channels * 9 || c.bias.len() != c.out_channels {
                        return bad("conv weights do not match declared shape".into());
                    }
                }
                Layer::Dense(d) => {
                    if d.weights.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
                        return bad("dense weights do not match declared shape".into());
                    }
                }
                Layer::BatchNorm(p) => {
                    let c = p.channels();
                    if p.shift.len() != c || p.running_mean.len() != c || p.running_var.len() != c {
                        return bad("batch-norm parameter lengths differ".into());
                    }
                }
                Layer::SkipBegin => depth += 1,
                Layer::SkipEnd => {
                    if depth == 0 {
                        return bad("skip end without begin".into());
                    }
                    depth -= 1;
                }
                _ => {}
            }
            if let Some(w) = layer.weights() {
                w.validate()?;
            }
        }
        if depth != 0 {
            return Err(Error::Invariant("unterminated skip block".into()));
        }
        Ok(())
    }

    /// Reference inference pass over `layers[range]` in `f32` with weights
    /// expanded to dense form and batch norm in inference mode.
    pub fn forward_range(&self, input: Tensor<f32>, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
        let mut x = input;
        let mut saved = Vec::new();
        for layer in &self.layers[range] {
            x = match layer {
                Layer::Conv2d(c) => {
                    let k = Tensor::new(vec![c.out_channels, c.in_channels, 3, 3], c.kernel.to_f32())?;
                    ops::conv2d(&x, &k, &Tensor::new(vec![c.out_channels], c.bias.clone())?)?
                }
                Layer::Dense(d) => {
                    let w = Tensor::new(vec![d.inputs, d.outputs], d.weights.to_f32())?;
                    ops::dense(&x, &w, &Tensor::new(vec![d.outputs], d.bias.clone())?)?
                }
                Layer::BatchNorm(p) => ops::batch_norm_infer(&x, p)?,
                Layer::LeakyRelu { slope } => ops::leaky_relu(&x, *slope),
                Layer::Sigmoid => ops::sigmoid(&x),
                Layer::Flatten => {
                    let b = x.shape()[0];
                    let n = x.len() / b;
                    x.reshape(vec![b, n])?
                }
                Layer::Reshape { channels, rows, cols } => {
                    let b = x.shape()[0];
                    x.reshape(vec![b, *channels, *rows, *cols])?
                }
                Layer::SkipBegin => {
                    saved.push(x.clone());
                    x
                }
                Layer::SkipEnd => {
                    let s = saved.pop().ok_or_else(|| Error::Invariant("unbalanced skip".into()))?;
                    ops::add(&x, &s)?
                }
            };
        }
        Ok(x)
    }

    /// Full autoencoder pass on a `[B, 2, rows, antennas]` batch.
    pub fn forward(&self, input: Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(&input)?;
        self.forward_range(input, 0..self.layers.len())
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<()> {
        let s = self.spec.sample_shape();
        if input.shape().len() != 4 || input.shape()[1..] != s {
            return Err(Error::shape(
                "model input",
                format!("expected [B, {}, {}, {}], got {:?}", s[0], s[1], s[2], input.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, sample: &ChannelSample) -> Result<Codeword> {
        let s = self.spec.sample_shape();
        if sample.data.shape() != s {
            return Err(Error::shape(
                "encode",
                format!("sample {:?} does not match model input {s:?}", sample.data.shape()),
            ));
        }
        let x = sample.data.clone().reshape(vec![1, s[0], s[1], s[2]])?;
        let out = self.forward_range(x, 0..self.decoder_start())?;
        Ok(Codeword(out.into_data()))
    }

    /// Decodes a codeword into a normalized `[2, rows, antennas]` tensor.
    pub fn decode(&self, codeword: &Codeword) -> Result<Tensor<f32>> {
        let m = self.spec.codeword_len;
        if codeword.len() != m {
            return Err(Error::shape(
                "decode",
                format!("codeword has {} values, model expects {m}", codeword.len()),
            ));
        }
        let x = Tensor::new(vec![1, m], codeword.0.clone())?;
        let out = self.forward_range(x, self.decoder_start()..self.layers.len())?;
        out.reshape(self.spec.sample_shape().to_vec())
    }

    /// `decode(encode(sample))`, keeping the sample's normalization.
    pub fn reconstruct(&self, sample: &ChannelSample) -> Result<ChannelSample> {
        let data = self.decode(&self.encode(sample)?)?;
        Ok(ChannelSample { data, norm: sample.norm })
    }

    /// Reconstructs a whole dataset in batches.
    pub fn reconstruct_dataset(&self, dataset: &Dataset, batch: usize) -> Result<Dataset> {
        let mut parts = Vec::new();
        let n = dataset.len();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            parts.push(self.forward(dataset.tensor().slice_batch(start, end)?)?);
            start = end;
        }
        Dataset::new(Tensor::stack_batch(&parts)?, dataset.norm)
    }
}
