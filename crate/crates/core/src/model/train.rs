use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, Model};
use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::store::{Bitmap, PackedIndices, Values, WeightStore};
use crate::tensor::ops::BN_MOMENTUM;
use crate::tensor::{Adam, AdamConfig, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean MSE per epoch.
    pub loss_history: Vec<f32>,
    pub steps: u64,
}

/// How a weight tensor's trainable values map onto its dense layout.
#[derive(Clone, Debug)]
enum Constraint {
    Free,
    /// Only positions set in the mask exist; the rest stay exactly zero.
    Masked(Bitmap),
    /// Every position reads `centroids[indices[i]]`.
    Tied(Vec<u32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Weights,
    Bias,
    Scale,
    Shift,
}

#[derive(Clone, Debug)]
struct Slot {
    layer: usize,
    role: Role,
    shape: Vec<usize>,
    constraint: Constraint,
    values: Vec<f32>,
}

impl Slot {
    fn expanded(&self) -> Vec<f32> {
        match &self.constraint {
            Constraint::Free => self.values.clone(),
            Constraint::Masked(mask) => {
                let mut out = vec![0.0; mask.len()];
                for (pos, &v) in mask.iter_ones().zip(&self.values) {
                    out[pos] = v;
                }
                out
            }
            Constraint::Tied(idx) => idx.iter().map(|&i| self.values[i as usize]).collect(),
        }
    }

    /// Maps a gradient over the dense layout onto the trainable values.
    fn project(&self, dense_grad: &[f32]) -> Vec<f32> {
        match &self.constraint {
            Constraint::Free => dense_grad.to_vec(),
            Constraint::Masked(mask) => mask.iter_ones().map(|i| dense_grad[i]).collect(),
            Constraint::Tied(idx) => {
                let k = self.values.len();
                let mut sum = vec![0.0f64; k];
                let mut count = vec![0usize; k];
                for (&c, &g) in idx.iter().zip(dense_grad) {
                    sum[c as usize] += g as f64;
                    count[c as usize] += 1;
                }
                sum.iter()
                    .zip(&count)
                    .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
                    .collect()
            }
        }
    }
}

fn weight_slot(layer: usize, shape: Vec<usize>, store: &WeightStore) -> Result<Slot> {
    let (constraint, values) = match store {
        WeightStore::DenseF32(v) => (Constraint::Free, v.clone()),
        WeightStore::SparseBitmap {
            mask,
            values: Values::F32(v),
        } => (Constraint::Masked(mask.clone()), v.clone()),
        WeightStore::Clustered {
            centroids: Values::F32(c),
            indices,
        } => (Constraint::Tied(indices.unpack()), c.clone()),
        other => {
            return Err(Error::InvalidConfig(format!(
                "layer {layer}: {:?} weights are not trainable; fine-tune before quantizing",
                other.tag()
            )))
        }
    };
    Ok(Slot {
        layer,
        role: Role::Weights,
        shape,
        constraint,
        values,
    })
}

fn free(layer: usize, role: Role, values: &[f32]) -> Slot {
    Slot {
        layer,
        role,
        shape: vec![values.len()],
        constraint: Constraint::Free,
        values: values.to_vec(),
    }
}

/// The trainable view of a model, one slot per parameter tensor in layer
/// order: conv kernel and bias, batch-norm scale and shift, dense weights
/// and bias.
#[derive(Clone, Debug)]
pub(crate) struct TrainableParams {
    slots: Vec<Slot>,
}

impl TrainableParams {
    pub(crate) fn from_model(model: &Model) -> Result<Self> {
        let mut slots = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    slots.push(weight_slot(i, vec![c.out_channels, c.in_channels, 3, 3], &c.kernel)?);
                    slots.push(free(i, Role::Bias, &c.bias));
                }
                Layer::Dense(d) => {
                    slots.push(weight_slot(i, vec![d.inputs, d.outputs], &d.weights)?);
                    slots.push(free(i, Role::Bias, &d.bias));
                }
                Layer::BatchNorm(p) => {
                    slots.push(free(i, Role::Scale, &p.scale));
                    slots.push(free(i, Role::Shift, &p.shift));
                }
                _ => {}
            }
        }
        Ok(Self { slots })
    }

    /// Dense parameter tensors in slot order.
    pub(crate) fn expanded<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.slots
            .iter()
            .map(|s| {
                let data = s.expanded().into_iter().map(|v| T::lit(v as f64)).collect();
                Tensor::new(s.shape.clone(), data).expect("slot shape matches its values")
            })
            .collect()
    }

    fn write_back(self, model: &mut Model) {
        for slot in self.slots {
            let layer = &mut model.layers[slot.layer];
            match (layer, slot.role) {
                (Layer::Conv2d(c), Role::Weights) => c.kernel = rebuild(&c.kernel, slot.values),
                (Layer::Conv2d(c), Role::Bias) => c.bias = slot.values,
                (Layer::Dense(d), Role::Weights) => d.weights = rebuild(&d.weights, slot.values),
                (Layer::Dense(d), Role::Bias) => d.bias = slot.values,
                (Layer::BatchNorm(p), Role::Scale) => p.scale = slot.values,
                (Layer::BatchNorm(p), Role::Shift) => p.shift = slot.values,
                _ => unreachable!("slot roles are built from the same layers"),
            }
        }
    }
}

fn rebuild(old: &WeightStore, values: Vec<f32>) -> WeightStore {
    match old {
        WeightStore::SparseBitmap { mask, .. } => WeightStore::SparseBitmap {
            mask: mask.clone(),
            values: Values::F32(values),
        },
        WeightStore::Clustered { indices, .. } => WeightStore::Clustered {
            centroids: Values::F32(values),
            indices: PackedIndices::clone(indices),
        },
        _ => WeightStore::DenseF32(values),
    }
}

/// Batch statistics observed by one batch-norm layer during a training pass.
pub(crate) struct BnStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Records a training-mode forward pass of `model` on `tape`.
///
/// `params` holds one leaf per slot of [`TrainableParams`], in order.
pub(crate) fn forward_tape<T: Scalar>(
    model: &Model,
    tape: &mut Tape<T>,
    input: Var,
    params: &[Var],
) -> Result<(Var, Vec<BnStats<T>>)> {
    let mut x = input;
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Invariant("too few parameter leaves".into()));
    let mut saved = Vec::new();
    let mut stats = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        x = match layer {
            Layer::Conv2d(_) => {
                let (k, b) = (next()?, next()?);
                tape.conv2d(x, k, b)?
            }
            Layer::Dense(_) => {
                let (w, b) = (next()?, next()?);
                tape.dense(x, w, b)?
            }
            Layer::BatchNorm(_) => {
                let (s, b) = (next()?, next()?);
                let (out, mean, var) = tape.batch_norm(x, s, b)?;
                stats.push(BnStats { layer: i, mean, var });
                out
            }
            Layer::LeakyRelu { slope } => tape.leaky_relu(x, T::lit(*slope as f64)),
            Layer::Sigmoid => tape.sigmoid(x),
            Layer::Flatten => {
                let shape = tape.value(x).shape().to_vec();
                tape.reshape(x, vec![shape[0], shape[1..].iter().product()])?
            }
            Layer::Reshape { channels, rows, cols } => {
                let b = tape.value(x).shape()[0];
                tape.reshape(x, vec![b, *channels, *rows, *cols])?
            }
            Layer::SkipBegin => {
                saved.push(x);
                x
            }
            Layer::SkipEnd => {
                let s = saved.pop().ok_or_else(|| Error::Invariant("unbalanced skip".into()))?;
                tape.add(x, s)?
            }
        };
    }
    Ok((x, stats))
}

fn update_running_stats(model: &mut Model, stats: &[BnStats<f32>]) {
    let m = BN_MOMENTUM as f32;
    for s in stats {
        if let Layer::BatchNorm(p) = &mut model.layers[s.layer] {
            for c in 0..p.channels() {
                p.running_mean[c] = m * p.running_mean[c] + (1.0 - m) * s.mean[c];
                p.running_var[c] = m * p.running_var[c] + (1.0 - m) * s.var[c];
            }
        }
    }
}

/// Minimizes reconstruction MSE with Adam.
///
/// Sparse weights keep their mask (pruned positions never receive updates)
/// and clustered weights keep their assignments (each centroid moves by the
/// mean gradient of its members). Batch-norm running statistics are updated
/// from every batch.
pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let s = model.spec.sample_shape();
    if [data.rows(), data.antennas()] != [s[1], s[2]] {
        return Err(Error::shape(
            "train",
            format!(
                "dataset samples are {}x{}, model expects {}x{}",
                data.rows(),
                data.antennas(),
                s[1],
                s[2]
            ),
        ));
    }
    let mut params = TrainableParams::from_model(model)?;
    let mut adam = Adam::<f32>::new(AdamConfig::with_learning_rate(config.learning_rate));
    let per_sample = data.tensor().len() / data.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut buf = Vec::with_capacity(chunk.len() * per_sample);
            for &i in chunk {
                buf.extend_from_slice(&data.tensor().data()[i * per_sample..(i + 1) * per_sample]);
            }
            let input = Tensor::new(vec![chunk.len(), s[0], s[1], s[2]], buf)?;

            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(input);
            let leaves: Vec<Var> = params.expanded::<f32>().into_iter().map(|t| tape.leaf(t)).collect();
            let (out, stats) = forward_tape(model, &mut tape, x, &leaves)?;
            let loss = tape.mse(out, x)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Invariant(format!("training diverged at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;

            let projected: Vec<Vec<f32>> = params
                .slots
                .iter()
                .zip(&leaves)
                .map(|(slot, &v)| slot.project(grads.take(v).data()))
                .collect();
            let mut values: Vec<&mut [f32]> = params.slots.iter_mut().map(|s| s.values.as_mut_slice()).collect();
            let grad_refs: Vec<&[f32]> = projected.iter().map(Vec::as_slice).collect();
            adam.step(&mut values, &grad_refs)?;
            update_running_stats(model, &stats);

            loss_sum += loss_value as f64;
            batches += 1;
        }
        history.push((loss_sum / batches as f64) as f32);
    }

    params.write_back(model);
    model.meta.epochs += config.epochs;
    model.meta.loss_history.extend_from_slice(&history);
    Ok(TrainReport {
        loss_history: history,
        steps: adam.steps(),
    })
}
