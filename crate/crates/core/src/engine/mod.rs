//! Inference over compressed models.
//!
//! [`plan`] turns a model into a list of steps, choosing one kernel per
//! weighted layer from its store. Convolutions always run in `f32` and are
//! dequantized once here. [`run`] executes a plan and reports work counters.

mod kernels;

pub use kernels::{
    clustered_gather_matvec, dynamic_quant_matvec, quantize_activations, sparse_dense_matvec,
    sparse_quant_matvec, Counters, DenseKernel, DynamicQuantParams, KernelKind,
};

use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::tensor::ops::{self, BatchNormParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Step {
    Conv { kernel: Tensor<f32>, bias: Tensor<f32> },
    Dense(DenseKernel),
    BatchNorm(BatchNormParams<f32>),
    LeakyRelu(f32),
    Sigmoid,
    Flatten,
    Reshape([usize; 3]),
    SkipBegin,
    SkipEnd,
}

/// Kernel choices and scratch requirements for one model.
#[derive(Clone, Debug)]
pub struct ExecutionPlan {
    steps: Vec<Step>,
    kernels: Vec<KernelKind>,
    force_dense: bool,
}

impl ExecutionPlan {
    /// Kernel per weighted layer, in layer order.
    pub fn kernels(&self) -> &[KernelKind] {
        &self.kernels
    }

    pub fn force_dense(&self) -> bool {
        self.force_dense
    }

    /// Largest per-sample activation length, i.e. the scratch a batch of one
    /// needs per live buffer.
    pub fn scratch_len(&self, sample_len: usize) -> usize {
        let mut len = sample_len;
        let mut max = len;
        for step in &self.steps {
            match step {
                Step::Conv { kernel, .. } => len = len / kernel.shape()[1] * kernel.shape()[0],
                Step::Dense(k) => len = k.outputs(),
                _ => {}
            }
            max = max.max(len);
        }
        max
    }
}

/// Builds a plan over an arbitrary layer list.
pub fn plan_layers(layers: &[Layer], force_dense: bool) -> Result<ExecutionPlan> {
    let mut steps = Vec::with_capacity(layers.len());
    let mut kernels = Vec::new();
    for layer in layers {
        steps.push(match layer {
            Layer::Conv2d(c) => {
                kernels.push(KernelKind::ConvF32);
                Step::Conv {
                    kernel: Tensor::new(vec![c.out_channels, c.in_channels, 3, 3], c.kernel.to_f32())?,
                    bias: Tensor::new(vec![c.out_channels], c.bias.clone())?,
                }
            }
            Layer::Dense(d) => {
                let k = DenseKernel::new(d, force_dense)?;
                kernels.push(k.kind());
                Step::Dense(k)
            }
            Layer::BatchNorm(p) => Step::BatchNorm(p.clone()),
            Layer::LeakyRelu { slope } => Step::LeakyRelu(*slope),
            Layer::Sigmoid => Step::Sigmoid,
            Layer::Flatten => Step::Flatten,
            Layer::Reshape { channels, rows, cols } => Step::Reshape([*channels, *rows, *cols]),
            Layer::SkipBegin => Step::SkipBegin,
            Layer::SkipEnd => Step::SkipEnd,
        });
    }
    Ok(ExecutionPlan {
        steps,
        kernels,
        force_dense,
    })
}

/// Plans a whole model. `force_dense` materializes pruned layers and runs
/// them with plain dense kernels, the baseline without sparse execution.
pub fn plan(model: &Model, force_dense: bool) -> Result<ExecutionPlan> {
    model.validate()?;
    plan_layers(&model.layers, force_dense)
}

/// Executes `plan` on a batch. Batch normalization runs in inference mode.
pub fn run(plan: &ExecutionPlan, input: &Tensor<f32>) -> Result<(Tensor<f32>, Counters)> {
    let mut counters = Counters::default();
    let mut x = input.clone();
    let mut saved = Vec::new();
    for step in &plan.steps {
        x = match step {
            Step::Conv { kernel, bias } => {
                let out = ops::conv2d(&x, kernel, bias)?;
                let s = out.shape();
                let macs = s[0] * s[1] * s[2] * s[3] * kernel.shape()[1] * 9;
                counters.add(Counters {
                    macs: macs as u64,
                    bytes_touched: 4 * (kernel.len() + x.len() + out.len()) as u64,
                });
                out
            }
            Step::Dense(k) => {
                let [b, n] = match *x.shape() {
                    [b, n] => [b, n],
                    ref s => return Err(Error::shape("dense step", format!("expected [B, N], got {s:?}"))),
                };
                if n != k.inputs() {
                    return Err(Error::shape(
                        "dense step",
                        format!("{n} activations, layer expects {}", k.inputs()),
                    ));
                }
                Tensor::new(vec![b, k.outputs()], k.apply(x.data(), b, &mut counters)?)?
            }
            Step::BatchNorm(p) => ops::batch_norm_infer(&x, p)?,
            Step::LeakyRelu(s) => ops::leaky_relu(&x, *s),
            Step::Sigmoid => ops::sigmoid(&x),
            Step::Flatten => {
                let b = x.shape()[0];
                let n = x.len() / b;
                x.reshape(vec![b, n])?
            }
            Step::Reshape([c, r, w]) => {
                let b = x.shape()[0];
                x.reshape(vec![b, *c, *r, *w])?
            }
            Step::SkipBegin => {
                saved.push(x.clone());
                x
            }
            Step::SkipEnd => {
                let s = saved.pop().ok_or_else(|| Error::Invariant("unbalanced skip".into()))?;
                ops::add(&x, &s)?
            }
        };
    }
    Ok((x, counters))
}

/// Runs every sample of `dataset` through `plan`, `batch` at a time, and
/// returns the reconstructions under the dataset's normalization.
pub fn reconstruct(plan: &ExecutionPlan, dataset: &Dataset, batch: usize) -> Result<(Dataset, Counters)> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut counters = Counters::default();
    let mut parts = Vec::new();
    let n = dataset.len();
    for start in (0..n).step_by(batch) {
        let x = dataset.tensor().slice_batch(start, (start + batch).min(n))?;
        let (y, c) = run(plan, &x)?;
        counters.add(c);
        parts.push(y);
    }
    Ok((Dataset::new(Tensor::stack_batch(&parts)?, dataset.norm)?, counters))
}
