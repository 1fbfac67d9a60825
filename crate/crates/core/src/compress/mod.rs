//! Magnitude pruning, post-training quantization, weight clustering and the
//! two combined pipelines.
//!
//! All operators are `&Model -> Model` transforms that keep the layer list
//! intact and only swap weight stores.

mod cluster;
mod prune;
mod quantize;

pub use cluster::{cluster_weights, kmeans_1d, kmeanspp_init, ClusterConfig, ClusterInit, KMeansResult};
pub use prune::{prune_magnitude, prune_mask, PruneConfig};
pub use quantize::{quantize, QuantLevel};

use serde::{Deserialize, Serialize};

use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::model::{train, Layer, Model, TrainConfig};

/// Which layers a pruning or clustering pass touches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTarget {
    /// Every dense layer and no convolution.
    #[default]
    DenseLayers,
    /// Explicit layer indices; each must hold weights.
    Indices(Vec<usize>),
}

impl LayerTarget {
    pub fn resolve(&self, model: &Model) -> Result<Vec<usize>> {
        match self {
            LayerTarget::DenseLayers => Ok(model.dense_layers().map(|(i, _)| i).collect()),
            LayerTarget::Indices(idx) => {
                for &i in idx {
                    match model.layers.get(i) {
                        Some(l) if l.weights().is_some() => {}
                        _ => return Err(Error::InvalidConfig(format!("layer {i} has no weights to compress"))),
                    }
                }
                Ok(idx.clone())
            }
        }
    }
}

/// Short retraining after pruning or clustering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FineTuneConfig {
    /// A fifth of `training_epochs` (at least one) at learning rate 1e-4.
    pub fn for_training_epochs(training_epochs: usize) -> Self {
        Self {
            epochs: (training_epochs / 5).max(1),
            ..Self::default()
        }
    }
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Retrains with masks and cluster assignments frozen.
pub fn fine_tune(model: &Model, data: &Dataset, config: &FineTuneConfig) -> Result<Model> {
    let mut out = model.clone();
    train(
        &mut out,
        data,
        &TrainConfig {
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            seed: config.seed,
        },
    )?;
    Ok(out)
}

/// Prune, fine-tune, then quantize.
pub fn prune_quantize(
    model: &Model,
    data: &Dataset,
    prune: &PruneConfig,
    level: QuantLevel,
) -> Result<Model> {
    let pruned = prune_magnitude(model, prune)?;
    let tuned = fine_tune(&pruned, data, &prune.fine_tune)?;
    Ok(quantize(&tuned, level))
}

/// Cluster, fine-tune, then quantize (centroid tables and every other
/// weight tensor).
pub fn cluster_quantize(
    model: &Model,
    data: &Dataset,
    cluster: &ClusterConfig,
    level: QuantLevel,
) -> Result<Model> {
    let clustered = cluster_weights(model, cluster)?;
    let tuned = fine_tune(&clustered, data, &cluster.fine_tune)?;
    Ok(quantize(&tuned, level))
}

/// Layer kinds and logical weight shapes, for checking that a transform
/// left the architecture alone.
pub fn architecture(model: &Model) -> Vec<(crate::model::LayerKind, usize)> {
    model
        .layers
        .iter()
        .map(|l: &Layer| (l.kind(), l.weights().map_or(0, |w| w.len())))
        .collect()
}
