use serde::{Deserialize, Serialize};

use super::{FineTuneConfig, LayerTarget};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::{Bitmap, Values, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of each targeted layer's weights set to zero, in `[0, 1)`.
    pub ratio: f64,
    pub target: LayerTarget,
    pub fine_tune: FineTuneConfig,
}

impl PruneConfig {
    pub fn new(ratio: f64) -> Self {
        Self {
            ratio,
            target: LayerTarget::default(),
            fine_tune: FineTuneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::InvalidConfig(format!(
                "sparsity ratio must be in [0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Keep-mask for `weights`: the `T - floor(T * ratio)` largest magnitudes
/// survive, ties going to the lower index.
pub fn prune_mask(weights: &[f32], ratio: f64) -> Result<Bitmap> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("sparsity ratio must be in [0, 1), got {ratio}")));
    }
    let t = weights.len();
    let drop = (t as f64 * ratio).floor() as usize;
    let mut order: Vec<usize> = (0..t).collect();
    // ascending |w|, and among equal magnitudes the higher index first
    order.sort_by(|&a, &b| {
        weights[a]
            .abs()
            .total_cmp(&weights[b].abs())
            .then(b.cmp(&a))
    });
    let mut keep = vec![true; t];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    Ok(Bitmap::from_fn(t, |i| keep[i]))
}

/// Zeroes the smallest-magnitude weights of each targeted layer and records
/// the surviving positions as a frozen mask.
pub fn prune_magnitude(model: &Model, config: &PruneConfig) -> Result<Model> {
    config.validate()?;
    let mut out = model.clone();
    for i in config.target.resolve(model)? {
        let store = out.layers[i].weights_mut().expect("target resolved to a weighted layer");
        let w = store.to_f32();
        if (w.len() as f64 * config.ratio).floor() == 0.0 {
            continue;
        }
        let mask = prune_mask(&w, config.ratio)?;
        let values = mask.iter_ones().map(|p| w[p]).collect();
        *store = WeightStore::SparseBitmap {
            mask,
            values: Values::F32(values),
        };
    }
    Ok(out)
}
