use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::Model;
use crate::store::{quantize_symmetric, Values, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantLevel {
    /// Symmetric per-tensor int8 weights, activations quantized at run time.
    DynamicRangeI8,
    Float16,
}

impl fmt::Display for QuantLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantLevel::DynamicRangeI8 => "i8",
            QuantLevel::Float16 => "f16",
        })
    }
}

impl FromStr for QuantLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "i8" | "int8" | "dynamic" => Ok(QuantLevel::DynamicRangeI8),
            "f16" | "float16" => Ok(QuantLevel::Float16),
            other => Err(Error::InvalidConfig(format!("unknown quantization level {other:?}"))),
        }
    }
}

fn values(v: &[f32], level: QuantLevel) -> Values {
    match level {
        QuantLevel::DynamicRangeI8 => Values::quantize(v),
        QuantLevel::Float16 => Values::to_f16(v),
    }
}

fn quantize_store(store: &WeightStore, level: QuantLevel) -> WeightStore {
    match store {
        WeightStore::DenseF32(w) => match level {
            QuantLevel::DynamicRangeI8 => {
                let (values, scale) = quantize_symmetric(w);
                WeightStore::QuantizedI8 { values, scale }
            }
            QuantLevel::Float16 => WeightStore::DenseF16(w.iter().map(|&x| f16::from_f32(x)).collect()),
        },
        WeightStore::SparseBitmap {
            mask,
            values: Values::F32(v),
        } => WeightStore::SparseBitmap {
            mask: mask.clone(),
            values: values(v, level),
        },
        WeightStore::Clustered {
            centroids: Values::F32(c),
            indices,
        } => WeightStore::Clustered {
            centroids: values(c, level),
            indices: indices.clone(),
        },
        already => already.clone(),
    }
}

/// Post-training weight quantization of every conv and dense layer. Sparse
/// layers quantize only their surviving values, clustered layers only their
/// centroid table. Biases and batch norm stay `f32`; stores that are
/// already reduced are left as they are.
pub fn quantize(model: &Model, level: QuantLevel) -> Model {
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Some(store) = layer.weights_mut() {
            *store = quantize_store(store, level);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{architecture, prune_magnitude, PruneConfig};
    use crate::model::ModelSpec;

    #[test]
    fn every_weight_tensor_is_converted() {
        let model = Model::build(ModelSpec::new(8, 8, 0.25).unwrap(), 1);
        let q = quantize(&model, QuantLevel::DynamicRangeI8);
        assert_eq!(architecture(&q), architecture(&model));
        for layer in &q.layers {
            if let Some(w) = layer.weights() {
                assert!(matches!(w, WeightStore::QuantizedI8 { .. }));
            }
        }
        let h = quantize(&model, QuantLevel::Float16);
        assert!(h.layers.iter().filter_map(|l| l.weights()).all(|w| matches!(w, WeightStore::DenseF16(_))));
        // a second pass changes nothing
        assert_eq!(quantize(&q, QuantLevel::DynamicRangeI8), q);
    }

    #[test]
    fn sparse_layers_keep_mask_and_zeros() {
        let model = Model::build(ModelSpec::new(8, 8, 0.25).unwrap(), 1);
        let pruned = prune_magnitude(&model, &PruneConfig::new(0.7)).unwrap();
        let q = quantize(&pruned, QuantLevel::DynamicRangeI8);
        for (a, b) in q.layers.iter().zip(&pruned.layers) {
            if let (
                Some(WeightStore::SparseBitmap { mask: ma, values: Values::I8 { .. } }),
                Some(WeightStore::SparseBitmap { mask: mb, .. }),
            ) = (a.weights(), b.weights())
            {
                assert_eq!(ma, mb);
                let deq = a.weights().unwrap().to_f32();
                assert!((0..deq.len()).filter(|&i| !ma.get(i)).all(|i| deq[i] == 0.0));
            }
        }
        let sparsity = |m: &Model| m.layers.iter().filter_map(|l| l.weights()).map(|w| w.sparsity()).collect::<Vec<_>>();
        assert_eq!(sparsity(&q)[1..3], sparsity(&pruned)[1..3]);
    }

    #[test]
    fn level_names() {
        assert_eq!("i8".parse::<QuantLevel>().unwrap(), QuantLevel::DynamicRangeI8);
        assert_eq!(QuantLevel::Float16.to_string().parse::<QuantLevel>().unwrap(), QuantLevel::Float16);
        assert!("int4".parse::<QuantLevel>().is_err());
    }
}
