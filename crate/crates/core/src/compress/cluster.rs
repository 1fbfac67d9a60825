use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FineTuneConfig, LayerTarget};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::{index_bits, PackedIndices, Values, WeightStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterInit {
    #[default]
    KMeansPlusPlus,
    /// Evenly spaced between the smallest and largest weight.
    Linear,
    /// Distinct positions drawn uniformly.
    Random,
    /// Evenly spaced quantiles of the weight distribution.
    Density,
}

impl fmt::Display for ClusterInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterInit::KMeansPlusPlus => "kmeanspp",
            ClusterInit::Linear => "linear",
            ClusterInit::Random => "random",
            ClusterInit::Density => "density",
        })
    }
}

impl FromStr for ClusterInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeanspp" | "kmeans++" => Ok(ClusterInit::KMeansPlusPlus),
            "linear" => Ok(ClusterInit::Linear),
            "random" => Ok(ClusterInit::Random),
            "density" => Ok(ClusterInit::Density),
            other => Err(Error::InvalidConfig(format!("unknown cluster init {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub init: ClusterInit,
    pub max_iterations: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
    pub seed: u64,
    pub target: LayerTarget,
    pub fine_tune: FineTuneConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 32,
            init: ClusterInit::KMeansPlusPlus,
            max_iterations: 300,
            tolerance: 1e-6,
            seed: 0,
            target: LayerTarget::default(),
            fine_tune: FineTuneConfig::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("cluster count must be at least 2, got {}", self.k)));
        }
        if self.k > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("cluster count {} exceeds {}", self.k, u16::MAX)));
        }
        if self.max_iterations == 0 || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig("k-means needs at least one iteration and a non-negative tolerance".into()));
        }
        Ok(())
    }
}

/// D² seeding: the first centroid is drawn uniformly, each further one with
/// probability proportional to its squared distance to the nearest centroid
/// chosen so far.
pub fn kmeanspp_init(weights: &[f32], k: usize, seed: u64) -> Result<Vec<f32>> {
    if weights.is_empty() {
        return Err(Error::Empty("weights to cluster"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = weights[rng.gen_range(0..weights.len())];
    let mut centroids = vec![first];
    let mut d2: Vec<f64> = weights.iter().map(|&w| (w as f64 - first as f64).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "k = {k} exceeds the {} distinct weight values",
                centroids.len()
            )));
        }
        let r = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total is positive");
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > r && d > 0.0 {
                pick = i;
                break;
            }
        }
        let c = weights[pick];
        centroids.push(c);
        for (d, &w) in d2.iter_mut().zip(weights) {
            *d = d.min((w as f64 - c as f64).powi(2));
        }
    }
    Ok(centroids)
}

fn initial_centroids(weights: &[f32], k: usize, init: ClusterInit, seed: u64) -> Result<Vec<f32>> {
    if weights.is_empty() {
        return Err(Error::Empty("weights to cluster"));
    }
    let (lo, hi) = weights
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    Ok(match init {
        ClusterInit::KMeansPlusPlus => kmeanspp_init(weights, k, seed)?,
        ClusterInit::Linear => (0..k)
            .map(|i| if k == 1 { lo } else { lo + (hi - lo) * i as f32 / (k - 1) as f32 })
            .collect(),
        ClusterInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, weights.len(), k)
                .into_iter()
                .map(|i| weights[i])
                .collect()
        }
        ClusterInit::Density => {
            let mut sorted = weights.to_vec();
            sorted.sort_by(f32::total_cmp);
            (0..k)
                .map(|i| sorted[((i as f64 + 0.5) / k as f64 * sorted.len() as f64) as usize])
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Sorted ascending.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn assign(weights: &[f32], centroids: &[f64], out: &mut [u32]) -> f64 {
    let mut total = 0.0;
    for (a, &w) in out.iter_mut().zip(weights) {
        let w = w as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &v) in centroids.iter().enumerate() {
            let d = (w - v) * (w - v);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *a = best as u32;
        total += best_d;
    }
    total
}

/// Lloyd iterations on scalar weights. Empty clusters are re-seeded to the
/// point farthest from its own centroid.
pub fn kmeans_1d(
    weights: &[f32],
    initial: &[f32],
    max_iterations: usize,
    tolerance: f64,
) -> Result<KMeansResult> {
    if weights.is_empty() {
        return Err(Error::Empty("weights to cluster"));
    }
    let k = initial.len();
    if k == 0 || k > weights.len() {
        return Err(Error::InvalidConfig(format!(
            "cluster count {k} must be in 1..={}",
            weights.len()
        )));
    }
    let mut centroids: Vec<f64> = initial.iter().map(|&c| c as f64).collect();
    let mut assignments = vec![0u32; weights.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;

    while iterations < max_iterations {
        objective.push(assign(weights, &centroids, &mut assignments));
        iterations += 1;

        let mut sum = vec![0.0f64; k];
        let mut count = vec![0usize; k];
        for (&a, &w) in assignments.iter().zip(weights) {
            sum[a as usize] += w as f64;
            count[a as usize] += 1;
        }
        let mut next: Vec<f64> = (0..k)
            .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { f64::NAN })
            .collect();
        let mut taken = vec![false; weights.len()];
        for c in 0..k {
            if count[c] > 0 {
                continue;
            }
            let far = (0..weights.len())
                .filter(|&i| !taken[i])
                .max_by(|&i, &j| {
                    let di = (weights[i] as f64 - centroids[assignments[i] as usize]).abs();
                    let dj = (weights[j] as f64 - centroids[assignments[j] as usize]).abs();
                    di.total_cmp(&dj).then(j.cmp(&i))
                })
                .expect("k <= weight count");
            taken[far] = true;
            next[c] = weights[far] as f64;
        }
        let movement = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < tolerance {
            break;
        }
    }
    objective.push(assign(weights, &centroids, &mut assignments));

    // canonical order: ascending centroid value
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut rank = vec![0u32; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as u32;
    }
    Ok(KMeansResult {
        centroids: order.iter().map(|&c| centroids[c] as f32).collect(),
        assignments: assignments.iter().map(|&a| rank[a as usize]).collect(),
        objective,
        iterations,
    })
}

/// Replaces every weight of each targeted layer with the centroid of its
/// cluster; the layer stores `k` centroids plus packed indices.
pub fn cluster_weights(model: &Model, config: &ClusterConfig) -> Result<Model> {
    config.validate()?;
    let mut out = model.clone();
    for (n, i) in config.target.resolve(model)?.into_iter().enumerate() {
        let store = out.layers[i].weights_mut().expect("target resolved to a weighted layer");
        let w = store.to_f32();
        if config.k > w.len() {
            return Err(Error::InvalidConfig(format!(
                "layer {i}: k = {} exceeds its {} weights",
                config.k,
                w.len()
            )));
        }
        let init = initial_centroids(&w, config.k, config.init, config.seed.wrapping_add(n as u64))?;
        let result = kmeans_1d(&w, &init, config.max_iterations, config.tolerance)?;
        *store = WeightStore::Clustered {
            centroids: Values::F32(result.centroids),
            indices: PackedIndices::pack(&result.assignments, index_bits(config.k))?,
        };
    }
    Ok(out)
}
