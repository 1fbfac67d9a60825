//! Synthetic massive-MIMO channels, the angular-delay transform, and the
//! normalized datasets the autoencoder trains on.
//!
//! Each channel is the sum of a few propagation paths. Every path contributes
//! a complex gain, a uniform-linear-array steering vector across the transmit
//! antennas, and a linear phase ramp across subcarriers set by its delay.
//! After the 2D DFT the energy of such a channel sits in a handful of
//! angle/delay cells near the top of the matrix, which is what makes
//! truncation to the first delay rows almost lossless.

mod dataset;
mod transform;

pub use dataset::{
    export_dataset, import_dataset, truncate_and_normalize, ChannelSample, Dataset, Normalization,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use transform::{from_angular_delay, to_angular_delay};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense complex matrix, row-major. Rows index subcarriers (or delay taps),
/// columns index antennas (or angles).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

/// Channel in the spatial-frequency domain: subcarriers × transmit antennas.
pub type SpatialFreqChannel = ComplexMatrix;

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(
                "complex_matrix",
                format!("{rows}x{cols} with {} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    IndoorLike,
    OutdoorLike,
}

impl Environment {
    pub fn tag(self) -> &'static str {
        match self {
            Environment::IndoorLike => "indoor",
            Environment::OutdoorLike => "outdoor",
        }
    }
}

/// Problem size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 16 antennas, 64 subcarriers, 16 kept delay rows: N = 512.
    Desk,
    /// 32 antennas, 256 subcarriers, 32 kept delay rows: N = 2048.
    Full,
}

impl Profile {
    /// (antennas, subcarriers, truncated rows)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Profile::Desk => (16, 64, 16),
            Profile::Full => (32, 256, 32),
        }
    }
}

/// Parameters of the synthetic multipath generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub environment: Environment,
    pub paths: usize,
    pub antennas: usize,
    pub subcarriers: usize,
    pub truncated_rows: usize,
    /// Mean excess delay of the exponential delay profile, in delay bins.
    pub delay_spread: f64,
    /// Delay of the earliest possible path, in delay bins.
    pub min_delay: f64,
    /// Upper bound on any path delay, in delay bins.
    pub max_delay: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(environment: Environment, profile: Profile, seed: u64) -> Self {
        let (antennas, subcarriers, truncated_rows) = profile.dims();
        let (paths, delay_spread) = match environment {
            Environment::IndoorLike => (6, 1.0),
            Environment::OutdoorLike => (12, 2.5),
        };
        Self {
            environment,
            paths,
            antennas,
            subcarriers,
            truncated_rows,
            delay_spread,
            min_delay: 2.0,
            max_delay: truncated_rows as f64 - 5.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.paths == 0 {
            return bad("path count must be at least 1");
        }
        if self.antennas == 0 || self.subcarriers == 0 || self.truncated_rows == 0 {
            return bad("antenna, subcarrier and truncation counts must be positive");
        }
        if self.truncated_rows > self.subcarriers {
            return bad("truncated rows exceed subcarrier count");
        }
        if self.antennas > u16::MAX as usize || self.truncated_rows > u16::MAX as usize {
            return bad("dimensions must fit in 16 bits");
        }
        if !(self.delay_spread > 0.0) || !(self.min_delay >= 0.0) || !(self.max_delay >= self.min_delay)
        {
            return bad("delay parameters must satisfy 0 <= min_delay <= max_delay, spread > 0");
        }
        if self.max_delay >= self.subcarriers as f64 {
            return bad("max_delay must be below the subcarrier count");
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    /// Departure angle in radians, measured from broadside.
    pub angle: f64,
    /// Delay in delay bins (multiples of the inverse system bandwidth).
    pub delay: f64,
}

/// Builds the spatial-frequency channel of a set of paths on a half-wavelength
/// uniform linear array.
pub fn synthesize(paths: &[Path], subcarriers: usize, antennas: usize) -> SpatialFreqChannel {
    let mut h = ComplexMatrix::zeros(subcarriers, antennas);
    for p in paths {
        let steer: Vec<Complex64> = (0..antennas)
            .map(|t| Complex64::from_polar(1.0, -PI * t as f64 * p.angle.sin()))
            .collect();
        for n in 0..subcarriers {
            // Sign chosen so a path of delay d lands in row d under the forward DFT.
            let ramp = p.gain * Complex64::from_polar(1.0, 2.0 * PI * n as f64 * p.delay / subcarriers as f64);
            for (t, s) in steer.iter().enumerate() {
                h.data[n * antennas + t] += ramp * s;
            }
        }
    }
    h
}

/// Draws the paths of sample `index`. Pure in `(config, index)`.
pub fn draw_paths(config: &ScenarioConfig, index: u64) -> Vec<Path> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let excess = Exp::new(1.0 / config.delay_spread).expect("positive spread");
    let span = config.max_delay - config.min_delay;
    (0..config.paths)
        .map(|_| {
            let extra: f64 = excess.sample(&mut rng);
            // fold overshoot back into range so the profile stays bounded
            let extra = if span > 0.0 { extra % span } else { 0.0 };
            let delay = config.min_delay + extra;
            let power = (-extra / config.delay_spread).exp();
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let angle = rng.gen_range(-PI / 2.0..PI / 2.0);
            Path {
                gain: Complex64::new(re, im) * (power / 2.0).sqrt(),
                angle,
                delay,
            }
        })
        .collect()
}

/// Generates `count` spatial-frequency channels, each scaled to unit average
/// power per entry.
pub fn generate(config: &ScenarioConfig, count: usize) -> Result<Vec<SpatialFreqChannel>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| {
            let paths = draw_paths(config, i);
            let mut h = synthesize(&paths, config.subcarriers, config.antennas);
            let norm = h.frobenius_norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Invariant(format!("sample {i} has degenerate norm {norm}")));
            }
            let target = ((config.subcarriers * config.antennas) as f64).sqrt();
            for z in h.data_mut() {
                *z *= target / norm;
            }
            Ok(h)
        })
        .collect()
}

/// Generates, transforms, truncates and normalizes a full dataset.
pub fn generate_dataset(config: &ScenarioConfig, count: usize) -> Result<Dataset> {
    let channels = generate(config, count)?;
    let angular: Vec<ComplexMatrix> = channels.iter().map(to_angular_delay).collect();
    Dataset::from_angular_delay(&angular, config.truncated_rows)
}

/// Generates `train + test` consecutive samples under one normalization and
/// splits them, so both sets map to the model input range identically.
pub fn generate_split(config: &ScenarioConfig, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
    if train == 0 || test == 0 {
        return Err(Error::InvalidConfig("train and test counts must both be positive".into()));
    }
    generate_dataset(config, train + test)?.split_at(train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_broadside_path_is_flat_in_frequency() {
        let p = Path {
            gain: Complex64::new(0.8, -0.3),
            angle: 0.0,
            delay: 0.0,
        };
        let h = synthesize(&[p], 8, 4);
        for n in 1..8 {
            assert_eq!(h.row(n), h.row(0));
        }
    }

    #[test]
    fn split_shares_normalization() {
        let cfg = ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 8);
        let (train, test) = generate_split(&cfg, 6, 3).unwrap();
        let whole = generate_dataset(&cfg, 9).unwrap();
        assert_eq!((train.len(), test.len()), (6, 3));
        assert_eq!(train.norm, whole.norm);
        assert_eq!(test.sample(0), whole.sample(6));
        assert!(generate_split(&cfg, 0, 3).is_err());
    }

    #[test]
    fn same_seed_same_channels() {
        let cfg = ScenarioConfig::new(Environment::OutdoorLike, Profile::Desk, 42);
        let a = generate(&cfg, 5).unwrap();
        let b = generate(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let other = generate(&ScenarioConfig { seed: 43, ..cfg }, 5).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sample_depends_only_on_index() {
        let cfg = ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 9);
        let a = generate(&cfg, 6).unwrap();
        let b = generate(&cfg, 3).unwrap();
        assert_eq!(&a[..3], &b[..]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 0);
        assert!(generate(&ScenarioConfig { paths: 0, ..base.clone() }, 1).is_err());
        assert!(generate(&ScenarioConfig { truncated_rows: 65, ..base.clone() }, 1).is_err());
        assert!(generate(&ScenarioConfig { delay_spread: 0.0, ..base.clone() }, 1).is_err());
        assert!(generate(&base, 0).is_err());
    }

    #[test]
    fn generated_channels_have_unit_average_power() {
        let cfg = ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 1);
        for h in generate(&cfg, 4).unwrap() {
            let p = h.frobenius_norm().powi(2) / (64.0 * 16.0);
            assert!((p - 1.0).abs() < 1e-9);
        }
    }
}

#[cfg(test)]
mod sparsity_tests {
    use super::*;

    fn energies(h: &ComplexMatrix) -> Vec<f64> {
        to_angular_delay(h).data().iter().map(|z| z.norm_sqr()).collect()
    }

    #[test]
    fn truncation_keeps_at_least_95_percent_of_energy() {
        for env in [Environment::IndoorLike, Environment::OutdoorLike] {
            for profile in [Profile::Desk, Profile::Full] {
                let cfg = ScenarioConfig::new(env, profile, 5);
                for h in generate(&cfg, 100).unwrap() {
                    let e = energies(&h);
                    let total: f64 = e.iter().sum();
                    let kept: f64 = e[..cfg.truncated_rows * cfg.antennas].iter().sum();
                    assert!((total - kept) / total < 0.05, "{env:?} {profile:?}");
                }
            }
        }
    }

    #[test]
    fn three_paths_concentrate_in_few_cells() {
        // Off-grid paths leak into roughly two angle bins and two delay bins
        // each, so the expected spread of an L-path channel is 4L cells.
        let cfg = ScenarioConfig {
            paths: 3,
            ..ScenarioConfig::new(Environment::IndoorLike, Profile::Desk, 5)
        };
        let budget = 3 * 4 * cfg.paths;
        let samples = generate(&cfg, 200).unwrap();
        let mut share = 0.0;
        for h in &samples {
            let mut e = energies(h);
            let total: f64 = e.iter().sum();
            e.sort_by(|a, b| b.total_cmp(a));
            share += e[..budget].iter().sum::<f64>() / total;
        }
        share /= samples.len() as f64;
        assert!(share >= 0.95, "top {budget} cells hold {share}");
    }
}
