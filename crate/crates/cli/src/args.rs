use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csi_compress::channel::Profile;
use csi_compress::compress::{ClusterInit, QuantLevel};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "csi-compress", version, about = "Compress CSI-feedback autoencoders and measure the trade-offs")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Seed for data generation, initialization, shuffling and clustering.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for every file a command writes.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileArg {
    /// 16 antennas, 16 delay rows.
    Desk,
    /// 32 antennas, 32 delay rows.
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write indoor-like and outdoor-like train/test datasets.
    GenData(GenDataArgs),
    /// Train an autoencoder at one compression ratio.
    Train(TrainArgs),
    /// Apply a compression technique to a trained model.
    Compress(CompressArgs),
    /// Reconstruction quality of a model on test datasets.
    Eval(EvalArgs),
    /// Size, latency and quality table for one or more models.
    Bench(BenchArgs),
    /// Sparsity x quantization-level grid.
    Sweep(SweepArgs),
    /// Describe a model or dataset file.
    Info(InfoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Training samples per environment.
    #[arg(long, default_value_t = 2048)]
    pub train: usize,
    /// Test samples per environment.
    #[arg(long, default_value_t = 512)]
    pub test: usize,
}

/// `0.25` or `1/4`.
pub fn parse_gamma(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("gamma must be in (0, 1], got {v}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training dataset (CSID).
    #[arg(long)]
    pub data: PathBuf,
    /// Codeword length over feedback length, e.g. 1/4.
    #[arg(long, value_parser = parse_gamma, default_value = "1/4")]
    pub gamma: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Model file to write; defaults to `<out-dir>/model-g<gamma>.csim`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Prune,
    Quantize,
    Cluster,
    PruneQuantize,
    ClusterQuantize,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::Prune => "prune",
            Technique::Quantize => "quantize",
            Technique::Cluster => "cluster",
            Technique::PruneQuantize => "prune-quantize",
            Technique::ClusterQuantize => "cluster-quantize",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    #[arg(value_enum)]
    pub technique: Technique,
    /// Trained model (CSIM).
    #[arg(long)]
    pub model: PathBuf,
    /// Training data for fine-tuning. Without it no fine-tuning happens.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fraction of each dense layer's weights set to zero.
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    /// Clusters per layer.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, value_parser = parse_init, default_value = "kmeanspp")]
    #[serde(serialize_with = "display")]
    pub init: ClusterInit,
    #[arg(long, value_parser = parse_level, default_value = "i8")]
    #[serde(serialize_with = "display")]
    pub level: QuantLevel,
    #[arg(long, default_value_t = 10)]
    pub fine_tune_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub fine_tune_lr: f64,
    /// Output model; defaults to `<out-dir>/<model stem>-<technique>.csim`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

pub fn precision_name(p: Option<QuantLevel>) -> String {
    p.map_or_else(|| "f32".to_string(), |l| l.to_string())
}

fn precisions<S: serde::Serializer>(v: &[Option<QuantLevel>], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&p| precision_name(p)))
}

fn parse_init(s: &str) -> Result<ClusterInit, String> {
    s.parse().map_err(|e: csi_compress::Error| e.to_string())
}

fn parse_level(s: &str) -> Result<QuantLevel, String> {
    s.parse().map_err(|e: csi_compress::Error| e.to_string())
}

/// Weight precision in a sweep: plain `f32` or one of the quantization levels.
pub fn parse_precision(s: &str) -> Result<Option<QuantLevel>, String> {
    match s {
        "f32" | "float32" => Ok(None),
        other => parse_level(other).map(Some),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test datasets (CSID); repeat the flag for several.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Run pruned layers through dense kernels.
    #[arg(long)]
    pub force_dense: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Models (CSIM); repeat the flag for several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Indoor-like test set for the quality columns.
    #[arg(long)]
    pub indoor: Option<PathBuf>,
    /// Outdoor-like test set for the quality columns.
    #[arg(long)]
    pub outdoor: Option<PathBuf>,
    /// Run pruned layers through dense kernels.
    #[arg(long)]
    pub force_dense: bool,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Samples per timed run.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// File stem of the CSV/JSON table.
    #[arg(long, default_value = "bench")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Trained model to prune at every grid sparsity.
    #[arg(long)]
    pub model: PathBuf,
    /// Training data for fine-tuning.
    #[arg(long)]
    pub data: PathBuf,
    /// Test set for the quality columns.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5,0.7,0.9")]
    pub sparsity: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_precision, default_value = "f32,f16,i8")]
    #[serde(serialize_with = "precisions")]
    pub levels: Vec<Option<QuantLevel>>,
    /// Fine-tuning epochs after pruning, the same for every sparsity.
    #[arg(long, default_value_t = 10)]
    pub fine_tune_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub fine_tune_lr: f64,
    /// Timed runs per cell; 0 skips timing.
    #[arg(long, default_value_t = 0)]
    pub runs: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct InfoArgs {
    /// A CSIM model or CSID dataset.
    pub path: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_forms() {
        assert_eq!(parse_gamma("1/4"), Ok(0.25));
        assert_eq!(parse_gamma("0.0625"), Ok(0.0625));
        assert!(parse_gamma("0").is_err());
        assert!(parse_gamma("3/2").is_err());
        assert!(parse_gamma("x").is_err());
    }

    #[test]
    fn precisions() {
        assert_eq!(parse_precision("f32"), Ok(None));
        assert_eq!(parse_precision("i8"), Ok(Some(QuantLevel::DynamicRangeI8)));
        assert!(parse_precision("f64").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
