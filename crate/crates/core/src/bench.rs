//! Latency measurement and the CSV/JSON report tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{run, ExecutionPlan};
use crate::error::{Error, Result};
use crate::metrics::QualityReport;
use crate::tensor::Tensor;

pub const MIN_RUNS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 10, runs: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub runs: usize,
    /// Samples per timed run; the statistics are per sample.
    pub batch: usize,
    pub median_us: f64,
    pub p5_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
    /// Multiply-accumulates of one run.
    pub macs: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Summarizes raw per-run durations in microseconds.
pub fn summarize(mut samples_us: Vec<f64>, warmup: usize, batch: usize, macs: u64) -> TimingReport {
    samples_us.sort_by(f64::total_cmp);
    let per = |v: f64| v / batch as f64;
    TimingReport {
        warmup,
        runs: samples_us.len(),
        batch,
        median_us: per(percentile(&samples_us, 50.0)),
        p5_us: per(percentile(&samples_us, 5.0)),
        p95_us: per(percentile(&samples_us, 95.0)),
        mean_us: per(samples_us.iter().sum::<f64>() / samples_us.len() as f64),
        macs,
    }
}

/// Times `runs` executions of `plan` on `input` after `warmup` untimed ones,
/// on the calling thread.
pub fn bench_inference(plan: &ExecutionPlan, input: &Tensor<f32>, config: &BenchConfig) -> Result<TimingReport> {
    if config.runs < MIN_RUNS {
        return Err(Error::InvalidConfig(format!(
            "at least {MIN_RUNS} timed runs are required, got {}",
            config.runs
        )));
    }
    let batch = input.shape().first().copied().unwrap_or(1).max(1);
    let (_, first) = run(plan, input)?;
    for _ in 1..config.warmup {
        std::hint::black_box(run(plan, input)?);
    }
    let mut samples = Vec::with_capacity(config.runs);
    for _ in 0..config.runs {
        let start = Instant::now();
        let (out, counters) = run(plan, std::hint::black_box(input))?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(out);
        if counters != first {
            return Err(Error::Invariant("work counters changed between identical runs".into()));
        }
    }
    Ok(summarize(samples, config.warmup, batch, first.macs))
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub gamma: f64,
    pub technique: String,
    pub size_bytes: u64,
    pub timing: TimingReport,
    pub indoor: Option<QualityReport>,
    pub outdoor: Option<QualityReport>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "gamma",
    "model",
    "size_bytes",
    "inference_us_median",
    "inference_us_p5",
    "inference_us_p95",
    "indoor_nmse_db",
    "indoor_rho",
    "outdoor_nmse_db",
    "outdoor_rho",
    "macs",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let row = [
            r.gamma.to_string(),
            csv_field(&r.model),
            r.size_bytes.to_string(),
            r.timing.median_us.to_string(),
            r.timing.p5_us.to_string(),
            r.timing.p95_us.to_string(),
            opt(r.indoor.map(|q| q.nmse_db)),
            opt(r.indoor.map(|q| q.rho)),
            opt(r.outdoor.map(|q| q.nmse_db)),
            opt(r.outdoor.map(|q| q.rho)),
            r.timing.macs.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` side by side; returns both paths.
pub fn emit_report(reports: &[BenchReport], dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&csv, to_csv(reports))?;
    let mut w = BufWriter::new(File::create(&json)?);
    serde_json::to_writer_pretty(&mut w, reports).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok((csv, json))
}
