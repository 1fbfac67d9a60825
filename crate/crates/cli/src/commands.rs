use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use csi_compress::bench::{bench_inference, emit_report, BenchConfig, BenchReport, TimingReport};
use csi_compress::channel::{export_dataset, generate_split, import_dataset, Dataset, Environment, ScenarioConfig};
use csi_compress::compress::{
    cluster_weights, fine_tune, prune_magnitude, quantize, ClusterConfig, FineTuneConfig, PruneConfig,
};
use csi_compress::engine::{plan, reconstruct};
use csi_compress::metrics::{quality, QualityReport};
use csi_compress::model::{train as train_model, Model, ModelSpec, TrainConfig};
use csi_compress::model_io::{load, save, size_of, MODEL_MAGIC};
use csi_compress::store::{Values, WeightStore};
use csi_compress::tensor::Tensor;
use csi_compress::Error;
use serde::Serialize;

use crate::args::*;
use crate::manifest::Run;

const EVAL_BATCH: usize = 64;

fn load_model(path: &Path) -> anyhow::Result<Model> {
    load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    import_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Reconstruction quality as produced by the execution plan.
pub fn evaluate(model: &Model, data: &Dataset, force_dense: bool, batch: usize) -> csi_compress::Result<QualityReport> {
    let p = plan(model, force_dense)?;
    let (rec, _) = reconstruct(&p, data, batch)?;
    quality(data, &rec)
}

/// Short name of the compression state of a model's dense layers.
pub fn describe(model: &Model) -> String {
    let (mut sparse, mut clustered, mut level) = (false, false, None);
    for (_, d) in model.dense_layers() {
        let values = match &d.weights {
            WeightStore::DenseF32(_) => None,
            WeightStore::DenseF16(_) => Some("f16"),
            WeightStore::QuantizedI8 { .. } => Some("i8"),
            WeightStore::SparseBitmap { values, .. } => {
                sparse = true;
                precision_of(values)
            }
            WeightStore::Clustered { centroids, .. } => {
                clustered = true;
                precision_of(centroids)
            }
        };
        level = level.or(values);
    }
    let base = match (sparse, clustered) {
        (true, _) => "prune",
        (_, true) => "cluster",
        _ => "",
    };
    match (base, level) {
        ("", None) => "original".into(),
        ("", Some(l)) => format!("quantize-{l}"),
        (b, None) => b.into(),
        (b, Some(l)) => format!("{b}-quantize-{l}"),
    }
}

fn precision_of(v: &Values) -> Option<&'static str> {
    match v {
        Values::F32(_) => None,
        Values::F16(_) => Some("f16"),
        Values::I8 { .. } => Some("i8"),
    }
}

pub fn gen_data(global: &Global, args: &GenDataArgs) -> anyhow::Result<()> {
    let mut run = Run::start("gen-data", global, args)?;
    for (i, env) in [Environment::IndoorLike, Environment::OutdoorLike].into_iter().enumerate() {
        let cfg = ScenarioConfig::new(env, global.profile.into(), global.seed.wrapping_mul(2).wrapping_add(i as u64));
        let (train, test) = generate_split(&cfg, args.train, args.test)?;
        for (split, data) in [("train", &train), ("test", &test)] {
            let path = global.out_dir.join(format!("{}_{split}.csid", env.tag()));
            let bytes = export_dataset(data, &path).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("{}: {} samples, {bytes} bytes", path.display(), data.len());
            run.output(path);
        }
    }
    run.finish("gen-data")?;
    Ok(())
}

fn gamma_label(gamma: f64) -> String {
    let inv = 1.0 / gamma;
    if (inv - inv.round()).abs() < 1e-9 {
        format!("1-{}", inv.round())
    } else {
        format!("{gamma}")
    }
}

pub fn train(global: &Global, args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start("train", global, args)?;
    let data = load_data(&args.data)?;
    let spec = ModelSpec::new(data.rows(), data.antennas(), args.gamma)?;
    let mut model = Model::build(spec, global.seed);
    let report = train_model(
        &mut model,
        &data,
        &TrainConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            learning_rate: args.learning_rate,
            seed: global.seed,
        },
    )?;
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| global.out_dir.join(format!("model-g{}.csim", gamma_label(args.gamma))));
    let bytes = save(&model, &output).with_context(|| format!("writing {}", output.display()))?;
    let loss_path = output.with_extension("loss.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.loss_history.iter().enumerate() {
        writeln!(csv, "{},{l}", e + 1)?;
    }
    write_text(&loss_path, &csv)?;
    eprintln!(
        "{}: M={} {bytes} bytes, final loss {}",
        output.display(),
        model.spec.codeword_len,
        report.loss_history.last().copied().unwrap_or(f32::NAN)
    );
    run.output(&output);
    run.output(&loss_path);
    run.finish(&stem(&output))?;
    Ok(())
}

/// Applies one technique; fine-tunes when training data is given.
pub fn apply_technique(
    model: &Model,
    technique: Technique,
    args: &CompressArgs,
    data: Option<&Dataset>,
    seed: u64,
) -> csi_compress::Result<Model> {
    let ft = FineTuneConfig {
        epochs: args.fine_tune_epochs,
        learning_rate: args.fine_tune_lr,
        seed,
        ..FineTuneConfig::default()
    };
    let tune = |m: Model| match data {
        Some(d) if ft.epochs > 0 => fine_tune(&m, d, &ft),
        _ => Ok(m),
    };
    let prune = || {
        let cfg = PruneConfig {
            fine_tune: ft,
            ..PruneConfig::new(args.ratio)
        };
        prune_magnitude(model, &cfg).and_then(tune)
    };
    let cluster = || {
        let cfg = ClusterConfig {
            k: args.k,
            init: args.init,
            seed,
            fine_tune: ft,
            ..ClusterConfig::default()
        };
        cluster_weights(model, &cfg).and_then(tune)
    };
    Ok(match technique {
        Technique::Prune => prune()?,
        Technique::Cluster => cluster()?,
        Technique::Quantize => quantize(model, args.level),
        Technique::PruneQuantize => quantize(&prune()?, args.level),
        Technique::ClusterQuantize => quantize(&cluster()?, args.level),
    })
}

pub fn compress(global: &Global, args: &CompressArgs) -> anyhow::Result<()> {
    let mut run = Run::start("compress", global, args)?;
    let model = load_model(&args.model)?;
    let data = args.data.as_deref().map(load_data).transpose()?;
    let out = apply_technique(&model, args.technique, args, data.as_ref(), global.seed)?;
    let output = args.output.clone().unwrap_or_else(|| {
        global
            .out_dir
            .join(format!("{}-{}.csim", stem(&args.model), args.technique.name()))
    });
    let bytes = save(&out, &output).with_context(|| format!("writing {}", output.display()))?;
    let before = size_of(&model);
    eprintln!(
        "{}: {bytes} bytes ({:.1}% smaller than {before})",
        output.display(),
        100.0 * (1.0 - bytes as f64 / before as f64)
    );
    run.output(&output);
    run.finish(&stem(&output))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    dataset: PathBuf,
    #[serde(flatten)]
    quality: QualityReport,
}

pub fn eval(global: &Global, args: &EvalArgs) -> anyhow::Result<()> {
    let mut run = Run::start("eval", global, args)?;
    let model = load_model(&args.model)?;
    let mut rows = Vec::new();
    for path in &args.data {
        let data = load_data(path)?;
        let q = evaluate(&model, &data, args.force_dense, args.batch_size)?;
        println!("{}: NMSE {:.4} dB, rho {:.5} ({} samples)", path.display(), q.nmse_db, q.rho, q.samples);
        rows.push(EvalRow { dataset: path.clone(), quality: q });
    }
    let name = format!("eval-{}", stem(&args.model));
    let mut csv = String::from("dataset,samples,excluded,nmse_db,rho\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.dataset.display(),
            r.quality.samples,
            r.quality.excluded,
            r.quality.nmse_db,
            r.quality.rho
        )?;
    }
    let (csv_path, json_path) = (global.out_dir.join(format!("{name}.csv")), global.out_dir.join(format!("{name}.json")));
    write_text(&csv_path, &csv)?;
    write_json(&json_path, &rows)?;
    run.output(csv_path);
    run.output(json_path);
    run.finish(&name)?;
    Ok(())
}

fn timing_input(model: &Model, data: Option<&Dataset>, batch: usize) -> csi_compress::Result<Tensor<f32>> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch must be positive".into()));
    }
    match data {
        Some(d) if d.len() >= batch => d.tensor().slice_batch(0, batch),
        _ => {
            let s = model.spec.sample_shape();
            Ok(Tensor::full(vec![batch, s[0], s[1], s[2]], 0.5))
        }
    }
}

pub fn bench(global: &Global, args: &BenchArgs) -> anyhow::Result<()> {
    let mut run = Run::start("bench", global, args)?;
    let indoor = args.indoor.as_deref().map(load_data).transpose()?;
    let outdoor = args.outdoor.as_deref().map(load_data).transpose()?;
    let cfg = BenchConfig {
        warmup: args.warmup,
        runs: args.runs,
    };
    let mut reports = Vec::new();
    for path in &args.models {
        let model = load_model(path)?;
        let p = plan(&model, args.force_dense)?;
        let x = timing_input(&model, indoor.as_ref(), args.batch)?;
        let timing = bench_inference(&p, &x, &cfg)?;
        let q = |d: &Option<Dataset>| d.as_ref().map(|d| evaluate(&model, d, args.force_dense, EVAL_BATCH)).transpose();
        let report = BenchReport {
            model: stem(path),
            gamma: model.spec.gamma,
            technique: describe(&model),
            size_bytes: size_of(&model),
            timing,
            indoor: q(&indoor)?,
            outdoor: q(&outdoor)?,
        };
        println!(
            "{} [{}]: {} bytes, median {:.2} us/sample, {} MACs/run",
            report.model, report.technique, report.size_bytes, report.timing.median_us, report.timing.macs
        );
        reports.push(report);
    }
    let (csv, json) = emit_report(&reports, &global.out_dir, &args.name)?;
    run.output(csv);
    run.output(json);
    run.finish(&args.name)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub sparsity: f64,
    pub level: String,
    pub size_bytes: u64,
    pub nmse_db: f64,
    pub rho: f64,
    pub timing: Option<TimingReport>,
}

pub fn sweep(global: &Global, args: &SweepArgs) -> anyhow::Result<()> {
    let mut run = Run::start("sweep", global, args)?;
    let base = load_model(&args.model)?;
    let train = load_data(&args.data)?;
    let test = load_data(&args.test)?;
    let ft = FineTuneConfig {
        epochs: args.fine_tune_epochs,
        learning_rate: args.fine_tune_lr,
        seed: global.seed,
        ..FineTuneConfig::default()
    };
    let mut rows = Vec::new();
    for &ratio in &args.sparsity {
        let pruned = prune_magnitude(&base, &PruneConfig::new(ratio))?;
        let tuned = if ft.epochs > 0 { fine_tune(&pruned, &train, &ft)? } else { pruned };
        for &level in &args.levels {
            let m = match level {
                Some(l) => quantize(&tuned, l),
                None => tuned.clone(),
            };
            let q = evaluate(&m, &test, false, EVAL_BATCH)?;
            let timing = if args.runs > 0 {
                let x = timing_input(&m, Some(&test), 1)?;
                Some(bench_inference(&plan(&m, false)?, &x, &BenchConfig { warmup: 10, runs: args.runs })?)
            } else {
                None
            };
            let row = SweepRow {
                sparsity: ratio,
                level: precision_name(level),
                size_bytes: size_of(&m),
                nmse_db: q.nmse_db,
                rho: q.rho,
                timing,
            };
            println!(
                "sparsity {:.2} {:>3}: {} bytes, NMSE {:.3} dB, rho {:.4}",
                row.sparsity, row.level, row.size_bytes, row.nmse_db, row.rho
            );
            rows.push(row);
        }
    }
    let mut csv = String::from("sparsity,level,size_bytes,nmse_db,rho,inference_us_median\n");
    for r in &rows {
        let t = r.timing.as_ref().map(|t| t.median_us.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{},{t}", r.sparsity, r.level, r.size_bytes, r.nmse_db, r.rho)?;
    }
    let (csv_path, json_path) = (global.out_dir.join("sweep.csv"), global.out_dir.join("sweep.json"));
    write_text(&csv_path, &csv)?;
    write_json(&json_path, &rows)?;
    run.output(csv_path);
    run.output(json_path);
    run.finish("sweep")?;
    Ok(())
}

pub fn info(global: &Global, args: &InfoArgs) -> anyhow::Result<()> {
    let run = Run::start("info", global, args)?;
    let bytes = std::fs::read(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    if bytes.starts_with(MODEL_MAGIC) {
        let model = load_model(&args.path)?;
        let s = &model.spec;
        println!(
            "model: {}x{}x{} input, gamma {}, codeword {}, {} parameters, {} bytes [{}]",
            s.planes,
            s.rows,
            s.antennas,
            s.gamma,
            s.codeword_len,
            model.parameter_count(),
            size_of(&model),
            describe(&model)
        );
        for (i, layer) in model.layers.iter().enumerate() {
            match layer.weights() {
                Some(w) => println!(
                    "  {i:>2} {:<10?} {:<13?} {:>7} weights, sparsity {:.3}, {} payload bytes",
                    layer.kind(),
                    w.tag(),
                    w.len(),
                    w.sparsity(),
                    w.payload_bytes()
                ),
                None => println!("  {i:>2} {:?}", layer.kind()),
            }
        }
    } else {
        let data = load_data(&args.path)?;
        println!(
            "dataset: {} samples of 2x{}x{}, normalization offset {} scale {}",
            data.len(),
            data.rows(),
            data.antennas(),
            data.norm.offset,
            data.norm.scale
        );
    }
    run.finish("info")?;
    Ok(())
}
