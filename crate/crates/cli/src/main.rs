//! `sparseconv`: prune, quantize, convert, benchmark, configure and run
//! sparse convolutional models.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sparseconv_core::csr::analyze_sparsity;
use sparseconv_core::harness::{
    bench_layer, bench_layer_with, check_batch, configure_network, preset, render_report, sparsity_sweep, verify_config,
    BenchOptions, BenchRecord, LayerSource, LayerSpec, ReportFormat, END_TO_END_TOLERANCE,
};
use sparseconv_core::pipeline::{model_split, run_toy, ToyConfig};
use sparseconv_core::quant::{apply_quantization, QuantOptions, Scheme, Targets};
use sparseconv_core::store::{load_config, load_model, load_tensor, save_config, save_model, save_tensor};
use sparseconv_core::timing::TimingConfig;
use sparseconv_core::{max_rel_error, Algorithm, ConvLayerDense, DType, Error, Tensor4D};

#[derive(Parser)]
#[command(name = "sparseconv", version, about = "Direct sparse convolution toolkit")]
struct Cli {
    /// Seed for every randomized step; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for convolution (0 = all hardware threads).
    #[arg(long, global = true, env = "SPARSECONV_WORKERS", default_value_t = 0)]
    workers: usize,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy network and run the evolutionary pruning search.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize weights and optionally activations of a stored model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// fixed:N, affine:N, symmetric:N or codebook:K
        #[arg(long)]
        scheme: Scheme,
        #[arg(long, default_value = "weights")]
        targets: Targets,
        /// Output directory; defaults to rewriting the input model.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave the classifier head in full precision.
        #[arg(long)]
        no_head: bool,
        /// Round affine codes with ceil instead of round-half-away.
        #[arg(long)]
        ceil_compat: bool,
        /// Training images used to calibrate activation ranges.
        #[arg(long, default_value_t = 256)]
        calibration_samples: usize,
    },
    /// Convert every dense conv layer to unified-sparsity CSR.
    BuildCsr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time sparse and dense convolution on preset layers or a model.
    Bench {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        preset: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, value_delimiter = ',', default_value = "f32,f16")]
        dtypes: Vec<DType>,
        /// Report file; format follows the extension (.csv, .json, .md).
        /// Relative paths resolve against SPARSECONV_REPORT_DIR when set.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        format: Option<ReportFormat>,
        /// Only layers whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also sweep sparse-direct over these sparsities and estimate the
        /// crossover point per distinct layer shape.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
    },
    /// Benchmark a model's layers and write the fastest execution plan.
    Configure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, value_delimiter = ',', default_value = "f32")]
        dtypes: Vec<DType>,
        /// Images used to verify configured against dense inference.
        #[arg(long, default_value_t = 64)]
        check_samples: usize,
    },
    /// Run a model on a tensor file and check the configured network
    /// against all-dense inference.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write validation images of a model's dataset as a tensor file.
    GenInput {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    /// Timed repetitions per candidate (at least 5).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Use this sub-batch size instead of tuning it.
    #[arg(long)]
    sub_batch: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sparse-direct,dense-direct,dense-gemm")]
    algorithms: Vec<Algorithm>,
    #[arg(long, default_value_t = 2048)]
    memory_budget_mib: usize,
}

impl TimingArgs {
    fn options(&self, dtypes: &[DType], workers: usize, seed: u64) -> BenchOptions {
        BenchOptions {
            batch: self.batch,
            dtypes: dtypes.to_vec(),
            algorithms: self.algorithms.clone(),
            workers,
            timing: TimingConfig::new(self.warmups, self.reps),
            seed,
            tune: self.sub_batch.is_none(),
            sub_batch: self.sub_batch.unwrap_or(8),
            memory_budget_bytes: self.memory_budget_mib << 20,
        }
    }
}

/// Exit status for an error: 2 bad input or configuration, 3 unreadable or
/// malformed files, 4 violated invariants, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Format(_) | Error::Checksum { .. } | Error::Version { .. } | Error::Json(_) | Error::Io { .. } => 3,
            Error::Invariant(_) | Error::Integrity(_) => 4,
            Error::Training(_) => 1,
        };
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let workers = cli.workers;
    match cli.command {
        Command::Prune { config, out } => prune(&config, &out, seed),
        Command::Quantize {
            model,
            scheme,
            targets,
            out,
            no_head,
            ceil_compat,
            calibration_samples,
        } => {
            let opts = QuantOptions {
                include_head: !no_head,
                ceil_compat,
                seed: seed.unwrap_or(0),
                ..QuantOptions::default()
            };
            quantize(&model, out.as_deref(), scheme, targets, &opts, calibration_samples)
        }
        Command::BuildCsr { model, out } => build_csr(&model, out.as_deref()),
        Command::Bench {
            preset,
            model,
            timing,
            dtypes,
            report,
            format,
            filter,
            sweep,
        } => {
            let opts = timing.options(&dtypes, workers, seed.unwrap_or(0));
            bench(preset.as_deref(), model.as_deref(), &opts, report, format, filter.as_deref(), sweep.as_deref())
        }
        Command::Configure {
            model,
            out,
            timing,
            dtypes,
            check_samples,
        } => {
            let opts = timing.options(&dtypes, workers, seed.unwrap_or(0));
            configure(&model, &out, &opts, check_samples)
        }
        Command::Infer { model, config, input } => infer(&model, config.as_deref(), &input),
        Command::GenInput { model, out, count } => gen_input(&model, &out, count, seed.unwrap_or(0)),
    }
}

fn prune(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Io {
        path: config.into(),
        source: e,
    })?;
    let mut cfg: ToyConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let run = run_toy(&cfg)?;
    save_model(&run.model, out)?;
    let log_path = out.join("prune_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    for r in &run.history {
        writeln!(log, "{}", serde_json::to_string(r)?).with_context(|| format!("writing {}", log_path.display()))?;
    }
    println!(
        "{}",
        json!({
            "model": out,
            "baseline_accuracy": run.baseline_accuracy,
            "pruned_accuracy": run.pruned_accuracy,
            "weighted_sparsity": run.model.weighted_sparsity(),
            "layer_sparsity": run.model.layers.iter().map(|l| l.weights.sparsity()).collect::<Vec<_>>(),
            "met_target": run.met_target,
            "iterations": run.history.len(),
        })
    );
    Ok(())
}

fn quantize(
    dir: &Path,
    out: Option<&Path>,
    scheme: Scheme,
    targets: Targets,
    opts: &QuantOptions,
    calibration_samples: usize,
) -> Result<()> {
    let model = load_model(dir)?;
    let split = model_split(&model).ok();
    let calibration = match &split {
        Some((train, _)) if targets.activations => {
            let idx: Vec<usize> = (0..calibration_samples.min(train.len())).collect();
            Some(train.to_tensor::<f32>(&idx))
        }
        _ if targets.activations => {
            log::warn!("model has no dataset; calibrating activations on seeded noise");
            Some(check_batch(&model, None, calibration_samples, opts.seed))
        }
        _ => None,
    };
    let mut q = apply_quantization(&model, scheme, targets, calibration.as_ref(), opts)?;
    let accuracy = match &split {
        Some((_, val)) => Some((model.accuracy(val, None, 256)?, q.accuracy(val, None, 256)?)),
        None => None,
    };
    if let serde_json::Value::Object(m) = &mut q.provenance {
        m.insert("quantize_options".into(), serde_json::to_value(opts)?);
    }
    save_model(&q, out.unwrap_or(dir))?;
    let info = q.quant.as_ref().expect("set by apply_quantization");
    println!(
        "{}",
        json!({
            "model": out.unwrap_or(dir),
            "scheme": scheme.to_string(),
            "targets": targets.to_string(),
            "saturated": info.saturated,
            "accuracy_before": accuracy.map(|a| a.0),
            "accuracy_after": accuracy.map(|a| a.1),
        })
    );
    Ok(())
}

fn build_csr(dir: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(dir)?;
    for l in &model.layers {
        let report = analyze_sparsity(&*l.weights.dense()?)?;
        let fv = l.shape.filter_volume();
        println!(
            "{}",
            json!({
                "layer": l.name,
                "storage_before": l.weights.storage(),
                "per_channel_nnz": report.per_channel_nnz,
                "unified_nnz": report.unified_nnz,
                "padded_zero_count": report.padded_zero_count,
                "layer_sparsity": report.layer_sparsity,
                "unified_density": report.unified_density(fv),
            })
        );
    }
    let csr = model.to_csr()?;
    save_model(&csr, out.unwrap_or(dir))?;
    Ok(())
}

fn report_path(report: PathBuf) -> PathBuf {
    match std::env::var_os("SPARSECONV_REPORT_DIR") {
        Some(dir) if report.is_relative() => Path::new(&dir).join(report),
        _ => report,
    }
}

fn bench(
    preset_name: Option<&str>,
    model_dir: Option<&Path>,
    opts: &BenchOptions,
    report: Option<PathBuf>,
    format: Option<ReportFormat>,
    filter: Option<&str>,
    sweep: Option<&[f64]>,
) -> Result<()> {
    let keep = |name: &str| filter.is_none_or(|f| name.contains(f));
    let mut records: Vec<BenchRecord> = Vec::new();
    let mut specs = Vec::new();
    let mut notes = Vec::new();
    if let Some(name) = preset_name {
        for spec in preset(name)?.into_iter().filter(|s| keep(&s.name)) {
            log::info!("benchmarking {} at sparsity {}", spec.name, spec.sparsity);
            let b = bench_layer(&spec, opts)?;
            records.extend(b.records);
            notes.extend(b.note);
            specs.push(spec);
        }
    } else if let Some(dir) = model_dir {
        let model = load_model(dir)?;
        for l in model.layers.iter().filter(|l| keep(&l.name)) {
            let spec = LayerSpec {
                name: l.name.clone(),
                shape: l.shape,
                sparsity: l.weights.sparsity(),
                source: LayerSource::ModelFile,
            };
            let dense = ConvLayerDense::new(l.weights.dense()?.into_owned(), l.bias.clone(), l.shape)?;
            let b = bench_layer_with(&spec, &dense, &*l.weights.csr(&l.shape)?, opts)?;
            records.extend(b.records);
            notes.extend(b.note);
            specs.push(spec);
        }
    }
    let table = render_report(&records, ReportFormat::Markdown)?;
    print!("{table}");
    for n in &notes {
        println!("note: {n}");
    }
    let mut sweeps = Vec::new();
    if let Some(points) = sweep {
        let mut seen = HashSet::new();
        println!("\n| layer | crossover sparsity | spearman | best dense ms |\n|---|---|---|---|");
        for spec in specs.iter().filter(|s| seen.insert(s.shape)) {
            let s = sparsity_sweep(spec, points, opts)?;
            let cross = s.crossover.map_or("never".to_string(), |c| format!("{:.1}%", c * 100.0));
            println!("| {} | {cross} | {:.3} | {:.3} |", s.layer, s.spearman, s.best_dense_ms());
            sweeps.push(s);
        }
    }
    let target = report.map(report_path).or_else(|| {
        std::env::var_os("SPARSECONV_REPORT_DIR")
            .map(|d| Path::new(&d).join(format!("bench-{}.csv", preset_name.unwrap_or("model"))))
    });
    if let Some(path) = target {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.into(),
                source: e,
            })?;
        }
        let fmt = format.unwrap_or_else(|| ReportFormat::from_path(&path));
        sparseconv_core::harness::emit_report(&records, fmt, &path)?;
        if !sweeps.is_empty() {
            let sweep_path = path.with_extension("sweep.json");
            fs::write(&sweep_path, serde_json::to_string_pretty(&sweeps)? + "\n").map_err(|e| Error::Io {
                path: sweep_path,
                source: e,
            })?;
        }
        eprintln!("report written to {}", path.display());
    }
    Ok(())
}

fn configure(dir: &Path, out: &Path, opts: &BenchOptions, check_samples: usize) -> Result<()> {
    let model = load_model(dir)?;
    let val = model_split(&model).ok().map(|(_, v)| v);
    let x = check_batch(&model, val.as_ref(), check_samples, opts.seed);
    let cfg = configure_network(&model, &x, opts)?;
    save_config(&cfg, out)?;
    for l in &cfg.layers {
        println!(
            "{}",
            json!({
                "layer": l.name,
                "algorithm": l.algorithm,
                "dtype": l.dtype,
                "sub_batch_size": l.sub_batch_size,
                "sparsity": l.sparsity,
                "crossover_estimate": l.crossover_estimate,
                "note": l.note,
            })
        );
    }
    println!("{}", json!({ "config": out, "verified_rel_error": cfg.verified_rel_error }));
    Ok(())
}

fn infer(dir: &Path, config: Option<&Path>, input: &Path) -> Result<()> {
    let model = load_model(dir)?;
    let x = load_tensor(input)?;
    let dense = model.forward(&x, None)?;
    let (logits, rel_error) = match config {
        Some(path) => {
            let cfg = load_config(path)?;
            let rel = verify_config(&model, &cfg, &x)?;
            (model.forward(&x, Some(&cfg))?, rel)
        }
        None => (dense.clone(), 0.0),
    };
    let predictions: Vec<usize> = logits
        .chunks(model.classes())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    println!(
        "{}",
        json!({
            "samples": x.dims()[0],
            "predictions": predictions,
            "rel_error_vs_dense": rel_error,
            "max_abs_logit_diff": logits.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max),
            "tolerance": END_TO_END_TOLERANCE,
            "agrees": max_rel_error(&logits, &dense) <= END_TO_END_TOLERANCE,
        })
    );
    Ok(())
}

fn gen_input(dir: &Path, out: &Path, count: usize, seed: u64) -> Result<()> {
    let model = load_model(dir)?;
    let val = model_split(&model).ok().map(|(_, v)| v);
    let x: Tensor4D<f32> = check_batch(&model, val.as_ref(), count, seed);
    save_tensor(&x, out)?;
    println!("{}", json!({ "tensor": out, "dims": x.dims() }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use sparseconv_core::harness::PRESETS;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn presets_listed_in_help_exist() {
        for p in PRESETS {
            assert!(preset(p).is_ok());
        }
    }
}
