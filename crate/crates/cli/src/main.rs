mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use onetrans_core::bench::{
    ablation_csv, measure_runtime_memory, perf_csv, run_ablation, run_scaling, scaling_csv, Axis, ScalingSpec, Toggle,
    Variant,
};
use onetrans_core::cache::{verify_equivalence, EquivalenceReport, KVCacheStore};
use onetrans_core::checkpoint;
use onetrans_core::features::jsonl::{load_jsonl, write_jsonl, ErrorPolicy};
use onetrans_core::features::{generate_synthetic, Request, SynthConfig};
use onetrans_core::stack::OneTrans;
use onetrans_core::train::{evaluate, next_batch_loop, EvalLedger, OptimizerState, TrainingReport};
use onetrans_core::ModelConfig;

use config::RunConfig;

/// Unified-backbone ranking model: data generation, training, evaluation,
/// benchmarks and cache verification.
#[derive(Debug, Parser)]
#[command(name = "onetrans", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic request log as JSON lines.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with next-batch evaluation and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A JSON-lines file, or `synthetic` to generate from the config.
        #[arg(long)]
        data: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a request log with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; defaults to `<ckpt>.eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Bench(Bench),
    /// Check cached two-stage logits against monolithic logits.
    Verify {
        /// Checkpoint to verify; a freshly initialized tiny model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// JSON report; defaults to `verify_report.json`.
        #[arg(long, default_value = "verify_report.json")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct BenchCommon {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Bench {
    /// Train the reference and every single-axis variant.
    Ablation {
        #[command(flatten)]
        common: BenchCommon,
        #[arg(long)]
        budget_steps: Option<u64>,
    },
    /// Sweep sequence length, depth or width.
    Scaling {
        #[command(flatten)]
        common: BenchCommon,
        /// length, depth or width.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[arg(long)]
        budget_steps: Option<u64>,
    },
    /// Median serving time and peak memory with each toggle on and off.
    Perf {
        #[command(flatten)]
        common: BenchCommon,
        /// Comma-separated: pyramid, cache.
        #[arg(long, value_delimiter = ',', required = true)]
        toggles: Vec<String>,
        #[arg(long)]
        candidates: Option<usize>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(anyhow::Error),
    CheckFailed(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

impl From<onetrans_core::Error> for Failure {
    fn from(e: onetrans_core::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::CheckFailed(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Writes the effective configuration next to `out` as `<out>.config.toml`;
/// the file is itself a valid `--config`.
fn echo_config(out: &Path, command: &str, seed: u64, config: &RunConfig) -> Result<()> {
    let body = toml::to_string(config).context("serializing effective config")?;
    let text = format!("# command: {command}\n# seed: {seed}\n{body}");
    write_file(&with_suffix(out, ".config.toml"), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn read_requests(path: &Path) -> Result<Vec<Request>> {
    load_jsonl(path, ErrorPolicy::FailFast)
        .with_context(|| format!("opening {}", path.display()))?
        .collect::<onetrans_core::Result<Vec<_>>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Datagen { config, seed, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let requests: Vec<Request> = generate_synthetic(&cfg.data, seed)?.collect();
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &requests)?;
            write_file(&out, &buf)?;
            echo_config(&out, "datagen", seed, &cfg)?;
            log::info!("wrote {} requests to {}", requests.len(), out.display());
        }
        Command::Train { config, data, seed, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let requests: Vec<Request> = if data == "synthetic" {
                generate_synthetic(&cfg.data, seed)?.collect()
            } else {
                read_requests(Path::new(&data))?
            };
            let mut model = OneTrans::<f32>::new(cfg.model.clone(), seed)?;
            let mut state = OptimizerState::new(&model, cfg.train.optimizer.clone())?;
            let mut ledger = EvalLedger::default();
            let report = next_batch_loop(
                requests.into_iter().map(Ok),
                &mut model,
                &mut state,
                &mut ledger,
                &cfg.train,
            )?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            checkpoint::save(&model, &out).with_context(|| format!("saving {}", out.display()))?;
            write_file(&with_suffix(&out, ".metrics.csv"), report.to_csv().as_bytes())?;
            echo_config(&out, "train", seed, &cfg)?;
            log_summary(&report);
        }
        Command::Eval { ckpt, data, out } => {
            let mut model: OneTrans<f32> =
                checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let requests = read_requests(&data)?;
            let report = evaluate(requests.into_iter().map(Ok), &mut model, 256)?;
            let out = out.unwrap_or_else(|| with_suffix(&ckpt, ".eval.csv"));
            write_file(&out, report.to_csv().as_bytes())?;
            log_summary(&report);
        }
        Command::Bench(bench) => run_bench(bench)?,
        Command::Verify {
            model,
            seeds,
            tolerance,
            out,
        } => verify(model.as_deref(), seeds, tolerance, &out)?,
    }
    Ok(())
}

fn log_summary(report: &TrainingReport) {
    for s in &report.summary {
        log::info!(
            "{}: auc {} uauc {}",
            s.task.name(),
            s.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.uauc.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
}

fn run_bench(bench: Bench) -> Result<()> {
    match bench {
        Bench::Ablation { common, budget_steps } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if budget_steps.is_some() {
                cfg.train.max_steps = budget_steps;
            }
            let rows = run_ablation(&cfg.experiment(), &Variant::ALL, common.seed, cfg.train.max_steps)?;
            write_file(&common.out, ablation_csv(&rows).as_bytes())?;
            echo_config(&common.out, "bench ablation", common.seed, &cfg)?;
        }
        Bench::Scaling {
            common,
            axis,
            grid,
            budget_steps,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if budget_steps.is_some() {
                cfg.train.max_steps = budget_steps;
            }
            let spec = ScalingSpec {
                axis: Axis::parse(&axis)?,
                grid,
                seed: common.seed,
            };
            let rows = run_scaling(&cfg.experiment(), &spec, cfg.train.max_steps)?;
            write_file(&common.out, scaling_csv(&rows).as_bytes())?;
            echo_config(&common.out, "bench scaling", common.seed, &cfg)?;
        }
        Bench::Perf {
            common,
            toggles,
            candidates,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(c) = candidates {
                cfg.perf.candidates = c;
            }
            let toggles = toggles
                .iter()
                .map(|t| Toggle::parse(t.trim()))
                .collect::<onetrans_core::Result<Vec<_>>>()?;
            let rows = measure_runtime_memory(&cfg.model, &cfg.perf, &toggles, common.seed)?;
            write_file(&common.out, perf_csv(&rows).as_bytes())?;
            echo_config(&common.out, "bench perf", common.seed, &cfg)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    tolerance: f64,
    seeds: u64,
    worst: f64,
    pass: bool,
    requests: Vec<EquivalenceReport>,
}

fn verify(model_path: Option<&Path>, seeds: u64, tolerance: f64, out: &Path) -> Result<(), Failure> {
    if seeds == 0 || !(tolerance >= 0.0) {
        return Err(anyhow::anyhow!("--seeds must be positive and --tolerance non-negative").into());
    }
    let model: OneTrans<f32> = match model_path {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => OneTrans::new(ModelConfig::tiny(), 0)?,
    };
    let data = SynthConfig {
        users: 4,
        requests: 6,
        ..SynthConfig::small()
    };
    let mut requests = Vec::new();
    for seed in 0..seeds {
        let mut store = KVCacheStore::new(data.users).map_err(anyhow::Error::from)?;
        for r in generate_synthetic(&data, seed)? {
            requests.push(verify_equivalence(&model, &mut store, &r, tolerance)?);
        }
    }
    let worst = requests.iter().map(EquivalenceReport::worst).fold(0.0, f64::max);
    let pass = requests.iter().all(|r| r.pass);
    let report = VerifyReport {
        tolerance,
        seeds,
        worst,
        pass,
        requests,
    };
    let json = serde_json::to_vec_pretty(&report).context("serializing report")?;
    write_file(out, &json)?;
    log::info!("max |cached - monolithic| = {worst:.3e} over {seeds} seeds");
    if pass {
        Ok(())
    } else {
        Err(Failure::CheckFailed(format!("max diff {worst:.3e} exceeds tolerance {tolerance:e}")))
    }
}
