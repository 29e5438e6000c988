//! `beamlora` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 bad command line,
//! 3 invalid config (message names the line), 4 training diverged (the
//! partial run directory is still written).

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beamlora::analysis::{
    decile_fractions, importance_profile, prune_sweep_checkpoint, write_prune_csv, SweepOrder,
};
use beamlora::checkpoint::Checkpoint;
use beamlora::io::{self as runio, RunDir};
use beamlora::sweep::{run_sweep, SweepSpec};
use beamlora::train::RunStatus;
use beamlora::{Error, ImportanceMode, Mode, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

/// Overrides the root that relative output directories resolve against.
const OUT_ROOT_ENV: &str = "BEAMLORA_OUT_ROOT";

#[derive(Parser)]
#[command(name = "beamlora", version, about = "Train, sweep and analyse rank-competing low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    LeastFirst,
    MostFirst,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its run directory.
    Train(RunArgs),
    /// Zero growing fractions of ranks in a trained checkpoint and report eval loss.
    PruneSweep {
        /// Run directory holding `checkpoint.json`, or the checkpoint file itself.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "frobenius")]
        importance: ImportanceMode,
        #[arg(long, value_enum, default_value = "both")]
        order: OrderArg,
        /// Comma-separated fractions in [0, 1]; deciles by default.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spatial (decile) and temporal importance tables from a run directory.
    Profile {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "frobenius")]
        importance: ImportanceMode,
        /// Directory for the two CSV files; the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one axis of values over paired seeds against a plain baseline.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// One of rank, p_init, delta_t, ablation.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
        /// Number of seeds, counting up from the config's seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Run(Error),
    Diverged { step: usize, loss: f64, dir: PathBuf },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Run(Error::Config(_) | Error::Toml(_)) => 3,
            Failure::Diverged { .. } => 4,
            Failure::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Run(e) => write!(f, "{e}"),
            Failure::Diverged { step, loss, dir } => write!(
                f,
                "training diverged at step {step} (loss {loss}); partial record in {}",
                dir.display()
            ),
        }
    }
}

fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Loads the config and applies command-line overrides. Returns the config
/// and the resolved output directory.
fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = resolve_out(&cfg.out_dir);
    Ok((cfg, out))
}

fn train(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, out) = load_config(args)?;
    let record = runio::execute(&cfg, Some(&out))?;
    if let RunStatus::Diverged { step, loss } = record.status {
        return Err(Failure::Diverged { step, loss, dir: out });
    }
    let applied = record.events.iter().filter(|e| e.k > 0).count();
    println!("run directory: {}", out.display());
    println!(
        "mode {} seed {}: {} steps, {} operation events ({applied} with K > 0)",
        cfg.mode,
        cfg.seed,
        record.metrics.len(),
        record.events.len()
    );
    println!("eval loss {:.6} -> {:.6}", record.initial_eval_loss, record.final_eval_loss().unwrap_or(f64::NAN));
    Ok(())
}

fn prune_sweep(
    checkpoint: &Path,
    importance: ImportanceMode,
    order: OrderArg,
    fractions: Option<Vec<f64>>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let path = if checkpoint.is_dir() {
        RunDir::new(checkpoint).checkpoint()
    } else {
        checkpoint.to_path_buf()
    };
    let ck = Checkpoint::load(&path)?;
    let fractions = fractions.unwrap_or_else(decile_fractions);
    let orders = match order {
        OrderArg::LeastFirst => vec![SweepOrder::LeastFirst],
        OrderArg::MostFirst => vec![SweepOrder::MostFirst],
        OrderArg::Both => vec![SweepOrder::LeastFirst, SweepOrder::MostFirst],
    };
    let mut buf = Vec::new();
    for (i, o) in orders.into_iter().enumerate() {
        let points = prune_sweep_checkpoint(&ck, importance, o, &fractions)?;
        let mut part = Vec::new();
        write_prune_csv(&mut part, o, &points)?;
        // keep a single header
        let text = String::from_utf8(part).expect("csv output is utf-8");
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
        buf.extend_from_slice(body.as_bytes());
    }
    match out {
        Some(p) => fs::write(p, buf)?,
        None => io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn profile(run: &Path, importance: ImportanceMode, out: Option<&Path>) -> Result<(), Failure> {
    let rd = RunDir::new(run);
    let samples = runio::read_importance(&rd.importance())?;
    let profile = importance_profile(&samples, importance)?;
    let out = out.unwrap_or(run);
    fs::create_dir_all(out)?;
    let spatial = out.join(format!("profile-spatial-{}.csv", importance.as_str()));
    let temporal = out.join(format!("profile-temporal-{}.csv", importance.as_str()));
    profile.write_spatial(File::create(&spatial)?)?;
    profile.write_temporal(File::create(&temporal)?)?;
    println!("{}", spatial.display());
    println!("{}", temporal.display());
    Ok(())
}

fn sweep(run: &RunArgs, axis: &str, values: &str, seeds: u64) -> Result<(), Failure> {
    let (cfg, out) = load_config(run)?;
    let spec = SweepSpec::parse(axis, values, (cfg.seed..cfg.seed + seeds).collect())?;
    let summary = run_sweep(&cfg, &spec, Some(&out))?;
    fs::create_dir_all(&out)?;
    let table = out.join("summary.csv");
    summary.write_csv(File::create(&table)?)?;
    println!("{:<14} {:<14} {:>4} {:>12} {:>12} {:>12} {:>6} {:>4}", axis, "mode", "n", "mean", "stddev", "lora mean", "wins", "pos");
    for c in &summary.cells {
        println!(
            "{:<14} {:<14} {:>4} {:>12.6} {:>12.6} {:>12.6} {:>6} {:>4}",
            c.value.to_string(),
            c.mode.to_string(),
            c.runs.len(),
            c.mean,
            c.stddev,
            c.baseline_mean,
            c.wins,
            c.position
        );
    }
    for f in &summary.failures {
        eprintln!("failed: {} ({}) seed {}: {}", f.value, f.mode, f.seed, f.error);
    }
    println!("summary: {}", table.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::PruneSweep {
            checkpoint,
            importance,
            order,
            fractions,
            out,
        } => prune_sweep(checkpoint, *importance, *order, fractions.clone(), out.as_deref()),
        Command::Profile { run, importance, out } => profile(run, *importance, out.as_deref()),
        Command::Sweep { run, axis, values, seeds } => sweep(run, axis, values, *seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
