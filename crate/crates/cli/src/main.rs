//! Command line front end for the simulator: run single experiments,
//! replica sweeps, and strategy comparisons from TOML configurations.
//!
//! Every run writes its artifacts into a fresh timestamped directory
//! under `$SPOTPIPE_OUT` (or `./runs`) unless `--out` pins one.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use spotpipe::churn::{self, ChurnModel};
use spotpipe::experiment::{
    compare_csv, compare_table, human_summary, prepare_output_dir, run_batch, run_compare,
    run_simulate,
};
use spotpipe::metrics::Prices;
use spotpipe::{load_config, Experiment};

#[derive(Parser)]
#[command(
    name = "spotpipe",
    version,
    about = "Simulates pipeline-parallel training on preemptible instance fleets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its event log, time buckets, and summary.
    Simulate(RunArgs),
    /// Sweep preemption probabilities with independent seeded replicas.
    Batch(RunArgs),
    /// Run several configurations against the same model and tabulate them.
    Compare(CompareArgs),
    /// Check configuration files and report every problem found.
    Validate(ValidateArgs),
    /// Churn trace utilities.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override a configuration value, e.g. --set churn.synthetic.seed=7.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment configurations; all must share one model profile.
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Override a configuration value in every listed configuration.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Configuration files to check.
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Overrides to apply before checking, e.g. --set run.replicas=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate a synthetic churn trace and write it as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Hourly per-node preemption probability.
    #[arg(long, default_value_t = ChurnModel::default().hourly_preemption_probability)]
    probability: f64,
    /// Fleet size the churn process tries to hold.
    #[arg(long, default_value_t = 32)]
    nodes: usize,
    /// Trace length in hours.
    #[arg(long, default_value_t = 24.0)]
    hours: f64,
    /// Mean nodes removed per preemption event (1 = only single victims).
    #[arg(long, default_value_t = ChurnModel::default().bulk_mean)]
    bulk_mean: f64,
    /// Probability that a whole burst lands in a single zone.
    #[arg(long, default_value_t = ChurnModel::default().same_zone_probability)]
    same_zone: f64,
    /// Mean allocation lag in seconds for replacement nodes.
    #[arg(long, default_value_t = ChurnModel::default().allocation_lag_mean_s)]
    lag: f64,
    /// Number of availability zones to spread nodes over.
    #[arg(long, default_value_t = ChurnModel::default().zone_count)]
    zones: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, short)]
    output: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Batch(args) => batch(&args),
        Command::Compare(args) => compare(&args),
        Command::Validate(args) => validate(&args),
        Command::Trace(TraceCommand::Synth(args)) => synth(&args),
    }
}

fn load(path: &Path, overrides: &[String]) -> Result<Experiment> {
    let base = path.parent().filter(|p| !p.as_os_str().is_empty());
    load_config(path, overrides)
        .and_then(|cfg| cfg.resolve(base.unwrap_or(Path::new("."))))
        .with_context(|| path.display().to_string())
}

fn simulate(args: &RunArgs) -> Result<()> {
    let exp = load(&args.config, &args.set)?;
    let dir = prepare_output_dir(args.out.as_deref(), &exp, "simulate")?;
    let out = run_simulate(&exp, &dir)?;
    let prices = Prices::from_cluster(&exp.cluster);
    println!("{}", human_summary(&out.result, &prices));
    println!("wrote {}", dir.display());
    Ok(())
}

fn batch(args: &RunArgs) -> Result<()> {
    let exp = load(&args.config, &args.set)?;
    let dir = prepare_output_dir(args.out.as_deref(), &exp, "batch")?;
    let summaries = run_batch(&exp, &dir)?;
    for s in &summaries {
        println!(
            "p={:<5}  throughput {:>8.2}/s  cost {:>6.2}/h  value {:>6.3}  \
             live {:>6.2}  interval {:>8.3} h  fatal {:>5.2}",
            format!("{:.3}", s.probability),
            s.throughput,
            s.cost_rate_per_hour,
            s.value,
            s.mean_live_nodes,
            s.mean_preemption_interval_s / 3600.0,
            s.mean_fatal_restarts,
        );
    }
    println!("wrote {}", dir.join("batch.csv").display());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let mut items = Vec::with_capacity(args.configs.len());
    let mut labels: Vec<String> = Vec::new();
    for path in &args.configs {
        let label = unique_label(path, &labels);
        labels.push(label.clone());
        items.push((label, load(path, &args.set)?));
    }

    let dir = prepare_output_dir(args.out.as_deref(), &items[0].1, "compare")?;
    if let [(_, exp)] = items.as_slice() {
        // One configuration has nothing to compare against; report it
        // the way `simulate` would.
        let out = run_simulate(exp, &dir)?;
        println!("{}", human_summary(&out.result, &Prices::from_cluster(&exp.cluster)));
        println!("wrote {}", dir.display());
        return Ok(());
    }

    let rows = run_compare(&items)?;
    let csv_path = dir.join("compare.csv");
    fs::write(&csv_path, compare_csv(&rows))
        .with_context(|| csv_path.display().to_string())?;
    print!("{}", compare_table(&rows));
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<()> {
    let mut failures = 0usize;
    for path in &args.configs {
        match load(path, &args.set) {
            Ok(_) => println!("ok: {}", path.display()),
            Err(err) => {
                failures += 1;
                eprintln!("invalid: {err:#}");
            }
        }
    }
    if failures > 0 {
        return Err(anyhow!(
            "{failures} of {} configuration(s) failed validation",
            args.configs.len()
        ));
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let model = ChurnModel {
        hourly_preemption_probability: args.probability,
        bulk_mean: args.bulk_mean,
        same_zone_probability: args.same_zone,
        allocation_lag_mean_s: args.lag,
        zone_count: args.zones,
    };
    let events = churn::synthesize(&model, args.nodes, args.hours * 3600.0, args.seed)?;
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
        }
    }
    fs::write(&args.output, churn::to_csv(&events))
        .with_context(|| args.output.display().to_string())?;
    println!("wrote {} events to {}", events.len(), args.output.display());
    Ok(())
}

/// Labels a comparison column after its file stem, suffixing duplicates
/// so two files named `config.toml` stay distinguishable.
fn unique_label(path: &Path, used: &[String]) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if !used.contains(&stem) {
        return stem;
    }
    for n in 2.. {
        let candidate = format!("{stem}-{n}");
        if !used.contains(&candidate) {
            return candidate;
        }
    }
    unreachable!("label space exhausted");
}
