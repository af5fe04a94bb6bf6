//! Experiment orchestration: single runs, seeded replica batches, and
//! side-by-side strategy comparison, each writing its artifacts under an
//! output directory.
//!
//! Batch replicas are independent: each gets a seed derived from the config
//! seed, the probability lane, and the replica index, runs in isolation
//! (in parallel when the `parallel` feature is on), and writes its own
//! result file. A rerun skips replicas whose result file already parses,
//! so an interrupted batch resumes where it stopped and a finished batch
//! is idempotent.

use crate::config::Experiment;
use crate::metrics::{
    batch_csv, buckets_csv, buckets_gnuplot, cost_rate, summarize_batch, throughput, value,
    BatchSummary, Prices, RunResult,
};
use crate::sim::{self, events_csv, ChurnSource, RunConfig, SimOutput};
use crate::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SPOTPIPE_OUT";

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        path: path.into(),
        message: message.into(),
    }
}

/// Picks the directory a command writes into, in precedence order: an
/// explicit `--out`, the config's `run.output_dir`, then a fresh
/// `<command>-<timestamp>` directory under `$SPOTPIPE_OUT` or `./runs`.
/// The directory is created; only the timestamped form refuses to reuse
/// an existing one (it appends a counter instead, so runs never mix).
pub fn prepare_output_dir(explicit: Option<&Path>, exp: &Experiment, command: &str) -> Result<PathBuf> {
    if let Some(dir) = explicit.or(exp.output_dir.as_deref()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for counter in 0u32.. {
        let name = if counter == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{counter}")
        };
        let dir = root.join(name);
        match fs::create_dir_all(&dir) {
            Ok(()) if fs::read_dir(&dir).map(|mut d| d.next().is_none()).unwrap_or(false) => {
                return Ok(dir)
            }
            Ok(()) => continue,
            Err(e) => return Err(Error::io(dir.display().to_string(), e)),
        }
    }
    unreachable!("counter space exhausted")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run_config(exp: &Experiment) -> RunConfig<'_> {
    RunConfig {
        profile: &exp.profile,
        cluster: &exp.cluster,
        strategy: exp.strategy,
        stop: exp.stop,
        instance_class: exp.instance_class,
        data_parallel: exp.data_parallel,
    }
}

/// One line of human-readable summary for a finished run.
pub fn human_summary(result: &RunResult, prices: &Prices) -> String {
    let t = throughput(result).unwrap_or(0.0);
    let c = cost_rate(result, prices).unwrap_or(0.0);
    let v = if c > 0.0 { value(t, c).unwrap_or(0.0) } else { 0.0 };
    format!(
        "samples {}  wall {:.2} h  throughput {:.2}/s  cost {:.2}/h  value {:.3}  \
         preemptions {}  fatal {}  productive {:.1}%",
        result.samples_completed,
        result.wall_seconds / 3600.0,
        t,
        c,
        v,
        result.preemption_count,
        result.fatal_restarts,
        100.0 * result.time_split.productive_s / result.wall_seconds.max(f64::MIN_POSITIVE),
    )
}

/// Runs one simulation and writes `summary.json`, `events.csv`,
/// `buckets.csv`, and `buckets.gnuplot` into `dir`.
pub fn run_simulate(exp: &Experiment, dir: &Path) -> Result<SimOutput> {
    let out = sim::run(&run_config(exp), &exp.churn, &exp.params)?;
    let price = Prices::from_cluster(&exp.cluster).for_class(exp.instance_class.as_str())?;
    let json = serde_json::to_string_pretty(&out.result).expect("result serializes");
    write(&dir.join("summary.json"), &json)?;
    write(&dir.join("events.csv"), &events_csv(&out.events))?;
    write(&dir.join("buckets.csv"), &buckets_csv(&out.buckets, price))?;
    write(&dir.join("buckets.gnuplot"), &buckets_gnuplot(&out.buckets, price))?;
    Ok(out)
}

/// Stable per-replica seed: a bijective mix of the config seed, the
/// probability lane, and the replica index (splitmix64 finalizer), so
/// resuming or reordering a batch never changes any replica's stream.
pub fn replica_seed(base: u64, lane: u64, index: u64) -> u64 {
    let mut z = base
        ^ lane.rotate_left(32)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn probability_dir(dir: &Path, p: f64) -> PathBuf {
    dir.join(format!("p{p:.3}"))
}

/// Runs `replicas` seeded simulations per probability and writes one
/// `replica_NNNN.json` each, plus the merged `batch.csv`. Replicas whose
/// file already holds a parseable result are reused instead of re-run.
pub fn run_batch(exp: &Experiment, dir: &Path) -> Result<Vec<BatchSummary>> {
    let ChurnSource::Synthetic { model, seed } = &exp.churn else {
        return Err(bad("churn", "batch sweeps need synthetic churn, not a trace"));
    };
    let prices = Prices::from_cluster(&exp.cluster);

    struct Job {
        lane: usize,
        probability: f64,
        path: PathBuf,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (lane, &p) in exp.probabilities.iter().enumerate() {
        let p_dir = probability_dir(dir, p);
        fs::create_dir_all(&p_dir).map_err(|e| Error::io(p_dir.display().to_string(), e))?;
        for index in 0..exp.replicas {
            jobs.push(Job {
                lane,
                probability: p,
                path: p_dir.join(format!("replica_{index:04}.json")),
                seed: replica_seed(*seed, lane as u64, index as u64),
            });
        }
    }

    let run_one = |job: &Job| -> Result<(usize, RunResult)> {
        if let Ok(text) = fs::read_to_string(&job.path) {
            if let Ok(result) = serde_json::from_str::<RunResult>(&text) {
                return Ok((job.lane, result));
            }
        }
        let mut model = model.clone();
        model.hourly_preemption_probability = job.probability;
        let churn = ChurnSource::Synthetic {
            model,
            seed: job.seed,
        };
        let out = sim::run(&run_config(exp), &churn, &exp.params)?;
        let json = serde_json::to_string(&out.result).expect("result serializes");
        write(&job.path, &json)?;
        Ok((job.lane, out.result))
    };

    #[cfg(feature = "parallel")]
    let outcomes: Result<Vec<(usize, RunResult)>> = jobs.par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Result<Vec<(usize, RunResult)>> = jobs.iter().map(run_one).collect();

    let mut per_lane: Vec<Vec<RunResult>> = vec![Vec::new(); exp.probabilities.len()];
    for (lane, result) in outcomes? {
        per_lane[lane].push(result);
    }
    let mut summaries = Vec::with_capacity(per_lane.len());
    for (lane, results) in per_lane.iter().enumerate() {
        summaries.push(summarize_batch(exp.probabilities[lane], results, &prices)?);
    }
    write(&dir.join("batch.csv"), &batch_csv(&summaries))?;
    Ok(summaries)
}

/// One labeled column of a strategy comparison.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub result: RunResult,
    pub throughput: f64,
    pub cost_rate: f64,
    pub value: f64,
}

/// Runs each experiment once and lines the results up. All experiments
/// must train the same model profile, otherwise the numbers would not be
/// comparable.
pub fn run_compare(items: &[(String, Experiment)]) -> Result<Vec<CompareRow>> {
    let Some((_, first)) = items.first() else {
        return Err(bad("compare", "needs at least one experiment"));
    };
    for (label, exp) in items {
        if exp.profile != first.profile {
            return Err(bad(
                "compare",
                format!("`{label}` trains a different model profile"),
            ));
        }
    }
    let mut rows = Vec::with_capacity(items.len());
    for (label, exp) in items {
        let out = sim::run(&run_config(exp), &exp.churn, &exp.params)?;
        let prices = Prices::from_cluster(&exp.cluster);
        let t = throughput(&out.result)?;
        let c = cost_rate(&out.result, &prices)?;
        let v = if c > 0.0 { value(t, c)? } else { 0.0 };
        rows.push(CompareRow {
            label: label.clone(),
            result: out.result,
            throughput: t,
            cost_rate: c,
            value: v,
        });
    }
    Ok(rows)
}

/// Renders comparison rows as an aligned text table with the time split
/// as percentage columns.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>12} {:>10} {:>8} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6}\n",
        "strategy", "samples/s", "cost/h", "value", "prod%", "waste%", "rest%", "pause%", "prmt",
        "fatal"
    ));
    for row in rows {
        let split = &row.result.time_split;
        let wall = row.result.wall_seconds.max(f64::MIN_POSITIVE);
        out.push_str(&format!(
            "{:<24} {:>12.2} {:>10.2} {:>8.3} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>6} {:>6}\n",
            row.label,
            row.throughput,
            row.cost_rate,
            row.value,
            100.0 * split.productive_s / wall,
            100.0 * split.wasted_s / wall,
            100.0 * split.restarting_s / wall,
            100.0 * split.paused_s / wall,
            row.result.preemption_count,
            row.result.fatal_restarts,
        ));
    }
    out
}

/// Machine-readable form of [`compare_table`].
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "label,throughput_samples_per_s,cost_per_hour,value,productive_s,wasted_s,restarting_s,paused_s,preemptions,fatal_restarts\n",
    );
    for row in rows {
        let split = &row.result.time_split;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.label,
            row.throughput,
            row.cost_rate,
            row.value,
            split.productive_s,
            split.wasted_s,
            split.restarting_s,
            split.paused_s,
            row.result.preemption_count,
            row.result.fatal_restarts,
        ));
    }
    out
}
