//! Run-level accounting and batch aggregation: throughput, hourly cost,
//! performance-per-dollar, and the CSV shapes the experiment commands emit.
//!
//! A [`RunResult`] is the complete ledger of one simulated run. Batch
//! summaries average the ledgers of many seeded replicas of the same
//! configuration and derive throughput, cost, and value from the pooled
//! means, so a single unlucky replica cannot dominate the ratio.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Where each second of wall time went. Exactly one bucket is charged for
/// every span, so the components sum to the run's wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSplit {
    /// Iterations that advanced training (including degraded failover).
    pub productive_s: f64,
    /// Formerly productive time whose progress was rolled back.
    pub wasted_s: f64,
    /// Restart windows, reconfiguration pauses, and fatal suspensions.
    pub restarting_s: f64,
    /// Recovery pauses: detection, rerouting, and replica catch-up.
    pub paused_s: f64,
}

impl TimeSplit {
    pub fn total(&self) -> f64 {
        self.productive_s + self.wasted_s + self.restarting_s + self.paused_s
    }
}

/// Complete accounting of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub samples_completed: u64,
    /// Defined as the sum of the time-split buckets.
    pub wall_seconds: f64,
    /// Billed node-seconds per instance class ("spot" or "demand").
    /// Fatal suspensions bill zero nodes.
    pub node_seconds: BTreeMap<String, f64>,
    /// Preemption events; a simultaneous bulk counts once.
    pub preemption_count: u64,
    /// wall / preemption_count; zero when nothing was preempted.
    pub mean_preemption_interval_s: f64,
    /// Allocation to preemption, truncated at run end, averaged over every
    /// instance that ever existed.
    pub mean_instance_lifetime_s: f64,
    pub fatal_restarts: u64,
    /// Billed node-seconds / wall.
    pub mean_live_nodes: f64,
    /// Samples never processed because their pipeline was down
    /// (sample-drop strategy only).
    pub dropped_samples: u64,
    pub time_split: TimeSplit,
}

/// Per-node-hour prices by instance class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub spot_per_node_hour: f64,
    pub demand_per_node_hour: f64,
}

impl Prices {
    pub fn from_cluster(cluster: &crate::profile::ClusterSpec) -> Self {
        Prices {
            spot_per_node_hour: cluster.spot_price_per_node_hour,
            demand_per_node_hour: cluster.demand_price_per_node_hour,
        }
    }

    pub fn for_class(&self, class: &str) -> Result<f64> {
        match class {
            "spot" => Ok(self.spot_per_node_hour),
            "demand" => Ok(self.demand_per_node_hour),
            other => Err(Error::InvalidConfig {
                path: "prices".into(),
                message: format!("unknown instance class `{other}`"),
            }),
        }
    }
}

/// Samples per second of wall time.
pub fn throughput(result: &RunResult) -> Result<f64> {
    if !(result.wall_seconds > 0.0) {
        return Err(Error::InvalidConfig {
            path: "result.wall_seconds".into(),
            message: "throughput over a zero-length run is undefined".into(),
        });
    }
    Ok(result.samples_completed as f64 / result.wall_seconds)
}

/// Currency per hour: billed mean live nodes times the class price.
pub fn cost_rate(result: &RunResult, prices: &Prices) -> Result<f64> {
    if !(result.wall_seconds > 0.0) {
        return Err(Error::InvalidConfig {
            path: "result.wall_seconds".into(),
            message: "cost rate over a zero-length run is undefined".into(),
        });
    }
    let mut rate = 0.0;
    for (class, node_seconds) in &result.node_seconds {
        rate += node_seconds / result.wall_seconds * prices.for_class(class)?;
    }
    Ok(rate)
}

/// Performance-per-dollar: throughput divided by hourly cost.
pub fn value(throughput: f64, cost_rate: f64) -> Result<f64> {
    if !(cost_rate > 0.0) {
        return Err(Error::InvalidConfig {
            path: "result.cost_rate".into(),
            message: format!("value needs a positive cost rate, got {cost_rate}"),
        });
    }
    Ok(throughput / cost_rate)
}

/// Field-wise means over a batch of replicas plus the pooled-ratio derived
/// columns. Pooling means ratios use mean numerator over mean denominator:
/// throughput is mean samples / mean wall, and the preemption interval is
/// mean wall / mean event count, which keeps the renewal identity
/// interval = 1 / (live nodes x hourly rate) tight even when individual
/// replicas saw few events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub probability: f64,
    pub replicas: usize,
    pub mean_samples: f64,
    pub mean_wall_seconds: f64,
    pub mean_node_seconds: BTreeMap<String, f64>,
    pub mean_preemptions: f64,
    pub mean_preemption_interval_s: f64,
    pub mean_instance_lifetime_s: f64,
    pub mean_fatal_restarts: f64,
    pub mean_live_nodes: f64,
    pub mean_dropped_samples: f64,
    pub mean_time_split: TimeSplit,
    pub throughput: f64,
    pub cost_rate_per_hour: f64,
    pub value: f64,
}

pub fn summarize_batch(
    probability: f64,
    results: &[RunResult],
    prices: &Prices,
) -> Result<BatchSummary> {
    if results.is_empty() {
        return Err(Error::InvalidConfig {
            path: "batch.replicas".into(),
            message: "a batch needs at least one completed replica".into(),
        });
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&RunResult) -> f64| results.iter().map(f).sum::<f64>() / n;

    let mut mean_node_seconds: BTreeMap<String, f64> = BTreeMap::new();
    for r in results {
        for (class, s) in &r.node_seconds {
            *mean_node_seconds.entry(class.clone()).or_insert(0.0) += s / n;
        }
    }
    let mean_samples = mean(&|r| r.samples_completed as f64);
    let mean_wall = mean(&|r| r.wall_seconds);
    let mean_preemptions = mean(&|r| r.preemption_count as f64);
    let mean_live = if mean_wall > 0.0 {
        mean_node_seconds.values().sum::<f64>() / mean_wall
    } else {
        0.0
    };
    let pooled = RunResult {
        samples_completed: 0,
        wall_seconds: mean_wall,
        node_seconds: mean_node_seconds.clone(),
        preemption_count: 0,
        mean_preemption_interval_s: 0.0,
        mean_instance_lifetime_s: 0.0,
        fatal_restarts: 0,
        mean_live_nodes: mean_live,
        dropped_samples: 0,
        time_split: TimeSplit::default(),
    };
    let throughput = if mean_wall > 0.0 { mean_samples / mean_wall } else { 0.0 };
    let cost = cost_rate(&pooled, prices)?;
    let value = value(throughput, cost)?;

    Ok(BatchSummary {
        probability,
        replicas: results.len(),
        mean_samples,
        mean_wall_seconds: mean_wall,
        mean_node_seconds,
        mean_preemptions,
        mean_preemption_interval_s: if mean_preemptions > 0.0 {
            mean_wall / mean_preemptions
        } else {
            0.0
        },
        mean_instance_lifetime_s: mean(&|r| r.mean_instance_lifetime_s),
        mean_fatal_restarts: mean(&|r| r.fatal_restarts as f64),
        mean_live_nodes: mean_live,
        mean_dropped_samples: mean(&|r| r.dropped_samples as f64),
        mean_time_split: TimeSplit {
            productive_s: mean(&|r| r.time_split.productive_s),
            wasted_s: mean(&|r| r.time_split.wasted_s),
            restarting_s: mean(&|r| r.time_split.restarting_s),
            paused_s: mean(&|r| r.time_split.paused_s),
        },
        throughput,
        cost_rate_per_hour: cost,
        value,
    })
}

pub const BATCH_CSV_HEADER: &str = "probability,replicas,throughput_samples_per_s,\
cost_per_hour,value,mean_live_nodes,mean_preemptions,mean_interval_hours,\
mean_lifetime_hours,mean_fatal_restarts,mean_dropped_samples,\
productive_s,wasted_s,restarting_s,paused_s";

/// One row per probability, in the shape of the published sweep table.
pub fn batch_csv(summaries: &[BatchSummary]) -> String {
    let mut out = String::from(BATCH_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.probability,
            s.replicas,
            s.throughput,
            s.cost_rate_per_hour,
            s.value,
            s.mean_live_nodes,
            s.mean_preemptions,
            s.mean_preemption_interval_s / 3600.0,
            s.mean_instance_lifetime_s / 3600.0,
            s.mean_fatal_restarts,
            s.mean_dropped_samples,
            s.mean_time_split.productive_s,
            s.mean_time_split.wasted_s,
            s.mean_time_split.restarting_s,
            s.mean_time_split.paused_s,
        );
    }
    out
}

/// Time-bucketed view of one run, for plotting fleet size, throughput, and
/// cost over the run's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBucket {
    pub start_s: f64,
    pub width_s: f64,
    /// Billed node-seconds inside the bucket.
    pub node_seconds: f64,
    pub samples: u64,
}

pub const BUCKET_CSV_HEADER: &str =
    "start_s,mean_live_nodes,throughput_samples_per_s,cost_per_hour";

pub fn buckets_csv(buckets: &[TimeBucket], price_per_node_hour: f64) -> String {
    let mut out = String::from(BUCKET_CSV_HEADER);
    out.push('\n');
    for b in buckets {
        let live = b.node_seconds / b.width_s;
        let _ = writeln!(
            out,
            "{},{},{},{}",
            b.start_s,
            live,
            b.samples as f64 / b.width_s,
            live * price_per_node_hour,
        );
    }
    out
}

/// Same columns as [`buckets_csv`] in whitespace-separated form with a
/// comment header, directly loadable by gnuplot's `plot ... using`.
pub fn buckets_gnuplot(buckets: &[TimeBucket], price_per_node_hour: f64) -> String {
    let mut out = String::from("# start_s live_nodes throughput cost_per_hour\n");
    for b in buckets {
        let live = b.node_seconds / b.width_s;
        let _ = writeln!(
            out,
            "{} {} {} {}",
            b.start_s,
            live,
            b.samples as f64 / b.width_s,
            live * price_per_node_hour,
        );
    }
    out
}
