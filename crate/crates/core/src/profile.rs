//! Model profiles, cluster descriptions, and layer-to-stage partitioning.
//!
//! A [`ModelProfile`] lists per-layer forward/backward costs and sizes as
//! measured on the target accelerator. [`partition_layers`] splits those
//! layers into contiguous pipeline stages, either balancing peak memory
//! (weights plus in-flight activations) or balancing compute time.

use crate::units::{secs, GIB, MIB};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Cost model for one layer, per microbatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Forward compute time for one microbatch.
    #[serde(with = "secs")]
    pub forward: Duration,
    /// Backward compute time for one microbatch.
    #[serde(with = "secs")]
    pub backward: Duration,
    /// Bytes of parameters plus optimizer state resident on the device.
    pub weight_bytes: u64,
    /// Bytes of stored activations per in-flight microbatch.
    pub activation_bytes: u64,
}

/// A model described as an ordered list of layers plus batch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub layers: Vec<LayerCost>,
    /// Samples consumed by one optimizer step across the whole cluster.
    pub samples_per_iteration: u64,
    /// Microbatches per pipeline per iteration (M).
    pub microbatches: u32,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidProfile("layer list is empty".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.forward.is_zero() || l.backward.is_zero() {
                return Err(Error::InvalidProfile(format!(
                    "layer {i} has a zero compute time"
                )));
            }
            if l.weight_bytes == 0 {
                return Err(Error::InvalidProfile(format!(
                    "layer {i} has zero weight bytes"
                )));
            }
        }
        if self.microbatches == 0 {
            return Err(Error::InvalidProfile("microbatches must be >= 1".into()));
        }
        if self.samples_per_iteration == 0
            || !self.samples_per_iteration.is_multiple_of(u64::from(self.microbatches))
        {
            return Err(Error::InvalidProfile(format!(
                "samples_per_iteration ({}) must be a positive multiple of microbatches ({})",
                self.samples_per_iteration, self.microbatches
            )));
        }
        Ok(())
    }
}

/// Point-to-point communication model between nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommModel {
    /// Sustained bandwidth between nodes in the same zone.
    pub intra_zone_bytes_per_sec: f64,
    /// Multiplier applied to transfer time when endpoints sit in
    /// different zones (>= 1).
    pub cross_zone_factor: f64,
    /// Fixed per-message latency.
    #[serde(with = "secs")]
    pub per_message_latency: Duration,
}

impl CommModel {
    /// Transfer time for `bytes` between two endpoints.
    pub fn transfer_time(&self, bytes: u64, cross_zone: bool) -> Duration {
        if bytes == 0 && self.per_message_latency.is_zero() {
            return Duration::ZERO;
        }
        let mut secs = bytes as f64 / self.intra_zone_bytes_per_sec;
        if cross_zone {
            secs *= self.cross_zone_factor;
        }
        Duration::from_secs_f64(secs) + self.per_message_latency
    }

    /// A model with infinite bandwidth and zero latency, used by tests that
    /// want pure compute timelines.
    pub fn zero_cost() -> Self {
        CommModel {
            intra_zone_bytes_per_sec: f64::INFINITY,
            cross_zone_factor: 1.0,
            per_message_latency: Duration::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intra_zone_bytes_per_sec > 0.0) {
            return Err(Error::InvalidProfile(
                "intra_zone_bytes_per_sec must be positive".into(),
            ));
        }
        if !(self.cross_zone_factor >= 1.0) {
            return Err(Error::InvalidProfile(
                "cross_zone_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Static description of the cluster an experiment runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Number of data-parallel pipelines (D).
    pub pipelines: u32,
    /// Pipeline depth in stages (P), after resilience over-provisioning.
    pub depth: u32,
    /// Depth a non-redundant on-demand deployment would use.
    pub demand_depth: u32,
    /// Availability zones nodes may be placed in.
    pub zones: Vec<String>,
    /// GPUs per node; >1 packs that many consecutive stages per node.
    pub gpus_per_node: u32,
    pub gpu_mem_bytes: u64,
    pub cpu_mem_bytes: u64,
    pub spot_price_per_node_hour: f64,
    pub demand_price_per_node_hour: f64,
    pub comm: CommModel,
}

impl ClusterSpec {
    /// Total nodes at target size.
    pub fn target_nodes(&self) -> u32 {
        self.pipelines * self.nodes_per_pipeline()
    }

    /// Nodes needed for one pipeline (depth / gpus_per_node).
    pub fn nodes_per_pipeline(&self) -> u32 {
        self.depth / self.gpus_per_node
    }

    pub fn validate(&self) -> Result<()> {
        if self.pipelines == 0 || self.depth == 0 || self.demand_depth == 0 {
            return Err(Error::InvalidProfile(
                "pipelines, depth and demand_depth must be >= 1".into(),
            ));
        }
        if self.gpus_per_node == 0 || !self.depth.is_multiple_of(self.gpus_per_node) {
            return Err(Error::InvalidProfile(format!(
                "depth ({}) must be a positive multiple of gpus_per_node ({})",
                self.depth, self.gpus_per_node
            )));
        }
        if self.zones.is_empty() {
            return Err(Error::InvalidProfile("zone list is empty".into()));
        }
        if !(self.spot_price_per_node_hour > 0.0) || !(self.demand_price_per_node_hour > 0.0) {
            return Err(Error::InvalidProfile("node prices must be positive".into()));
        }
        self.comm.validate()
    }

    /// Non-fatal sizing advice. Running redundant computation needs spare
    /// memory headroom, so depth is expected to be at least
    /// `ceil(sizing_multiplier * demand_depth)`; a shallower pipeline is
    /// allowed but flagged.
    pub fn sizing_warnings(&self, sizing_multiplier: f64) -> Vec<String> {
        let recommended = (f64::from(self.demand_depth) * sizing_multiplier).ceil() as u32;
        if self.depth < recommended {
            vec![format!(
                "depth {} is below the recommended {} ({}x of demand depth {}); \
                 redundant layers may not fit in GPU memory",
                self.depth, recommended, sizing_multiplier, self.demand_depth
            )]
        } else {
            Vec::new()
        }
    }
}

/// Objective for [`partition_layers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionObjective {
    /// Minimize the maximum of `weight_bytes + in_flight * activation_bytes`
    /// over stages, where stage `s` keeps `P - s` microbatches in flight.
    BalanceMemory,
    /// Minimize the maximum of `forward + backward` over stages.
    BalanceTime,
}

/// Aggregated cost of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    #[serde(with = "secs")]
    pub forward: Duration,
    #[serde(with = "secs")]
    pub backward: Duration,
    pub weight_bytes: u64,
    /// Stored activation bytes per in-flight microbatch (sum over layers).
    pub activation_bytes: u64,
    /// Bytes crossing the boundary to the next stage per microbatch
    /// (the last member layer's activation output; gradients flowing the
    /// other way have the same size).
    pub boundary_bytes: u64,
}

/// A contiguous assignment of layers to pipeline stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePartition {
    /// Half-open layer ranges, one per stage, covering all layers in order.
    pub ranges: Vec<(usize, usize)>,
    pub stages: Vec<StageCost>,
}

impl StagePartition {
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Per-stage (forward, backward) compute times.
    pub fn stage_times(&self) -> Vec<(Duration, Duration)> {
        self.stages.iter().map(|s| (s.forward, s.backward)).collect()
    }

    /// Layer counts per stage, in stage order.
    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|(a, b)| b - a).collect()
    }
}

/// Peak memory demand of a stage under the given objective's memory model:
/// weights plus one activation set per in-flight microbatch.
fn stage_memory(layers: &[LayerCost], in_flight: u64) -> u128 {
    let w: u128 = layers.iter().map(|l| u128::from(l.weight_bytes)).sum();
    let a: u128 = layers.iter().map(|l| u128::from(l.activation_bytes)).sum();
    w + u128::from(in_flight) * a
}

fn stage_time(layers: &[LayerCost]) -> u128 {
    layers
        .iter()
        .map(|l| l.forward.as_nanos() + l.backward.as_nanos())
        .sum()
}

/// Splits `profile.layers` into `depth` contiguous stages minimizing the
/// per-objective maximum. Ties are broken by preferring more layers on later
/// stages (the size vector is lexicographically smallest, read from stage 0),
/// which keeps memory-heavy early stages small.
pub fn partition_layers(
    profile: &ModelProfile,
    depth: u32,
    objective: PartitionObjective,
) -> Result<StagePartition> {
    profile.validate()?;
    let n = profile.layers.len();
    let p = depth as usize;
    if p == 0 || p > n {
        return Err(Error::InvalidSchedule(format!(
            "cannot split {n} layers into {p} stages"
        )));
    }

    // cost of layers [i, j) when placed at stage index s
    let cost = |s: usize, i: usize, j: usize| -> u128 {
        let layers = &profile.layers[i..j];
        match objective {
            PartitionObjective::BalanceMemory => stage_memory(layers, (p - s) as u64),
            PartitionObjective::BalanceTime => stage_time(layers),
        }
    };

    // dp[s][i]: minimal achievable max-cost over stages s.. covering layers i..n,
    // leaving at least one layer per remaining stage.
    let mut dp = vec![vec![u128::MAX; n + 1]; p + 1];
    dp[p][n] = 0;
    for s in (0..p).rev() {
        let remaining = p - s; // stages left including s
        for i in 0..=n {
            let layers_left = n - i;
            if layers_left < remaining {
                continue;
            }
            let max_take = layers_left - (remaining - 1);
            let mut best = u128::MAX;
            for take in 1..=max_take {
                let j = i + take;
                let tail = dp[s + 1][j];
                if tail == u128::MAX {
                    continue;
                }
                best = best.min(cost(s, i, j).max(tail));
            }
            dp[s][i] = best;
        }
    }
    let opt = dp[0][0];

    // Greedy reconstruction: the smallest feasible size at each stage yields
    // the lexicographically smallest size vector, i.e. later-heavy ties.
    let mut ranges = Vec::with_capacity(p);
    let mut i = 0;
    for s in 0..p {
        let remaining = p - s;
        let max_take = (n - i) - (remaining - 1);
        let mut chosen = None;
        for take in 1..=max_take {
            let j = i + take;
            if cost(s, i, j) <= opt && dp[s + 1][j] <= opt {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("dp table admits at least one optimal split");
        ranges.push((i, j));
        i = j;
    }

    let stages = ranges
        .iter()
        .map(|&(a, b)| {
            let layers = &profile.layers[a..b];
            StageCost {
                forward: layers.iter().map(|l| l.forward).sum(),
                backward: layers.iter().map(|l| l.backward).sum(),
                weight_bytes: layers.iter().map(|l| l.weight_bytes).sum(),
                activation_bytes: layers.iter().map(|l| l.activation_bytes).sum(),
                boundary_bytes: layers.last().map(|l| l.activation_bytes).unwrap_or(0),
            }
        })
        .collect();

    Ok(StagePartition { ranges, stages })
}

/// Ready-made profiles used by experiments and calibration tests.
pub mod presets {
    use super::*;

    fn layer(forward_s: f64, backward_s: f64, weight: u64, act: u64) -> LayerCost {
        LayerCost {
            forward: Duration::from_secs_f64(forward_s),
            backward: Duration::from_secs_f64(backward_s),
            weight_bytes: weight,
            activation_bytes: act,
        }
    }

    /// Two stages with forward times t and 1.2t and backward = 2x forward.
    /// The faster stage idles 0.6t per steady-state cycle at its send
    /// barrier, which is the canonical bubble-measurement scenario.
    pub fn two_stage_imbalanced(t_secs: f64) -> ModelProfile {
        ModelProfile {
            layers: vec![
                layer(t_secs, 2.0 * t_secs, 200 * MIB, 50 * MIB),
                layer(1.2 * t_secs, 2.4 * t_secs, 200 * MIB, 50 * MIB),
            ],
            samples_per_iteration: 64,
            microbatches: 8,
        }
    }

    /// `n` identical layers; handy for closed-form pipeline timing checks.
    pub fn uniform(n: usize, forward_s: f64, backward_s: f64) -> ModelProfile {
        ModelProfile {
            layers: vec![layer(forward_s, backward_s, 100 * MIB, 25 * MIB); n],
            samples_per_iteration: 64,
            microbatches: 8,
        }
    }

    /// Eight stages with forward time growing toward the tail of the
    /// pipeline, one layer per stage. Early stages have bubbles larger than
    /// the forward they must duplicate; late stages only fit part of it.
    /// Used to calibrate redundant-computation overhead measurements.
    pub fn imbalanced_eight_stage() -> ModelProfile {
        let f = [0.30, 0.33, 0.36, 0.40, 0.82, 0.88, 0.94, 1.00];
        ModelProfile {
            layers: f
                .iter()
                .map(|&t| layer(t, 2.0 * t, 300 * MIB, 80 * MIB))
                .collect(),
            samples_per_iteration: 128,
            microbatches: 16,
        }
    }

    /// A BERT-large-shaped profile at desk scale: one embedding layer,
    /// 24 transformer blocks, one head. Backward costs twice the forward.
    pub fn bert_like() -> ModelProfile {
        let mut layers = Vec::with_capacity(26);
        layers.push(layer(0.05, 0.10, 480 * MIB, 40 * MIB));
        for _ in 0..24 {
            layers.push(layer(0.35, 0.70, 100 * MIB, 60 * MIB));
        }
        layers.push(layer(0.15, 0.30, 160 * MIB, 20 * MIB));
        ModelProfile {
            layers,
            samples_per_iteration: 256,
            microbatches: 8,
        }
    }

    /// Cluster matching the BERT-like profile: 4 pipelines of depth 12
    /// (1.5x the 8-stage on-demand layout), across three zones, with p3-class
    /// memory and prices.
    pub fn bert_cluster() -> ClusterSpec {
        ClusterSpec {
            pipelines: 4,
            depth: 12,
            demand_depth: 8,
            zones: vec!["z0".into(), "z1".into(), "z2".into()],
            gpus_per_node: 1,
            gpu_mem_bytes: 16 * GIB,
            cpu_mem_bytes: 61 * GIB,
            spot_price_per_node_hour: 0.918,
            demand_price_per_node_hour: 3.06,
            comm: CommModel {
                intra_zone_bytes_per_sec: 1.25e9,
                cross_zone_factor: 2.0,
                per_message_latency: Duration::from_micros(100),
            },
        }
    }
}
