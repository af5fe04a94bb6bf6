//! Discrete-event simulation of one training run over a preemptible fleet.
//!
//! The run loop owns four ledgers and keeps them consistent:
//!
//! * the **clock**: time advances iteration by iteration, stretched by
//!   recovery pauses and cut short by reconfigurations and restarts;
//! * the **time split**: every advanced second lands in exactly one of
//!   productive / wasted / restarting / paused;
//! * the **bill**: node-seconds integrate the live count over time, frozen
//!   at zero while a run sits suspended waiting for capacity. The bill is
//!   flushed only when the live count or suspension flag changes, so
//!   replaying the event log (see [`replay_node_seconds`]) reproduces it
//!   bit for bit;
//! * the **bucket track**: the same integral split into fixed-width wall
//!   clock buckets, plus samples credited at iteration completion, for
//!   throughput-over-time plots.
//!
//! Iteration durations come from the pipeline engine, run once per distinct
//! microbatch count and cached; shrinking the pipeline count rescales the
//! per-pipeline microbatches to preserve the global batch. A pipeline
//! serving a merged failover pair pays the adopted stages' compute
//! serially on top of the cached base, which is the worst-stage
//! approximation of the merged schedule.
//!
//! Preemption bulks arrive from a churn feed (synthetic process or trace
//! replay). Events landing inside an earlier recovery pause are processed
//! at their own timestamps, so in that corner the accounting total
//! (`wall_seconds`) can exceed the event clock by part of a pause; billing
//! and buckets always follow the event clock.

use crate::churn::{ChurnEvent, ChurnKind, ChurnModel, ChurnProcess};
use crate::engine::{execute_iteration, EngineParams};
use crate::metrics::{RunResult, TimeBucket, TimeSplit};
use crate::profile::{
    partition_layers, ClusterSpec, ModelProfile, PartitionObjective, StagePartition,
};
use crate::resilience::{
    dp_iteration_time_s, rc_pause_s, ClusterState, DataParallelParams, ResilienceParams, Strategy,
};
use crate::schedule::{generate_1f1b, plan_frc, RcMode};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

/// Which market the fleet is billed against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceClass {
    #[default]
    Spot,
    Demand,
}

impl InstanceClass {
    pub fn as_str(self) -> &'static str {
        match self {
            InstanceClass::Spot => "spot",
            InstanceClass::Demand => "demand",
        }
    }
}

impl fmt::Display for InstanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// When a run ends: after a fixed horizon or once enough samples landed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopRule {
    Duration { seconds: f64 },
    Samples { target: u64 },
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidConfig {
            path: "stop".into(),
            message,
        };
        match *self {
            StopRule::Duration { seconds } => {
                if !seconds.is_finite() || seconds <= 0.0 {
                    return Err(bad(format!("duration {seconds} must be positive")));
                }
            }
            StopRule::Samples { target } => {
                if target == 0 {
                    return Err(bad("sample target must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Where preemption and allocation events come from.
#[derive(Debug, Clone)]
pub enum ChurnSource {
    /// Online generator; deterministic per seed. A zero preemption
    /// probability gives a quiet run.
    Synthetic { model: ChurnModel, seed: u64 },
    /// Replay of a recorded event list, non-decreasing in time.
    Trace(Vec<ChurnEvent>),
}

/// Knobs shared by every strategy, with calibrated defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub resilience: ResilienceParams,
    pub engine: EngineParams,
    pub data_parallel: DataParallelParams,
    /// Cadence of durable checkpoints used only when a fatal loss forces a
    /// reload (the redundant and sample-drop strategies checkpoint off the
    /// critical path).
    pub checkpoint_period_s: f64,
    /// Delay between writing a checkpoint and it becoming durable.
    pub commit_lag_s: f64,
    /// Width of the rows in the time-bucketed output.
    pub bucket_width_s: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            resilience: ResilienceParams::default(),
            engine: EngineParams::calibrated(),
            data_parallel: DataParallelParams::default(),
            checkpoint_period_s: 300.0,
            commit_lag_s: 60.0,
            bucket_width_s: 600.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, message: String| Error::InvalidConfig {
            path: path.into(),
            message,
        };
        if !(self.checkpoint_period_s > 0.0) {
            return Err(field(
                "checkpoint_period_s",
                format!("{} must be positive", self.checkpoint_period_s),
            ));
        }
        if !(self.commit_lag_s >= 0.0) {
            return Err(field(
                "commit_lag_s",
                format!("{} must be non-negative", self.commit_lag_s),
            ));
        }
        if !(self.bucket_width_s > 0.0) {
            return Err(field(
                "bucket_width_s",
                format!("{} must be positive", self.bucket_width_s),
            ));
        }
        Ok(())
    }
}

/// One simulated run: what trains, on what fleet, under which strategy.
#[derive(Debug, Clone)]
pub struct RunConfig<'a> {
    pub profile: &'a ModelProfile,
    pub cluster: &'a ClusterSpec,
    pub strategy: Strategy,
    pub stop: StopRule,
    pub instance_class: InstanceClass,
    /// Pure data parallelism: every node holds the whole model and the
    /// pipeline geometry in `cluster` only sizes the fleet.
    pub data_parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    Preempt,
    Allocate,
    RcRecovered,
    Reconfigured,
    Restart,
    FatalRestart,
    Suspend,
    Resume,
}

impl fmt::Display for SimEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimEventKind::Preempt => "preempt",
            SimEventKind::Allocate => "allocate",
            SimEventKind::RcRecovered => "rc_recovered",
            SimEventKind::Reconfigured => "reconfigured",
            SimEventKind::Restart => "restart",
            SimEventKind::FatalRestart => "fatal_restart",
            SimEventKind::Suspend => "suspend",
            SimEventKind::Resume => "resume",
        })
    }
}

/// One row of the run's event log, in event order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub time_s: f64,
    pub kind: SimEventKind,
    /// Pipeline hit, when the event has a single locus.
    pub pipeline: Option<usize>,
    /// Stage-range start hit, likewise.
    pub stage: Option<usize>,
    /// Training stall attributed to this event.
    pub pause_s: f64,
    /// Layer state moved while handling it.
    pub bytes_moved: u64,
}

impl SimEvent {
    fn at(time_s: f64, kind: SimEventKind) -> SimEvent {
        SimEvent {
            time_s,
            kind,
            pipeline: None,
            stage: None,
            pause_s: 0.0,
            bytes_moved: 0,
        }
    }
}

pub const EVENT_CSV_HEADER: &str = "time_ns,event_kind,pipeline,stage,pause_ns,bytes_moved";

fn to_ns(seconds: f64) -> u64 {
    (seconds * 1e9).round() as u64
}

pub fn events_csv(events: &[SimEvent]) -> String {
    let mut out = String::from(EVENT_CSV_HEADER);
    out.push('\n');
    for e in events {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            to_ns(e.time_s),
            e.kind,
            opt(e.pipeline),
            opt(e.stage),
            to_ns(e.pause_s),
            e.bytes_moved
        ));
    }
    out
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub result: RunResult,
    pub events: Vec<SimEvent>,
    pub buckets: Vec<TimeBucket>,
    /// Fleet size at t = 0, needed to replay the event log.
    pub initial_live: usize,
    /// Event-clock end of the run; the billing integral stops here.
    pub end_s: f64,
}

/// Recomputes billed node-seconds from the event log alone. The run bills
/// with the same flush-on-change rule over the same timestamps, so the
/// result matches `RunResult::node_seconds` exactly, not just
/// approximately.
pub fn replay_node_seconds(initial_live: usize, events: &[SimEvent], end_s: f64) -> f64 {
    let mut live = initial_live;
    let mut suspended = false;
    let mut last = 0.0f64;
    let mut acc = 0.0f64;
    let flush = |t: f64, live: usize, suspended: bool, last: &mut f64, acc: &mut f64| {
        if !suspended {
            *acc += live as f64 * (t - *last);
        }
        *last = t;
    };
    for e in events {
        match e.kind {
            SimEventKind::Preempt => {
                flush(e.time_s, live, suspended, &mut last, &mut acc);
                live = live.saturating_sub(1);
            }
            SimEventKind::Allocate => {
                flush(e.time_s, live, suspended, &mut last, &mut acc);
                live += 1;
            }
            SimEventKind::Suspend => {
                flush(e.time_s, live, suspended, &mut last, &mut acc);
                suspended = true;
            }
            SimEventKind::Resume => {
                flush(e.time_s, live, suspended, &mut last, &mut acc);
                suspended = false;
            }
            _ => {}
        }
    }
    flush(end_s, live, suspended, &mut last, &mut acc);
    acc
}

/// Closed-form productive fraction of the checkpoint-restart strategy
/// under memoryless preemptions at `events_per_s`.
///
/// Renewal argument: completing an uninterrupted restart window of length
/// `R` takes `(exp(lambda R) - 1) / lambda` on average because a preemption
/// mid-restart resets it; the following productive stretch averages
/// `1 / lambda`; of that stretch, the part within `lag + interval / 2` of
/// the end was not yet durable and is lost, which trims the durable gain
/// to `exp(-lambda w) / lambda` with `w = lag + interval / 2`. The ratio
/// collapses to a single exponential.
pub fn checkpoint_productive_fraction(
    events_per_s: f64,
    restart_s: f64,
    commit_lag_s: f64,
    interval_s: f64,
) -> f64 {
    (-events_per_s * (restart_s + commit_lag_s + 0.5 * interval_s)).exp()
}

/// Runs one simulation to completion.
pub fn run(cfg: &RunConfig<'_>, churn: &ChurnSource, params: &SimParams) -> Result<SimOutput> {
    cfg.profile.validate()?;
    cfg.cluster.validate()?;
    cfg.strategy.validate()?;
    cfg.stop.validate()?;
    params.validate()?;
    if cfg.data_parallel && cfg.strategy == Strategy::SampleDrop {
        return Err(Error::InvalidConfig {
            path: "strategy".into(),
            message: "sample_drop needs pipeline parallelism to name a broken pipeline".into(),
        });
    }

    let target_nodes = cfg.cluster.target_nodes() as usize;
    let feed = Feed::new(churn, target_nodes, cfg.cluster.zones.len())?;
    let needed = if cfg.data_parallel {
        1
    } else {
        cfg.cluster.nodes_per_pipeline() as usize
    };
    if feed.live_count() < needed {
        return Err(Error::InsufficientNodes {
            needed,
            available: feed.live_count(),
        });
    }
    let ctx = Ctx::new(feed, cfg, params);

    match (cfg.data_parallel, cfg.strategy) {
        (false, Strategy::Redundant { rc_mode }) => pipeline_redundant(ctx, cfg, params, rc_mode),
        (false, Strategy::SampleDrop) => pipeline_sample_drop(ctx, cfg, params),
        (true, Strategy::Redundant { rc_mode }) => dp_redundant(ctx, cfg, params, rc_mode),
        (_, Strategy::CheckpointRestart {
            interval_s,
            restart_cost_s,
        }) => checkpoint_restart(ctx, cfg, params, interval_s, restart_cost_s),
        (true, Strategy::SampleDrop) => unreachable!("rejected above"),
    }
}

// ---------------------------------------------------------------------------
// Churn feed: one interface over the generator and trace replay.

enum FeedInner {
    Synthetic(Box<ChurnProcess>),
    Trace(VecDeque<ChurnEvent>),
}

struct Feed {
    inner: FeedInner,
    /// The sim's authoritative view of the market fleet, updated when an
    /// event is consumed (not when it is peeked).
    live: BTreeMap<u64, usize>,
    buffered: Option<ChurnEvent>,
}

impl Feed {
    fn new(source: &ChurnSource, target_nodes: usize, zone_count: usize) -> Result<Feed> {
        match source {
            ChurnSource::Synthetic { model, seed } => {
                let process = ChurnProcess::new(model.clone(), target_nodes, *seed)?;
                let live = process.live_nodes().clone();
                Ok(Feed {
                    inner: FeedInner::Synthetic(Box::new(process)),
                    live,
                    buffered: None,
                })
            }
            ChurnSource::Trace(events) => {
                if events.windows(2).any(|w| w[1].time_s < w[0].time_s) {
                    return Err(Error::InvalidConfig {
                        path: "churn.trace".into(),
                        message: "events are not in time order".into(),
                    });
                }
                let zones = zone_count.max(1);
                let mut live: BTreeMap<u64, usize> = (0..target_nodes as u64)
                    .map(|id| (id, id as usize % zones))
                    .collect();
                // A node first seen being preempted must have been part of
                // the fleet from the start.
                let mut known: BTreeSet<u64> = live.keys().copied().collect();
                for ev in events {
                    match ev.kind {
                        ChurnKind::Preempt => {
                            if known.insert(ev.node_id) {
                                live.insert(ev.node_id, ev.zone);
                            }
                        }
                        ChurnKind::Allocate => {
                            known.insert(ev.node_id);
                        }
                    }
                }
                Ok(Feed {
                    inner: FeedInner::Trace(events.iter().cloned().collect()),
                    live,
                    buffered: None,
                })
            }
        }
    }

    fn live_count(&self) -> usize {
        self.live.len()
    }

    fn live_vec(&self) -> Vec<(u64, usize)> {
        self.live.iter().map(|(&id, &zone)| (id, zone)).collect()
    }

    fn pull(&mut self) -> Option<ChurnEvent> {
        match &mut self.inner {
            FeedInner::Synthetic(p) => p.next_event(f64::INFINITY),
            FeedInner::Trace(q) => q.pop_front(),
        }
    }

    /// Next event regardless of horizon, without consuming it.
    fn peek(&mut self) -> Option<&ChurnEvent> {
        if self.buffered.is_none() {
            self.buffered = self.pull();
        }
        self.buffered.as_ref()
    }

    /// Consumes and applies the next event strictly before `horizon_s`.
    fn next(&mut self, horizon_s: f64) -> Option<ChurnEvent> {
        if self.buffered.is_none() {
            self.buffered = self.pull();
        }
        if !self.buffered.as_ref().is_some_and(|e| e.time_s < horizon_s) {
            return None;
        }
        let ev = self.buffered.take().unwrap();
        match ev.kind {
            ChurnKind::Preempt => {
                self.live.remove(&ev.node_id);
            }
            ChurnKind::Allocate => {
                self.live.insert(ev.node_id, ev.zone);
            }
        }
        Some(ev)
    }
}

// ---------------------------------------------------------------------------
// Shared run context: billing, buckets, event log, lifetimes, progress.

/// One batch of feed events handed to a strategy loop: either a single
/// allocation or all preemptions sharing a timestamp.
enum Group {
    Preempt { time_s: f64, victims: Vec<u64> },
    Allocate { time_s: f64, id: u64, zone: usize },
}

impl Group {
    fn time(&self) -> f64 {
        match self {
            Group::Preempt { time_s, .. } | Group::Allocate { time_s, .. } => *time_s,
        }
    }
}

enum StepOutcome {
    Completed,
    Aborted,
    /// The feed dried up while waiting out a fatal loss; the run ends
    /// suspended at this time.
    Exhausted {
        at: f64,
    },
}

struct Ctx {
    feed: Feed,
    events: Vec<SimEvent>,
    split: TimeSplit,
    samples: u64,
    dropped: u64,
    fatal_restarts: u64,
    preempt_events: u64,
    // Bill, flushed only when live count or suspension changes.
    bill_live: usize,
    bill_suspended: bool,
    bill_last_t: f64,
    node_seconds: f64,
    // Bucket track, flushed on every span.
    bucket_width: f64,
    bucket_cursor: f64,
    buckets: Vec<TimeBucket>,
    // Instance lifetimes.
    alloc_at: BTreeMap<u64, f64>,
    lifetime_sum: f64,
    instances: u64,
    // Durable-progress marker for fatal reloads.
    checkpoint_period_s: f64,
    marker_samples: u64,
    marker_t: f64,
    prod_since_marker: f64,
    // Stop rule, unpacked.
    stop_t: f64,
    target_samples: u64,
    class: InstanceClass,
    initial_live: usize,
}

impl Ctx {
    fn new(feed: Feed, cfg: &RunConfig<'_>, params: &SimParams) -> Ctx {
        let (stop_t, target_samples) = match cfg.stop {
            StopRule::Duration { seconds } => (seconds, u64::MAX),
            StopRule::Samples { target } => (f64::INFINITY, target),
        };
        let initial_live = feed.live_count();
        let alloc_at = feed.live.keys().map(|&id| (id, 0.0)).collect();
        Ctx {
            feed,
            events: Vec::new(),
            split: TimeSplit::default(),
            samples: 0,
            dropped: 0,
            fatal_restarts: 0,
            preempt_events: 0,
            bill_live: initial_live,
            bill_suspended: false,
            bill_last_t: 0.0,
            node_seconds: 0.0,
            bucket_width: params.bucket_width_s,
            bucket_cursor: 0.0,
            buckets: Vec::new(),
            alloc_at,
            lifetime_sum: 0.0,
            instances: initial_live as u64,
            checkpoint_period_s: params.checkpoint_period_s,
            marker_samples: 0,
            marker_t: 0.0,
            prod_since_marker: 0.0,
            stop_t,
            target_samples,
            class: cfg.instance_class,
            initial_live,
        }
    }

    fn running(&self, t: f64) -> bool {
        t < self.stop_t && self.samples < self.target_samples
    }

    fn push_event(&mut self, event: SimEvent) {
        debug_assert!(
            self.events.last().is_none_or(|e| e.time_s <= event.time_s),
            "event log must stay in time order"
        );
        self.events.push(event);
    }

    fn bill_flush(&mut self, t: f64) {
        if !self.bill_suspended {
            self.node_seconds += self.bill_live as f64 * (t - self.bill_last_t);
        }
        self.bill_last_t = t;
    }

    fn ensure_bucket(&mut self, idx: usize) {
        while self.buckets.len() <= idx {
            self.buckets.push(TimeBucket {
                start_s: self.buckets.len() as f64 * self.bucket_width,
                width_s: self.bucket_width,
                node_seconds: 0.0,
                samples: 0,
            });
        }
    }

    /// Charges the current live count into the buckets up to `to`.
    fn bucket_span(&mut self, to: f64) {
        let live = if self.bill_suspended {
            0.0
        } else {
            self.bill_live as f64
        };
        let mut t0 = self.bucket_cursor;
        while t0 < to {
            let idx = (t0 / self.bucket_width) as usize;
            self.ensure_bucket(idx);
            let end = ((idx + 1) as f64 * self.bucket_width).min(to);
            self.buckets[idx].node_seconds += live * (end - t0);
            t0 = end;
        }
        self.bucket_cursor = to;
    }

    fn add_samples(&mut self, t: f64, n: u64) {
        let idx = (t / self.bucket_width) as usize;
        self.ensure_bucket(idx);
        self.buckets[idx].samples += n;
    }

    fn set_live(&mut self, t: f64, live: usize) {
        self.bucket_span(t);
        self.bill_flush(t);
        self.bill_live = live;
    }

    fn set_suspended(&mut self, t: f64, suspended: bool) {
        self.bucket_span(t);
        self.bill_flush(t);
        self.bill_suspended = suspended;
    }

    /// Pulls the next event batch before `horizon_s`, keeping every ledger
    /// current: preemption rows carry the victim's seat from `locate`,
    /// lifetimes close, the bill and buckets flush per row.
    fn next_group(
        &mut self,
        horizon_s: f64,
        locate: &dyn Fn(u64) -> Option<(usize, usize)>,
    ) -> Option<Group> {
        let first = self.feed.next(horizon_s)?;
        match first.kind {
            ChurnKind::Allocate => {
                self.instances += 1;
                self.alloc_at.insert(first.node_id, first.time_s);
                self.push_event(SimEvent::at(first.time_s, SimEventKind::Allocate));
                self.set_live(first.time_s, self.bill_live + 1);
                Some(Group::Allocate {
                    time_s: first.time_s,
                    id: first.node_id,
                    zone: first.zone,
                })
            }
            ChurnKind::Preempt => {
                let te = first.time_s;
                let mut victims = vec![first.node_id];
                while self
                    .feed
                    .peek()
                    .is_some_and(|e| e.kind == ChurnKind::Preempt && e.time_s == te)
                {
                    victims.push(self.feed.next(f64::INFINITY).unwrap().node_id);
                }
                for &id in &victims {
                    if let Some(at) = self.alloc_at.remove(&id) {
                        self.lifetime_sum += te - at;
                    }
                    let seat = locate(id);
                    self.push_event(SimEvent {
                        time_s: te,
                        kind: SimEventKind::Preempt,
                        pipeline: seat.map(|(p, _)| p),
                        stage: seat.map(|(_, s)| s),
                        pause_s: 0.0,
                        bytes_moved: 0,
                    });
                    self.set_live(te, self.bill_live.saturating_sub(1));
                }
                self.preempt_events += 1;
                Some(Group::Preempt {
                    time_s: te,
                    victims,
                })
            }
        }
    }

    /// Bills zero nodes from `te` until the fleet is back to `needed`;
    /// returns the resume time, or `None` when the feed dries up first.
    fn suspend_until(&mut self, te: f64, needed: usize) -> Option<f64> {
        self.fatal_restarts += 1;
        self.push_event(SimEvent::at(te, SimEventKind::Suspend));
        self.set_suspended(te, true);
        let mut tr = te;
        while self.feed.live_count() < needed {
            tr = self.next_group(f64::INFINITY, &|_| None)?.time();
        }
        self.push_event(SimEvent::at(tr, SimEventKind::Resume));
        self.set_suspended(tr, false);
        Some(tr)
    }

    /// Rewinds samples and reclassifies their compute time as wasted.
    fn roll_back_to_marker(&mut self) {
        self.samples = self.marker_samples;
        self.split.productive_s -= self.prod_since_marker;
        self.split.wasted_s += self.prod_since_marker;
        self.prod_since_marker = 0.0;
    }

    fn marker_tick(&mut self, t: f64) {
        if t - self.marker_t >= self.checkpoint_period_s {
            self.marker_t = t;
            self.marker_samples = self.samples;
            self.prod_since_marker = 0.0;
        }
    }

    /// Ends a run whose feed dried up during a fatal suspension: the rest
    /// of the horizon (if finite) stays suspended.
    fn finish_suspended(mut self, at: f64) -> SimOutput {
        let end = if self.stop_t.is_finite() {
            self.stop_t.max(at)
        } else {
            at
        };
        self.split.restarting_s += end - at;
        self.finish(end)
    }

    fn finish(mut self, end_t: f64) -> SimOutput {
        self.bucket_span(end_t);
        self.bill_flush(end_t);
        for &at in self.alloc_at.values() {
            self.lifetime_sum += end_t - at;
        }
        if let Some(last) = self.buckets.last_mut() {
            last.width_s = (end_t - last.start_s).clamp(0.0, self.bucket_width);
        }
        let wall = self.split.total();
        let mut node_seconds = BTreeMap::new();
        node_seconds.insert(self.class.as_str().to_string(), self.node_seconds);
        let result = RunResult {
            samples_completed: self.samples,
            wall_seconds: wall,
            node_seconds,
            preemption_count: self.preempt_events,
            mean_preemption_interval_s: if self.preempt_events > 0 {
                wall / self.preempt_events as f64
            } else {
                0.0
            },
            mean_instance_lifetime_s: if self.instances > 0 {
                self.lifetime_sum / self.instances as f64
            } else {
                0.0
            },
            fatal_restarts: self.fatal_restarts,
            mean_live_nodes: if wall > 0.0 { self.node_seconds / wall } else { 0.0 },
            dropped_samples: self.dropped,
            time_split: self.split,
        };
        SimOutput {
            result,
            events: self.events,
            buckets: self.buckets,
            initial_live: self.initial_live,
            end_s: end_t,
        }
    }
}

// ---------------------------------------------------------------------------
// Iteration-duration cache.

/// Engine runs are the expensive part of a simulation, so each distinct
/// microbatch count is executed once and cached. The cache ignores zone
/// placement: durations assume intra-zone links, with cross-zone spill
/// priced into the cluster's bandwidth calibration.
struct Durations<'a> {
    partition: &'a StagePartition,
    cluster: &'a ClusterSpec,
    engine: EngineParams,
    rc_mode: RcMode,
    cache: BTreeMap<u32, f64>,
}

impl<'a> Durations<'a> {
    fn new(
        partition: &'a StagePartition,
        cluster: &'a ClusterSpec,
        engine: &EngineParams,
        rc_mode: RcMode,
    ) -> Durations<'a> {
        let mut engine = engine.clone();
        engine.record_timeline = false;
        engine.zone_assignment = None;
        Durations {
            partition,
            cluster,
            engine,
            rc_mode,
            cache: BTreeMap::new(),
        }
    }

    fn base(&mut self, microbatches: u32) -> Result<f64> {
        if let Some(&d) = self.cache.get(&microbatches) {
            return Ok(d);
        }
        let schedule = generate_1f1b(self.partition.depth(), microbatches)?;
        let planned = if self.rc_mode == RcMode::None {
            schedule
        } else {
            plan_frc(&schedule, self.rc_mode)?
        };
        let trace = execute_iteration(&planned, self.partition, self.cluster, &self.engine)?;
        let mut secs = trace.duration.as_secs_f64();
        if self.rc_mode != RcMode::None {
            secs *= 1.0 + self.engine.rc_bookkeeping_fraction;
        }
        self.cache.insert(microbatches, secs);
        Ok(secs)
    }
}

/// Microbatches per pipeline that keep the global batch when only `d_cur`
/// of `d_target` pipelines run.
fn scaled_microbatches(m: u32, d_target: usize, d_cur: usize) -> u32 {
    ((m as u64 * d_target as u64).div_ceil(d_cur as u64)) as u32
}

/// Extra iteration time of the worst merged pipeline: a node serving an
/// adopted group runs those stages' compute serially for every microbatch.
fn merged_extra(
    state: &ClusterState,
    partition: &StagePartition,
    microbatches: u32,
    g: usize,
) -> f64 {
    state
        .pipelines
        .iter()
        .map(|p| {
            p.adopted_groups()
                .iter()
                .map(|&gs| {
                    (gs..gs + g)
                        .map(|s| {
                            let c = &partition.stages[s];
                            c.forward.as_secs_f64() + c.backward.as_secs_f64()
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
        * microbatches as f64
}

/// Bytes one rebuilt pipeline loads from durable storage: every stage's
/// weights, twice when the mode keeps a replica on the predecessor.
fn fresh_load_bytes(partition: &StagePartition, replicated: bool) -> u64 {
    let weights: u64 = partition.stages.iter().map(|s| s.weight_bytes).sum();
    if replicated {
        2 * weights
    } else {
        weights
    }
}

// ---------------------------------------------------------------------------
// Strategy loops.

fn pipeline_redundant(
    mut ctx: Ctx,
    cfg: &RunConfig<'_>,
    params: &SimParams,
    rc_mode: RcMode,
) -> Result<SimOutput> {
    let cluster = cfg.cluster;
    let depth = cluster.depth as usize;
    let g = cluster.gpus_per_node as usize;
    let npp = depth / g;
    let d_target = cluster.pipelines as usize;
    let global = cfg.profile.samples_per_iteration;
    let rate = cluster.comm.intra_zone_bytes_per_sec;
    let partition = partition_layers(cfg.profile, cluster.depth, PartitionObjective::BalanceTime)?;
    let mut durs = Durations::new(&partition, cluster, &params.engine, rc_mode);

    let live0 = ctx.feed.live_vec();
    let d0 = d_target.min(live0.len() / npp);
    let (mut state, _) = ClusterState::new(&live0, d0, depth, g)?;

    let mut t = 0.0f64;
    'run: while ctx.running(t) {
        debug_assert!(state.pipelines.iter().all(|p| !p.broken));
        let d_cur = state.pipelines.len();
        let m = scaled_microbatches(cfg.profile.microbatches, d_target, d_cur);
        let iter = durs.base(m)? + merged_extra(&state, &partition, m, g);
        let iter_start = t;
        let mut step_end = t + iter;
        let mut stalled = 0.0f64;
        let mut outcome = StepOutcome::Completed;

        while let Some(group) = ctx.next_group(step_end, &|id| state.locate(id)) {
            match group {
                Group::Allocate { id, zone, .. } => state.on_allocate(id, zone),
                Group::Preempt {
                    time_s: te,
                    victims,
                } => {
                    let report = state.apply_preemption_bulk(&victims);
                    let mut stall = 0.0f64;
                    for &(pi, gs, _) in &report.recovered {
                        let pause = rc_pause_s(
                            rc_mode,
                            &partition,
                            gs,
                            m,
                            g,
                            &params.resilience,
                            &params.engine,
                        );
                        ctx.push_event(SimEvent {
                            time_s: te,
                            kind: SimEventKind::RcRecovered,
                            pipeline: Some(pi),
                            stage: Some(gs),
                            pause_s: pause,
                            bytes_moved: 0,
                        });
                        stall = stall.max(pause);
                    }
                    if state.is_fatal() {
                        ctx.split.wasted_s += (te - iter_start - stalled).max(0.0);
                        ctx.roll_back_to_marker();
                        let Some(tr) = ctx.suspend_until(te, npp) else {
                            outcome = StepOutcome::Exhausted { at: te };
                            break;
                        };
                        ctx.split.restarting_s += tr - te;
                        let live = ctx.feed.live_vec();
                        let d_new = d_target.min(live.len() / npp);
                        let (rebuilt, _) = ClusterState::new(&live, d_new, depth, g)?;
                        state = rebuilt;
                        let bytes =
                            fresh_load_bytes(&partition, rc_mode.keeps_replica()) * d_new as u64;
                        let pause = params.resilience.reconfigure_base_s + bytes as f64 / rate;
                        ctx.push_event(SimEvent {
                            time_s: tr,
                            kind: SimEventKind::FatalRestart,
                            pipeline: None,
                            stage: None,
                            pause_s: (tr - te) + pause,
                            bytes_moved: bytes,
                        });
                        ctx.split.restarting_s += pause;
                        t = tr + pause;
                        outcome = StepOutcome::Aborted;
                        break;
                    }
                    if state.should_reconfigure(false).is_some() {
                        ctx.split.wasted_s += (te - iter_start - stalled).max(0.0);
                        ctx.split.paused_s += stall;
                        let rep = state.reconfigure(&partition, &params.resilience, rate);
                        debug_assert!(!rep.fatal);
                        ctx.push_event(SimEvent {
                            time_s: te,
                            kind: SimEventKind::Reconfigured,
                            pipeline: None,
                            stage: None,
                            pause_s: rep.pause_s,
                            bytes_moved: rep.bytes_moved,
                        });
                        ctx.split.restarting_s += rep.pause_s;
                        t = te.max(iter_start + stalled) + stall + rep.pause_s;
                        outcome = StepOutcome::Aborted;
                        break;
                    }
                    // Recovered in place: the stall extends the step.
                    ctx.split.paused_s += stall;
                    stalled += stall;
                    step_end += stall;
                }
            }
        }

        match outcome {
            StepOutcome::Aborted => continue 'run,
            StepOutcome::Exhausted { at } => return Ok(ctx.finish_suspended(at)),
            StepOutcome::Completed => {}
        }
        t = step_end;
        ctx.split.productive_s += iter;
        ctx.prod_since_marker += iter;
        ctx.samples += global;
        ctx.add_samples(t, global);
        ctx.marker_tick(t);
        if state.should_reconfigure(true).is_some() {
            let rep = state.reconfigure(&partition, &params.resilience, rate);
            if !rep.fatal {
                ctx.push_event(SimEvent {
                    time_s: t,
                    kind: SimEventKind::Reconfigured,
                    pipeline: None,
                    stage: None,
                    pause_s: rep.pause_s,
                    bytes_moved: rep.bytes_moved,
                });
                ctx.split.restarting_s += rep.pause_s;
                t += rep.pause_s;
            }
        }
    }
    Ok(ctx.finish(t))
}

fn pipeline_sample_drop(mut ctx: Ctx, cfg: &RunConfig<'_>, params: &SimParams) -> Result<SimOutput> {
    let cluster = cfg.cluster;
    let depth = cluster.depth as usize;
    let g = cluster.gpus_per_node as usize;
    let npp = depth / g;
    let d_target = cluster.pipelines as usize;
    let global = cfg.profile.samples_per_iteration;
    let rate = cluster.comm.intra_zone_bytes_per_sec;
    let partition = partition_layers(cfg.profile, cluster.depth, PartitionObjective::BalanceTime)?;
    let mut durs = Durations::new(&partition, cluster, &params.engine, RcMode::None);

    // Place exactly the nodes that fit; the rest queue as joiners so holes
    // refill from one queue.
    let live0 = ctx.feed.live_vec();
    let d0 = d_target.min(live0.len() / npp);
    let (mut state, _) = ClusterState::new(&live0[..d0 * npp], d0, depth, g)?;
    for &(id, zone) in &live0[d0 * npp..] {
        state.on_allocate(id, zone);
    }

    let mut t = 0.0f64;
    'run: while ctx.running(t) {
        let iter = durs.base(cfg.profile.microbatches)?;
        let iter_start = t;
        let step_end = t + iter;
        let mut outcome = StepOutcome::Completed;

        while let Some(group) = ctx.next_group(step_end, &|id| state.locate(id)) {
            match group {
                Group::Allocate { id, zone, .. } => state.on_allocate(id, zone),
                Group::Preempt {
                    time_s: te,
                    victims,
                } => {
                    state.mark_dead(&victims);
                    if state.total_live() * g < depth {
                        ctx.split.wasted_s += te - iter_start;
                        ctx.roll_back_to_marker();
                        let Some(tr) = ctx.suspend_until(te, npp) else {
                            outcome = StepOutcome::Exhausted { at: te };
                            break;
                        };
                        ctx.split.restarting_s += tr - te;
                        let live = ctx.feed.live_vec();
                        let d_new = d_target.min(live.len() / npp);
                        let (mut rebuilt, _) = ClusterState::new(&live[..d_new * npp], d_new, depth, g)?;
                        for &(id, zone) in &live[d_new * npp..] {
                            rebuilt.on_allocate(id, zone);
                        }
                        state = rebuilt;
                        let bytes = fresh_load_bytes(&partition, false) * d_new as u64;
                        let pause = params.resilience.reconfigure_base_s + bytes as f64 / rate;
                        ctx.push_event(SimEvent {
                            time_s: tr,
                            kind: SimEventKind::FatalRestart,
                            pipeline: None,
                            stage: None,
                            pause_s: (tr - te) + pause,
                            bytes_moved: bytes,
                        });
                        ctx.split.restarting_s += pause;
                        t = tr + pause;
                        outcome = StepOutcome::Aborted;
                        break;
                    }
                }
            }
        }

        match outcome {
            StepOutcome::Aborted => continue 'run,
            StepOutcome::Exhausted { at } => return Ok(ctx.finish_suspended(at)),
            StepOutcome::Completed => {}
        }
        t = step_end;
        ctx.split.productive_s += iter;
        ctx.prod_since_marker += iter;
        let d_now = state.pipelines.len();
        let share = global / d_now as u64;
        let complete = state.complete_pipelines() as u64;
        let got = complete * share;
        ctx.samples += got;
        ctx.dropped += (d_now as u64 - complete) * share;
        ctx.add_samples(t, got);
        ctx.marker_tick(t);
        state.fill_holes_from_joiners();
    }
    Ok(ctx.finish(t))
}

fn dp_redundant(
    mut ctx: Ctx,
    cfg: &RunConfig<'_>,
    params: &SimParams,
    rc_mode: RcMode,
) -> Result<SimOutput> {
    let rc = rc_mode.keeps_replica();
    let global = cfg.profile.samples_per_iteration;
    let comm = &cfg.cluster.comm;
    let rate = comm.intra_zone_bytes_per_sec;
    let event_pause = params.resilience.detection_timeout_s + params.resilience.reroute_constant_s;
    let model_bytes: u64 = cfg.profile.layers.iter().map(|l| l.weight_bytes).sum();

    let mut t = 0.0f64;
    'run: while ctx.running(t) {
        let workers = ctx.feed.live_count();
        let iter = dp_iteration_time_s(
            cfg.profile,
            workers,
            rc,
            &params.data_parallel,
            comm,
            &params.engine,
        );
        let iter_start = t;
        let mut step_end = t + iter;
        let mut step_dropped = 0u64;
        let mut outcome = StepOutcome::Completed;

        while let Some(group) = ctx.next_group(step_end, &|_| None) {
            match group {
                Group::Allocate { .. } => {}
                Group::Preempt {
                    time_s: te,
                    victims,
                } => {
                    if ctx.feed.live_count() == 0 {
                        ctx.split.wasted_s += te - iter_start;
                        ctx.roll_back_to_marker();
                        let Some(tr) = ctx.suspend_until(te, 1) else {
                            outcome = StepOutcome::Exhausted { at: te };
                            break;
                        };
                        ctx.split.restarting_s += tr - te;
                        let pause =
                            params.resilience.reconfigure_base_s + model_bytes as f64 / rate;
                        ctx.push_event(SimEvent {
                            time_s: tr,
                            kind: SimEventKind::FatalRestart,
                            pipeline: None,
                            stage: None,
                            pause_s: (tr - te) + pause,
                            bytes_moved: model_bytes,
                        });
                        ctx.split.restarting_s += pause;
                        t = tr + pause;
                        outcome = StepOutcome::Aborted;
                        break;
                    }
                    // Survivors re-shard; with a replica shard nothing is
                    // lost, without one the victims' contributions drop.
                    if !rc {
                        step_dropped += victims.len() as u64 * (global / workers as u64);
                    }
                    ctx.push_event(SimEvent {
                        time_s: te,
                        kind: SimEventKind::RcRecovered,
                        pipeline: None,
                        stage: None,
                        pause_s: event_pause,
                        bytes_moved: 0,
                    });
                    ctx.split.paused_s += event_pause;
                    step_end += event_pause;
                }
            }
        }

        match outcome {
            StepOutcome::Aborted => continue 'run,
            StepOutcome::Exhausted { at } => return Ok(ctx.finish_suspended(at)),
            StepOutcome::Completed => {}
        }
        t = step_end;
        ctx.split.productive_s += iter;
        ctx.prod_since_marker += iter;
        let got = global.saturating_sub(step_dropped);
        ctx.samples += got;
        ctx.dropped += global - got;
        ctx.add_samples(t, got);
        ctx.marker_tick(t);
    }
    Ok(ctx.finish(t))
}

fn checkpoint_restart(
    mut ctx: Ctx,
    cfg: &RunConfig<'_>,
    params: &SimParams,
    interval_s: f64,
    restart_cost_s: f64,
) -> Result<SimOutput> {
    let dp = cfg.data_parallel;
    let cluster = cfg.cluster;
    let npp = cluster.nodes_per_pipeline() as usize;
    let needed = if dp { 1 } else { npp };
    let d_target = cluster.pipelines as usize;
    let global = cfg.profile.samples_per_iteration;
    let lag = params.commit_lag_s;
    let partition = if dp {
        None
    } else {
        Some(partition_layers(
            cfg.profile,
            cluster.depth,
            PartitionObjective::BalanceTime,
        )?)
    };
    let mut durs = partition
        .as_ref()
        .map(|p| Durations::new(p, cluster, &params.engine, RcMode::None));

    // Completed iterations not yet durable: (completion time, cumulative
    // samples, duration). The durable horizon at time `x` is the latest
    // checkpoint written at `k * interval` that committed by `x`.
    let mut pending: VecDeque<(f64, u64, f64)> = VecDeque::new();
    let mut durable_samples = 0u64;
    let horizon = |x: f64| ((x - lag) / interval_s).floor() * interval_s;

    let mut t = 0.0f64;
    'run: while ctx.running(t) {
        let live = ctx.feed.live_count();
        debug_assert!(live >= needed);
        let iter = if dp {
            dp_iteration_time_s(
                cfg.profile,
                live,
                false,
                &params.data_parallel,
                &cluster.comm,
                &params.engine,
            )
        } else {
            let d_cur = d_target.min(live / npp);
            let m = scaled_microbatches(cfg.profile.microbatches, d_target, d_cur);
            durs.as_mut().expect("pipeline mode has durations").base(m)?
        };
        let iter_start = t;
        let step_end = t + iter;
        let mut outcome = StepOutcome::Completed;

        while let Some(group) = ctx.next_group(step_end, &|_| None) {
            let Group::Preempt { time_s: te, .. } = group else {
                continue;
            };
            // Roll back to the durable horizon.
            let h = horizon(te);
            while pending.front().is_some_and(|&(ct, _, _)| ct <= h) {
                durable_samples = pending.pop_front().unwrap().1;
            }
            let rolled: f64 = pending.iter().map(|&(_, _, d)| d).sum();
            pending.clear();
            ctx.split.productive_s -= rolled;
            ctx.split.wasted_s += rolled + (te - iter_start);
            ctx.samples = durable_samples;

            // Restart window: a preemption mid-restart resets it; losing
            // quorum suspends it.
            ctx.push_event(SimEvent {
                time_s: te,
                kind: SimEventKind::Restart,
                pipeline: None,
                stage: None,
                pause_s: restart_cost_s,
                bytes_moved: 0,
            });
            let mut until = te + restart_cost_s;
            loop {
                if ctx.feed.live_count() < needed {
                    let since = until - restart_cost_s;
                    let Some(tr) = ctx.suspend_until(since, needed) else {
                        ctx.split.restarting_s += since - te;
                        return Ok(ctx.finish_suspended(since));
                    };
                    ctx.push_event(SimEvent {
                        time_s: tr,
                        kind: SimEventKind::Restart,
                        pipeline: None,
                        stage: None,
                        pause_s: restart_cost_s,
                        bytes_moved: 0,
                    });
                    until = tr + restart_cost_s;
                    continue;
                }
                match ctx.next_group(until, &|_| None) {
                    Some(Group::Preempt { time_s: tp, .. }) => {
                        ctx.push_event(SimEvent {
                            time_s: tp,
                            kind: SimEventKind::Restart,
                            pipeline: None,
                            stage: None,
                            pause_s: restart_cost_s,
                            bytes_moved: 0,
                        });
                        until = tp + restart_cost_s;
                    }
                    Some(Group::Allocate { .. }) => {}
                    None => break,
                }
            }
            ctx.split.restarting_s += until - te;
            t = until;
            outcome = StepOutcome::Aborted;
            break;
        }

        match outcome {
            StepOutcome::Aborted => continue 'run,
            StepOutcome::Exhausted { .. } => unreachable!("handled inside the window"),
            StepOutcome::Completed => {}
        }
        t = step_end;
        ctx.split.productive_s += iter;
        ctx.samples += global;
        pending.push_back((t, ctx.samples, iter));
        let h = horizon(t);
        while pending.front().is_some_and(|&(ct, _, _)| ct <= h) {
            durable_samples = pending.pop_front().unwrap().1;
        }
        ctx.add_samples(t, global);
    }
    Ok(ctx.finish(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{presets, CommModel};

    const GIB: u64 = 1 << 30;

    fn mini_cluster(pipelines: u32, depth: u32) -> ClusterSpec {
        ClusterSpec {
            pipelines,
            depth,
            demand_depth: depth,
            zones: vec!["z0".into(), "z1".into(), "z2".into()],
            gpus_per_node: 1,
            gpu_mem_bytes: 64 * GIB,
            cpu_mem_bytes: 256 * GIB,
            spot_price_per_node_hour: 1.0,
            demand_price_per_node_hour: 3.0,
            comm: CommModel::zero_cost(),
        }
    }

    /// Default engine rather than the calibrated one, so duplicate compute
    /// overlaps for free and closed-form timing stays exact.
    fn quiet_params() -> SimParams {
        SimParams {
            engine: EngineParams::default(),
            ..SimParams::default()
        }
    }

    fn preempt(time_s: f64, node_id: u64) -> ChurnEvent {
        ChurnEvent {
            time_s,
            kind: ChurnKind::Preempt,
            node_id,
            zone: 0,
        }
    }

    fn allocate(time_s: f64, node_id: u64, zone: usize) -> ChurnEvent {
        ChurnEvent {
            time_s,
            kind: ChurnKind::Allocate,
            node_id,
            zone,
        }
    }

    /// The node serving (pipeline, stage) in the initial placement, which
    /// is deterministic for a trace-fed run.
    fn seat_holder(cluster: &ClusterSpec, pipeline: usize, stage: usize) -> u64 {
        let zones = cluster.zones.len();
        let nodes: Vec<(u64, usize)> = (0..cluster.target_nodes() as u64)
            .map(|id| (id, id as usize % zones))
            .collect();
        let (state, _) = ClusterState::new(
            &nodes,
            cluster.pipelines as usize,
            cluster.depth as usize,
            cluster.gpus_per_node as usize,
        )
        .unwrap();
        state.pipelines[pipeline].server_of(stage).unwrap().id
    }

    fn kinds(out: &SimOutput) -> Vec<SimEventKind> {
        out.events.iter().map(|e| e.kind).collect()
    }

    fn count_kind(out: &SimOutput, kind: SimEventKind) -> usize {
        out.events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn quiet_run_matches_the_analytic_iteration_time() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::None,
            },
            stop: StopRule::Samples { target: 640 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Synthetic {
            model: ChurnModel {
                hourly_preemption_probability: 0.0,
                ..ChurnModel::default()
            },
            seed: 7,
        };
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        // Uniform stages over free links: (M + P - 1)(f + b) per iteration.
        let iter = (8.0 + 4.0 - 1.0) * 0.3;
        let r = &out.result;
        assert_eq!(r.samples_completed, 640);
        assert!((r.wall_seconds - 10.0 * iter).abs() < 1e-9);
        assert!((r.time_split.productive_s - r.wall_seconds).abs() < 1e-12);
        assert_eq!(r.preemption_count, 0);
        assert_eq!(r.fatal_restarts, 0);
        assert!(out.events.is_empty());
        assert!((r.node_seconds["spot"] - 8.0 * r.wall_seconds).abs() < 1e-9);
        assert!((r.mean_live_nodes - 8.0).abs() < 1e-9);
        let bucket_total: f64 = out.buckets.iter().map(|b| b.node_seconds).sum();
        assert!((bucket_total - r.node_seconds["spot"]).abs() < 1e-9);
    }

    #[test]
    fn recovery_extends_the_step_and_degrades_later_ones() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let victim = seat_holder(&cluster, 0, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Samples { target: 320 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let params = quiet_params();
        let quiet = run(&cfg, &ChurnSource::Trace(vec![]), &params).unwrap();
        let churn = ChurnSource::Trace(vec![preempt(1.0, victim)]);
        let out = run(&cfg, &churn, &params).unwrap();
        let r = &out.result;
        // Against the quiet baseline: iteration 1 stretches by the
        // eager-eager pause, and the remaining four pay the adopted
        // stage's compute serially for each of the eight microbatches.
        let extra = 4.0 * 8.0 * (0.1 + 0.2);
        assert_eq!(kinds(&out), vec![SimEventKind::Preempt, SimEventKind::RcRecovered]);
        assert!((r.time_split.paused_s - 6.0).abs() < 1e-9);
        assert!(
            (r.time_split.productive_s - quiet.result.time_split.productive_s - extra).abs()
                < 1e-9
        );
        assert!((r.wall_seconds - quiet.result.wall_seconds - (6.0 + extra)).abs() < 1e-9);
        assert_eq!(r.samples_completed, 320);
        assert_eq!(r.dropped_samples, 0);
        assert_eq!(r.fatal_restarts, 0);
    }

    #[test]
    fn adjacent_pair_reconfigures_without_partial_recovery() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let v2 = seat_holder(&cluster, 0, 2);
        let v3 = seat_holder(&cluster, 0, 3);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Samples { target: 320 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(1.0, v2), preempt(1.0, v3)]);
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 0);
        assert_eq!(count_kind(&out, SimEventKind::Reconfigured), 1);
        assert_eq!(out.result.preemption_count, 1);
        assert_eq!(out.result.samples_completed, 320);
        assert!(out.result.time_split.wasted_s > 0.0);
    }

    #[test]
    fn non_adjacent_victims_in_one_pipeline_both_recover() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let v0 = seat_holder(&cluster, 0, 0);
        let v2 = seat_holder(&cluster, 0, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Samples { target: 320 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(1.0, v0), preempt(1.0, v2)]);
        let mut params = quiet_params();
        params.engine.rc_bookkeeping_fraction = 0.0;
        let out = run(&cfg, &churn, &params).unwrap();
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 2);
        assert_eq!(count_kind(&out, SimEventKind::Reconfigured), 0);
        // One global stall, not two: the recoveries overlap.
        assert!((out.result.time_split.paused_s - 6.0).abs() < 1e-9);
    }

    #[test]
    fn simultaneous_recoveries_in_two_pipelines_stall_once() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let a = seat_holder(&cluster, 0, 1);
        let b = seat_holder(&cluster, 1, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Samples { target: 320 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(1.0, a), preempt(1.0, b)]);
        let mut params = quiet_params();
        params.engine.rc_bookkeeping_fraction = 0.0;
        let out = run(&cfg, &churn, &params).unwrap();
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 2);
        assert_eq!(out.result.preemption_count, 1);
        assert!((out.result.time_split.paused_s - 6.0).abs() < 1e-9);
    }

    #[test]
    fn fatal_loss_rolls_back_suspends_and_rebuilds() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(1, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::None,
            },
            stop: StopRule::Samples { target: 1024 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![
            preempt(30.0, 0),
            preempt(30.0, 1),
            allocate(100.0, 2, 0),
            allocate(110.0, 3, 1),
        ]);
        let mut params = quiet_params();
        params.checkpoint_period_s = 5.0;
        params.bucket_width_s = 10.0;
        let out = run(&cfg, &churn, &params).unwrap();
        let r = &out.result;
        // Markers land at 27.0 (samples 640); iterations 11 and the partial
        // 12th are wasted; training resumes at 110 plus the reload pause.
        let iter = (8.0 + 1.0) * 0.3;
        assert_eq!(r.fatal_restarts, 1);
        assert_eq!(r.samples_completed, 1024);
        assert!((r.time_split.wasted_s - (iter + 0.3)).abs() < 1e-9);
        assert!((r.time_split.restarting_s - (80.0 + 30.0)).abs() < 1e-9);
        assert_eq!(count_kind(&out, SimEventKind::Suspend), 1);
        assert_eq!(count_kind(&out, SimEventKind::Resume), 1);
        assert_eq!(count_kind(&out, SimEventKind::FatalRestart), 1);
        // Billing: two nodes until 30, zero while suspended, two from 110.
        let expect = 2.0 * 30.0 + 2.0 * (out.end_s - 110.0);
        assert!((r.node_seconds["spot"] - expect).abs() < 1e-9);
        // The suspended span shows an empty bucket.
        assert_eq!(out.buckets[4].node_seconds, 0.0);
        assert_eq!(
            replay_node_seconds(out.initial_live, &out.events, out.end_s),
            r.node_seconds["spot"]
        );
    }

    #[test]
    fn sample_drop_counts_the_down_share() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let victim = seat_holder(&cluster, 1, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::SampleDrop,
            stop: StopRule::Samples { target: 1024 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(1.0, victim), allocate(40.0, 100, 0)]);
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        let r = &out.result;
        // One pipeline down from step 1 until the joiner fills the hole at
        // the end of step 13 (the allocation lands mid-step): 13 steps of
        // half contribution, then full steps.
        assert_eq!(r.dropped_samples, 13 * 32);
        assert_eq!(r.samples_completed, 1056);
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 0);
        assert_eq!(count_kind(&out, SimEventKind::Reconfigured), 0);
        assert_eq!(r.time_split.paused_s, 0.0);
        assert_eq!(r.fatal_restarts, 0);
    }

    #[test]
    fn checkpoint_restart_quiet_run_is_fully_productive() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::CheckpointRestart {
                interval_s: 300.0,
                restart_cost_s: 600.0,
            },
            stop: StopRule::Samples { target: 640 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Synthetic {
            model: ChurnModel {
                hourly_preemption_probability: 0.0,
                ..ChurnModel::default()
            },
            seed: 3,
        };
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        let r = &out.result;
        assert_eq!(r.samples_completed, 640);
        assert!((r.time_split.productive_s - r.wall_seconds).abs() < 1e-12);
        assert_eq!(count_kind(&out, SimEventKind::Restart), 0);
    }

    #[test]
    fn checkpoint_restart_rolls_back_to_the_durable_horizon() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let victim = seat_holder(&cluster, 0, 1);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::CheckpointRestart {
                interval_s: 10.0,
                restart_cost_s: 50.0,
            },
            stop: StopRule::Samples { target: 448 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(20.0, victim)]);
        let mut params = quiet_params();
        params.commit_lag_s = 2.0;
        let out = run(&cfg, &churn, &params).unwrap();
        let r = &out.result;
        // Completions at 3.3, 6.6, 9.9, ... The checkpoint written at 10
        // committed at 12, so progress rolls back to 9.9 (192 samples):
        // three whole iterations plus the partial one are wasted.
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 0);
        assert_eq!(count_kind(&out, SimEventKind::Restart), 1);
        assert!((r.time_split.restarting_s - 50.0).abs() < 1e-9);
        assert!((r.time_split.wasted_s - (3.0 * 3.3 + 0.2)).abs() < 1e-9);
        assert_eq!(r.samples_completed, 448);
        assert_eq!(r.fatal_restarts, 0);
    }

    #[test]
    fn checkpoint_restart_fraction_tracks_the_closed_form() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let mut cluster = mini_cluster(16, 1);
        cluster.comm.intra_zone_bytes_per_sec = 12.5e9;
        let p_hourly = 0.3;
        let model = ChurnModel {
            hourly_preemption_probability: p_hourly,
            ..ChurnModel::default()
        };
        // Equilibrium fleet under replacement lag, as the mean of the
        // birth-death process the generator plays.
        let lag = model.allocation_lag_mean_s;
        let bulk = model.bulk_mean;
        let live_eq = 16.0 / (1.0 + p_hourly * bulk * lag / 3600.0);
        let lambda = live_eq * p_hourly / 3600.0;
        let interval_s = 10.0;
        let commit_lag_s = 2.0;
        // Solve the renewal equation for a 50% productive fraction.
        let restart_s = 0.5f64.ln().abs() / lambda - commit_lag_s - 0.5 * interval_s;
        let expected =
            checkpoint_productive_fraction(lambda, restart_s, commit_lag_s, interval_s);
        assert!((expected - 0.5).abs() < 1e-12);

        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::CheckpointRestart {
                interval_s,
                restart_cost_s: restart_s,
            },
            stop: StopRule::Duration {
                seconds: 400.0 * 3600.0,
            },
            instance_class: InstanceClass::Spot,
            data_parallel: true,
        };
        let mut params = quiet_params();
        params.commit_lag_s = commit_lag_s;
        let churn = ChurnSource::Synthetic {
            model: model.clone(),
            seed: 11,
        };
        let out = run(&cfg, &churn, &params).unwrap();
        let fraction = out.result.time_split.productive_s / out.result.wall_seconds;
        assert!(
            (fraction - expected).abs() < 0.05,
            "fraction {fraction} vs closed form {expected}"
        );
    }

    #[test]
    fn checkpoint_restart_fraction_is_monotone_in_the_interval() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(16, 1);
        let mut fractions = Vec::new();
        for p_hourly in [0.1, 0.3, 0.6] {
            let cfg = RunConfig {
                profile: &profile,
                cluster: &cluster,
                strategy: Strategy::CheckpointRestart {
                    interval_s: 10.0,
                    restart_cost_s: 300.0,
                },
                stop: StopRule::Duration {
                    seconds: 200.0 * 3600.0,
                },
                instance_class: InstanceClass::Spot,
                data_parallel: true,
            };
            let churn = ChurnSource::Synthetic {
                model: ChurnModel {
                    hourly_preemption_probability: p_hourly,
                    ..ChurnModel::default()
                },
                seed: 5,
            };
            let out = run(&cfg, &churn, &quiet_params()).unwrap();
            fractions.push(out.result.time_split.productive_s / out.result.wall_seconds);
        }
        // Longer mean preemption intervals (smaller p) keep more work.
        assert!(fractions[0] > fractions[1] && fractions[1] > fractions[2]);
    }

    #[test]
    fn dp_recovery_loses_no_samples() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(8, 1);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Samples { target: 320 },
            instance_class: InstanceClass::Spot,
            data_parallel: true,
        };
        let churn = ChurnSource::Trace(vec![preempt(0.5, 3)]);
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        let r = &out.result;
        assert_eq!(r.samples_completed, 320);
        assert_eq!(r.dropped_samples, 0);
        assert!((r.time_split.paused_s - 6.0).abs() < 1e-9);
        assert_eq!(count_kind(&out, SimEventKind::RcRecovered), 1);
    }

    #[test]
    fn same_seed_reruns_bit_identical() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(2, 4);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Duration {
                seconds: 20.0 * 3600.0,
            },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Synthetic {
            model: ChurnModel {
                hourly_preemption_probability: 0.2,
                ..ChurnModel::default()
            },
            seed: 42,
        };
        let params = quiet_params();
        let a = run(&cfg, &churn, &params).unwrap();
        let b = run(&cfg, &churn, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.result.preemption_count > 0);
        assert_eq!(
            replay_node_seconds(a.initial_live, &a.events, a.end_s),
            a.result.node_seconds["spot"]
        );
    }

    #[test]
    fn zero_fatal_runs_conserve_the_global_batch() {
        let profile = presets::uniform(4, 0.1, 0.2);
        let cluster = mini_cluster(3, 4);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Duration {
                seconds: 10.0 * 3600.0,
            },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Synthetic {
            model: ChurnModel {
                hourly_preemption_probability: 0.15,
                bulk_mean: 1.0,
                ..ChurnModel::default()
            },
            seed: 9,
        };
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        let r = &out.result;
        assert_eq!(r.fatal_restarts, 0, "pick a quieter seed if this trips");
        assert!(r.preemption_count > 0);
        assert_eq!(r.samples_completed % profile.samples_per_iteration, 0);
        assert_eq!(r.dropped_samples, 0);
        assert_eq!(
            replay_node_seconds(out.initial_live, &out.events, out.end_s),
            r.node_seconds["spot"]
        );
    }

    #[test]
    fn dp_sample_drop_is_rejected() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(4, 1);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::SampleDrop,
            stop: StopRule::Samples { target: 64 },
            instance_class: InstanceClass::Spot,
            data_parallel: true,
        };
        let churn = ChurnSource::Synthetic {
            model: ChurnModel::default(),
            seed: 1,
        };
        let err = run(&cfg, &churn, &quiet_params()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }

    #[test]
    fn zero_sample_target_is_rejected() {
        assert!(StopRule::Samples { target: 0 }.validate().is_err());
        assert!(StopRule::Duration { seconds: 0.0 }.validate().is_err());
        assert!(StopRule::Duration { seconds: 3600.0 }.validate().is_ok());
    }

    #[test]
    fn unordered_trace_is_rejected() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(1, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::SampleDrop,
            stop: StopRule::Samples { target: 64 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(5.0, 0), allocate(1.0, 9, 0)]);
        let err = run(&cfg, &churn, &quiet_params()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }

    #[test]
    fn event_csv_has_stable_columns() {
        let events = vec![
            SimEvent {
                time_s: 1.5,
                kind: SimEventKind::Preempt,
                pipeline: Some(0),
                stage: Some(2),
                pause_s: 0.0,
                bytes_moved: 0,
            },
            SimEvent {
                time_s: 1.5,
                kind: SimEventKind::Reconfigured,
                pipeline: None,
                stage: None,
                pause_s: 31.25,
                bytes_moved: 4096,
            },
        ];
        let csv = events_csv(&events);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(EVENT_CSV_HEADER));
        assert_eq!(lines.next(), Some("1500000000,preempt,0,2,0,0"));
        assert_eq!(
            lines.next(),
            Some("1500000000,reconfigured,,,31250000000,4096")
        );
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn closed_form_fraction_calibration_inverts() {
        // 64 spot nodes at 5%/hour, solving for the restart cost that
        // leaves 23% of time productive.
        let lambda = 64.0 * 0.05 / 3600.0;
        let lag = 60.0;
        let interval = 300.0;
        let restart = (1.0 / 0.23f64).ln() / lambda - lag - 0.5 * interval;
        assert!(restart > 0.0);
        let f = checkpoint_productive_fraction(lambda, restart, lag, interval);
        assert!((f - 0.23).abs() < 1e-12);
    }

    #[test]
    fn suspended_run_with_a_dry_feed_ends_suspended() {
        let profile = presets::uniform(2, 0.1, 0.2);
        let cluster = mini_cluster(1, 2);
        let cfg = RunConfig {
            profile: &profile,
            cluster: &cluster,
            strategy: Strategy::Redundant {
                rc_mode: RcMode::Efeb,
            },
            stop: StopRule::Duration { seconds: 100.0 },
            instance_class: InstanceClass::Spot,
            data_parallel: false,
        };
        let churn = ChurnSource::Trace(vec![preempt(10.0, 0), preempt(10.0, 1)]);
        let out = run(&cfg, &churn, &quiet_params()).unwrap();
        let r = &out.result;
        assert_eq!(r.fatal_restarts, 1);
        assert_eq!(count_kind(&out, SimEventKind::Suspend), 1);
        assert_eq!(count_kind(&out, SimEventKind::Resume), 0);
        // The bill stops at the suspension; the wall runs to the horizon.
        assert!((r.node_seconds["spot"] - 2.0 * 10.0).abs() < 1e-9);
        assert!((r.wall_seconds - 100.0).abs() < 1e-9);
    }
}
