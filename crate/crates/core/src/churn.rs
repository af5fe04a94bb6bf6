//! Spot-market behavior: the stream of preemption and allocation events.
//!
//! Events come from one of two sources. [`load_trace`] replays a recorded
//! trace file; [`ChurnProcess`] synthesizes zone-correlated churn and
//! emulates the autoscaling group that backfills toward the target size.
//! Preemption events arrive as a Poisson process whose rate tracks the
//! current live count; each event takes out a bulk of nodes, usually all
//! from one zone, because spot reclamation drains capacity pools a zone at
//! a time. The module also owns zone-aware placement: consecutive pipeline
//! stages should sit in different zones so a single-zone reclamation does
//! not take out a stage together with the node holding its replica.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const SECS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChurnKind {
    Preempt,
    Allocate,
}

impl fmt::Display for ChurnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChurnKind::Preempt => "preempt",
            ChurnKind::Allocate => "allocate",
        })
    }
}

impl FromStr for ChurnKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "preempt" => Ok(ChurnKind::Preempt),
            "allocate" => Ok(ChurnKind::Allocate),
            other => Err(format!("unknown event kind `{other}`")),
        }
    }
}

/// One node joining or leaving the fleet. Times are seconds from run start.
#[derive(Debug, Clone, PartialEq)]
pub struct ChurnEvent {
    pub time_s: f64,
    pub kind: ChurnKind,
    pub node_id: u64,
    pub zone: usize,
}

/// Statistical description of the spot market for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChurnModel {
    /// Hourly per-node preemption probability; the event rate is
    /// `live_count x p` per hour.
    pub hourly_preemption_probability: f64,
    /// Mean nodes removed per preemption event (1 + geometric).
    pub bulk_mean: f64,
    /// Probability that a whole bulk is drawn from a single zone.
    pub same_zone_probability: f64,
    /// Mean commit lag for an allocation request batch, seconds.
    pub allocation_lag_mean_s: f64,
    /// Number of availability zones nodes spread over.
    pub zone_count: usize,
}

impl Default for ChurnModel {
    fn default() -> Self {
        ChurnModel {
            hourly_preemption_probability: 0.05,
            bulk_mean: 4.0,
            same_zone_probability: 120.0 / 127.0,
            allocation_lag_mean_s: 600.0,
            zone_count: 3,
        }
    }
}

impl ChurnModel {
    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, message: String| Error::InvalidConfig {
            path: format!("churn.{path}"),
            message,
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.hourly_preemption_probability) {
            return Err(field(
                "hourly_preemption_probability",
                format!("{} is not in [0, 1]", self.hourly_preemption_probability),
            ));
        }
        if !unit(self.same_zone_probability) {
            return Err(field(
                "same_zone_probability",
                format!("{} is not in [0, 1]", self.same_zone_probability),
            ));
        }
        if !self.bulk_mean.is_finite() || self.bulk_mean < 1.0 {
            return Err(field(
                "bulk_mean",
                format!("{} must be at least 1 (every event takes a node)", self.bulk_mean),
            ));
        }
        if !self.allocation_lag_mean_s.is_finite() || self.allocation_lag_mean_s < 0.0 {
            return Err(field(
                "allocation_lag_mean_s",
                format!("{} must be non-negative", self.allocation_lag_mean_s),
            ));
        }
        if self.zone_count == 0 {
            return Err(field("zone_count", "at least one zone required".into()));
        }
        Ok(())
    }
}

/// Online generator: draws preemption events at the live-count-dependent
/// rate and plays the autoscaling group, which requests replacements up to
/// the target and commits them after a lag. Deterministic per seed.
pub struct ChurnProcess {
    model: ChurnModel,
    target: usize,
    rng: ChaCha8Rng,
    /// Live node id -> zone.
    live: BTreeMap<u64, usize>,
    /// Outstanding allocation batches as (commit time, node count), kept
    /// sorted by commit time descending so the soonest pops off the end.
    pending: Vec<(f64, usize)>,
    next_preempt_s: f64,
    next_id: u64,
    ready: VecDeque<ChurnEvent>,
}

impl ChurnProcess {
    /// Starts with a full fleet of `target_size` nodes (ids `0..target`),
    /// zones assigned round-robin. The initial fleet emits no events.
    pub fn new(model: ChurnModel, target_size: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        if target_size == 0 {
            return Err(Error::InvalidConfig {
                path: "churn.target_size".into(),
                message: "fleet must start with at least one node".into(),
            });
        }
        let live = (0..target_size as u64)
            .map(|id| (id, id as usize % model.zone_count))
            .collect();
        let mut process = ChurnProcess {
            model,
            target: target_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            live,
            pending: Vec::new(),
            next_preempt_s: f64::INFINITY,
            next_id: target_size as u64,
            ready: VecDeque::new(),
        };
        process.next_preempt_s = process.sample_preempt_time(0.0);
        Ok(process)
    }

    pub fn live_nodes(&self) -> &BTreeMap<u64, usize> {
        &self.live
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Next churn event strictly before `horizon_s`, or `None` if the
    /// process stays quiet until then. Repeated calls walk the stream in
    /// time order.
    pub fn next_event(&mut self, horizon_s: f64) -> Option<ChurnEvent> {
        loop {
            if let Some(ev) = self.ready.pop_front() {
                return Some(ev);
            }
            let commit_t = self.pending.last().map_or(f64::INFINITY, |&(t, _)| t);
            let t = commit_t.min(self.next_preempt_s);
            if !(t < horizon_s) {
                return None;
            }
            if commit_t <= self.next_preempt_s {
                self.commit_allocation(t);
            } else {
                self.preempt_bulk(t);
            }
            // Live count changed either way; the exponential clock is
            // memoryless, so resampling at the new rate is exact.
            self.next_preempt_s = self.sample_preempt_time(t);
        }
    }

    fn sample_preempt_time(&mut self, now_s: f64) -> f64 {
        let rate_per_s = self.live.len() as f64 * self.model.hourly_preemption_probability
            / SECS_PER_HOUR;
        if rate_per_s <= 0.0 {
            return f64::INFINITY;
        }
        now_s + Exp::new(rate_per_s).expect("positive rate").sample(&mut self.rng)
    }

    fn commit_allocation(&mut self, t: f64) {
        let (_, count) = self.pending.pop().expect("commit exists");
        for _ in 0..count {
            let id = self.next_id;
            self.next_id += 1;
            let zone = self.rng.gen_range(0..self.model.zone_count);
            self.live.insert(id, zone);
            self.ready.push_back(ChurnEvent {
                time_s: t,
                kind: ChurnKind::Allocate,
                node_id: id,
                zone,
            });
        }
    }

    fn preempt_bulk(&mut self, t: f64) {
        let bulk = 1 + Geometric::new(1.0 / self.model.bulk_mean)
            .expect("bulk_mean >= 1")
            .sample(&mut self.rng) as usize;
        let all: Vec<u64> = self.live.keys().copied().collect();
        let pool: Vec<u64> = if self.rng.gen_bool(self.model.same_zone_probability) {
            // Zone-wide reclamation: seed victim picks the zone, weighted
            // by population.
            let seed = all[self.rng.gen_range(0..all.len())];
            let zone = self.live[&seed];
            all.into_iter().filter(|id| self.live[id] == zone).collect()
        } else {
            all
        };
        let k = bulk.min(pool.len());
        let mut victims: Vec<u64> = rand::seq::index::sample(&mut self.rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        victims.sort_unstable();
        for id in victims {
            let zone = self.live.remove(&id).expect("victim was live");
            self.ready.push_back(ChurnEvent {
                time_s: t,
                kind: ChurnKind::Preempt,
                node_id: id,
                zone,
            });
        }
        let pending_total: usize = self.pending.iter().map(|&(_, c)| c).sum();
        let deficit = autoscale_request(self.live.len(), pending_total, self.target);
        if deficit > 0 && self.model.allocation_lag_mean_s >= 0.0 {
            let lag = if self.model.allocation_lag_mean_s == 0.0 {
                0.0
            } else {
                Exp::new(1.0 / self.model.allocation_lag_mean_s)
                    .expect("positive rate")
                    .sample(&mut self.rng)
            };
            self.pending.push((t + lag, deficit));
            self.pending
                .sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite commit times"));
        }
    }
}

/// Nodes an autoscaling group should request right now. Requests are issued
/// only to cover the gap to the target and never scale beyond it.
pub fn autoscale_request(live: usize, pending: usize, target: usize) -> usize {
    target.saturating_sub(live + pending)
}

/// Full synthetic event stream for a run of `duration_s` seconds.
pub fn synthesize(
    model: &ChurnModel,
    target_size: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<ChurnEvent>> {
    let mut process = ChurnProcess::new(model.clone(), target_size, seed)?;
    let mut events = Vec::new();
    while let Some(ev) = process.next_event(duration_s) {
        events.push(ev);
    }
    Ok(events)
}

const TRACE_HEADER: &str = "time_s,kind,node_id,zone";

/// Serializes events in the trace file format. Float times use the
/// shortest representation that round-trips, so write -> load is lossless.
pub fn to_csv(events: &[ChurnEvent]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for ev in events {
        out.push_str(&format!("{},{},{},{}\n", ev.time_s, ev.kind, ev.node_id, ev.zone));
    }
    out
}

/// Parses the trace format: header `time_s,kind,node_id,zone`, one event
/// per line. Returns events sorted by time. Errors name the offending line
/// (1-based, header included).
pub fn parse_trace(text: &str) -> Result<Vec<ChurnEvent>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let bad = |line: usize, message: String| Error::TraceParse { line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().expect("non-empty text has a first line");
    if header.trim() != TRACE_HEADER {
        return Err(bad(1, format!("expected header `{TRACE_HEADER}`, got `{header}`")));
    }
    let mut events: Vec<(usize, ChurnEvent)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(line_no, format!("expected 4 fields, got {}", fields.len())));
        }
        let time_s: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, format!("bad time `{}`", fields[0])))?;
        if !time_s.is_finite() || time_s < 0.0 {
            return Err(bad(line_no, format!("time {time_s} must be finite and non-negative")));
        }
        let kind: ChurnKind = fields[1]
            .trim()
            .parse()
            .map_err(|e| bad(line_no, e))?;
        let node_id: u64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, format!("bad node id `{}`", fields[2])))?;
        let zone: usize = fields[3]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, format!("bad zone `{}`", fields[3])))?;
        events.push((line_no, ChurnEvent { time_s, kind, node_id, zone }));
    }
    events.sort_by(|a, b| a.1.time_s.partial_cmp(&b.1.time_s).expect("finite times"));

    // Lifecycle check: between two preemptions of the same node there must
    // be an allocation, and vice versa. A node first seen as preempted
    // belonged to the initial fleet; one first seen as allocated is new.
    let mut alive: BTreeMap<u64, bool> = BTreeMap::new();
    for (line_no, ev) in &events {
        match (alive.get(&ev.node_id), ev.kind) {
            (Some(false), ChurnKind::Preempt) => {
                return Err(bad(
                    *line_no,
                    format!("node {} preempted twice without reallocation", ev.node_id),
                ));
            }
            (Some(true), ChurnKind::Allocate) => {
                return Err(bad(
                    *line_no,
                    format!("node {} allocated while still live", ev.node_id),
                ));
            }
            _ => {}
        }
        alive.insert(ev.node_id, ev.kind == ChurnKind::Allocate);
    }
    Ok(events.into_iter().map(|(_, ev)| ev).collect())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<ChurnEvent>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_trace(&text)
}

/// Assigns live nodes to `pipelines x depth` stage slots so that adjacent
/// stages (including last -> first, since the last node shadows the first)
/// sit in different zones wherever the inventory permits. Returns the node
/// ids per pipeline in stage order plus the number of adjacent same-zone
/// pairs that could not be avoided.
pub fn place_nodes(
    nodes: &[(u64, usize)],
    pipelines: usize,
    depth: usize,
) -> Result<(Vec<Vec<u64>>, u32)> {
    let needed = pipelines * depth;
    if nodes.len() < needed {
        return Err(Error::InsufficientNodes {
            needed,
            available: nodes.len(),
        });
    }
    // Zone inventories, ids sorted for determinism.
    let mut by_zone: BTreeMap<usize, VecDeque<u64>> = BTreeMap::new();
    let mut sorted: Vec<(u64, usize)> = nodes.to_vec();
    sorted.sort_unstable();
    for (id, zone) in sorted {
        by_zone.entry(zone).or_default().push_back(id);
    }

    let mut assignment = Vec::with_capacity(pipelines);
    let mut violations = 0u32;
    for _ in 0..pipelines {
        let mut remaining: BTreeMap<usize, usize> =
            by_zone.iter().map(|(z, q)| (*z, q.len())).collect();
        let mut zones_seq: Vec<usize> = Vec::with_capacity(depth);
        for pos in 0..depth {
            let prev = zones_seq.last().copied();
            let first = zones_seq.first().copied();
            let closing = depth >= 2 && pos == depth - 1;
            let pick = |exclude: &[Option<usize>], remaining: &BTreeMap<usize, usize>| {
                remaining
                    .iter()
                    .filter(|(z, n)| **n > 0 && !exclude.contains(&Some(**z)))
                    .max_by_key(|(z, n)| (**n, std::cmp::Reverse(**z)))
                    .map(|(z, _)| *z)
            };
            // Prefer avoiding both neighbors when closing the ring, then
            // just the previous stage, then accept a violation.
            let zone = if closing {
                pick(&[prev, first], &remaining)
            } else {
                None
            }
            .or_else(|| pick(&[prev], &remaining))
            .or_else(|| pick(&[], &remaining))
            .expect("inventory checked above");
            *remaining.get_mut(&zone).expect("zone exists") -= 1;
            zones_seq.push(zone);
        }
        // Local repair: swap positions while any swap lowers the count.
        loop {
            let before = ring_violations(&zones_seq);
            if before == 0 {
                break;
            }
            let mut improved = false;
            'search: for i in 0..depth {
                for j in i + 1..depth {
                    zones_seq.swap(i, j);
                    if ring_violations(&zones_seq) < before {
                        improved = true;
                        break 'search;
                    }
                    zones_seq.swap(i, j);
                }
            }
            if !improved {
                break;
            }
        }
        violations += ring_violations(&zones_seq);
        let ids: Vec<u64> = zones_seq
            .iter()
            .map(|z| by_zone.get_mut(z).expect("zone exists").pop_front().expect("inventory"))
            .collect();
        assignment.push(ids);
    }
    Ok((assignment, violations))
}

/// Adjacent same-zone pairs in a stage ring; wraparound counts for rings of
/// at least two (a single stage has no neighbor distinct from itself).
fn ring_violations(zones: &[usize]) -> u32 {
    if zones.len() < 2 {
        return 0;
    }
    let mut count = 0;
    for i in 0..zones.len() {
        if zones[i] == zones[(i + 1) % zones.len()] {
            count += 1;
        }
    }
    count
}
