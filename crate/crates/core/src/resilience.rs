//! Cluster state machine: who serves which stage, what happens when spot
//! instances disappear, and when the cluster reshapes itself.
//!
//! Recovery works at node granularity. Every node continuously maintains a
//! replica of its successor's stages, so when a node dies its predecessor
//! (the shadow) can take over the lost stages by switching to the merged
//! failover schedule. Two preemptions in a row defeat that: the shadow's
//! own replica died with it, so the pipeline must reconfigure instead.
//! Reconfiguration pulls joiners and standby nodes into the holes, shrinks
//! the pipeline count when nodes do not divide evenly, or grows it when a
//! full pipeline's worth of spares has accumulated. A run only becomes
//! fatal when fewer nodes survive than one pipeline needs; training then
//! falls back to the last asynchronous checkpoint.

use crate::engine::EngineParams;
use crate::profile::StagePartition;
use crate::schedule::RcMode;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// How a run deals with preemptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Pipeline parallelism with redundant computation on the predecessor;
    /// recovery runs the merged failover schedule.
    Redundant { rc_mode: RcMode },
    /// Strawman: stop everything on any preemption, reload the last
    /// checkpoint, and re-form the cluster.
    CheckpointRestart {
        interval_s: f64,
        restart_cost_s: f64,
    },
    /// Strawman: keep going but drop the contributions of broken pipelines
    /// each step.
    SampleDrop,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        if let Strategy::CheckpointRestart {
            interval_s,
            restart_cost_s,
        } = self
        {
            if !(*interval_s > 0.0) {
                return Err(Error::InvalidConfig {
                    path: "strategy.interval_s".into(),
                    message: format!("checkpoint interval {interval_s} must be positive"),
                });
            }
            if !(*restart_cost_s >= 0.0) {
                return Err(Error::InvalidConfig {
                    path: "strategy.restart_cost_s".into(),
                    message: format!("restart cost {restart_cost_s} must be non-negative"),
                });
            }
        }
        Ok(())
    }
}

/// Fixed costs of the recovery machinery, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResilienceParams {
    /// Time for both neighbors to notice a dead peer.
    pub detection_timeout_s: f64,
    /// Re-pointing sends/receives at the shadow node.
    pub reroute_constant_s: f64,
    /// Base pause of a reconfiguration, on top of layer movement.
    pub reconfigure_base_s: f64,
}

impl Default for ResilienceParams {
    fn default() -> Self {
        ResilienceParams {
            detection_timeout_s: 5.0,
            reroute_constant_s: 1.0,
            reconfigure_base_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryKind {
    RcRecovered {
        pause_s: f64,
    },
    Reconfigured {
        pause_s: f64,
        new_pipelines: usize,
        new_depth: usize,
    },
    FatalRestart {
        lost_samples: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub kind: RecoveryKind,
    pub rerouted: bool,
}

/// Sequentially consistent versioned map standing in for the coordination
/// service. Every write bumps the global version; reads see the latest.
#[derive(Debug, Clone, Default)]
pub struct CoordStore {
    version: u64,
    entries: BTreeMap<String, (u64, String)>,
}

impl CoordStore {
    pub fn put(&mut self, key: impl Into<String>, value: impl Into<String>) -> u64 {
        self.version += 1;
        self.entries.insert(key.into(), (self.version, value.into()));
        self.version
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.entries
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub id: u64,
    pub zone: usize,
}

/// A standby or donor node remembers the stage whose state it still holds,
/// so reassigning it there moves no bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Spare {
    node: Node,
    old_stage: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    /// Live node serving each stage; a merged shadow appears under both its
    /// own stages and the victim's. `None` marks a hole awaiting
    /// reconfiguration.
    serving: Vec<Option<Node>>,
    /// Stages hosted per node; nodes own whole groups of this size.
    gpus_per_node: usize,
    /// Set when a stage could not be recovered in place.
    pub broken: bool,
}

impl Pipeline {
    pub fn server_of(&self, stage: usize) -> Option<Node> {
        self.serving[stage]
    }

    fn group_starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.serving.len()).step_by(self.gpus_per_node)
    }

    /// Groups served per node id.
    fn group_count(&self) -> BTreeMap<u64, usize> {
        let mut count = BTreeMap::new();
        for gs in self.group_starts() {
            if let Some(n) = self.serving[gs] {
                *count.entry(n.id).or_insert(0) += 1;
            }
        }
        count
    }

    /// Distinct nodes currently serving this pipeline.
    fn nodes(&self) -> Vec<Node> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for node in self.serving.iter().flatten() {
            if seen.insert(node.id) {
                out.push(*node);
            }
        }
        out
    }

    /// Whether every stage group has a dedicated live node.
    pub fn complete(&self) -> bool {
        !self.broken
            && self.serving.iter().all(|s| s.is_some())
            && self.nodes().len() == self.serving.len() / self.gpus_per_node
    }

    /// Stages currently covered by a node that also serves other groups
    /// (the pipeline is running a failover schedule).
    pub fn merged_stages(&self) -> Vec<usize> {
        let count = self.group_count();
        let mut merged = Vec::new();
        for (stage, node) in self.serving.iter().enumerate() {
            if let Some(n) = node {
                if count[&n.id] > 1 {
                    merged.push(stage);
                }
            }
        }
        merged
    }

    /// Group starts a merged node adopted from a victim, excluding each
    /// node's home group (the first of its consecutive run, whose
    /// predecessor is someone else). These stages run as serialized extra
    /// work on their shadow until reconfiguration.
    pub fn adopted_groups(&self) -> Vec<usize> {
        let depth = self.serving.len();
        let mut adopted = Vec::new();
        for (id, count) in self.group_count() {
            if count < 2 {
                continue;
            }
            let groups: Vec<usize> = self
                .group_starts()
                .filter(|&gs| self.serving[gs].map(|n| n.id) == Some(id))
                .collect();
            let home = groups
                .iter()
                .copied()
                .find(|&gs| {
                    let prev = (gs + depth - 1) % depth;
                    self.serving[prev].map(|n| n.id) != Some(id)
                })
                .unwrap_or(groups[0]);
            adopted.extend(groups.into_iter().filter(|&gs| gs != home));
        }
        adopted.sort_unstable();
        adopted
    }
}

/// What a preemption bulk did to the cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkReport {
    /// (pipeline, victim stage range start, shadow node) per recovered group.
    pub recovered: Vec<(usize, usize, u64)>,
    /// Pipelines left with an unrecoverable hole.
    pub broken_pipelines: Vec<usize>,
    /// Victims that were on standby or still joining; no recovery needed.
    pub idle_losses: usize,
}

impl BulkReport {
    pub fn needs_reconfigure(&self) -> bool {
        !self.broken_pipelines.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigureReport {
    pub pause_s: f64,
    pub bytes_moved: u64,
    pub new_pipelines: usize,
    /// Fewer live nodes than one pipeline needs; nothing was changed.
    pub fatal: bool,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub depth: usize,
    pub gpus_per_node: usize,
    pub pipelines: Vec<Pipeline>,
    standby: VecDeque<Spare>,
    joiners: VecDeque<Node>,
    /// Failures recorded since the last reconfiguration.
    pub failures_since_reconfig: usize,
    pub store: CoordStore,
}

impl ClusterState {
    /// Places `nodes` into `pipelines x depth` stage slots zone-aware (see
    /// [`crate::churn::place_nodes`]); leftovers go to standby in id order.
    /// Returns the state and the count of adjacent same-zone placements
    /// that could not be avoided.
    pub fn new(
        nodes: &[(u64, usize)],
        pipelines: usize,
        depth: usize,
        gpus_per_node: usize,
    ) -> Result<(Self, u32)> {
        if gpus_per_node == 0 || !depth.is_multiple_of(gpus_per_node) {
            return Err(Error::InvalidConfig {
                path: "cluster.gpus_per_node".into(),
                message: format!(
                    "depth {depth} must be a positive multiple of gpus_per_node {gpus_per_node}"
                ),
            });
        }
        let slots_per_pipeline = depth / gpus_per_node;
        let (rows, violations) = crate::churn::place_nodes(nodes, pipelines, slots_per_pipeline)?;
        let zone_of: BTreeMap<u64, usize> = nodes.iter().copied().collect();
        let mut used = BTreeSet::new();
        let built: Vec<Pipeline> = rows
            .iter()
            .map(|row| {
                let mut serving = Vec::with_capacity(depth);
                for &id in row {
                    used.insert(id);
                    let node = Node { id, zone: zone_of[&id] };
                    for _ in 0..gpus_per_node {
                        serving.push(Some(node));
                    }
                }
                Pipeline { serving, gpus_per_node, broken: false }
            })
            .collect();
        let mut standby: VecDeque<Spare> = nodes
            .iter()
            .filter(|(id, _)| !used.contains(id))
            .map(|&(id, zone)| Spare { node: Node { id, zone }, old_stage: None })
            .collect();
        standby.make_contiguous().sort_by_key(|s| s.node.id);
        let state = ClusterState {
            depth,
            gpus_per_node,
            pipelines: built,
            standby,
            joiners: VecDeque::new(),
            failures_since_reconfig: 0,
            store: CoordStore::default(),
        };
        Ok((state, violations))
    }

    pub fn standby_count(&self) -> usize {
        self.standby.len()
    }

    pub fn joiner_count(&self) -> usize {
        self.joiners.len()
    }

    /// Distinct live nodes: active plus standby plus joiners.
    pub fn total_live(&self) -> usize {
        self.active_nodes().len() + self.standby.len() + self.joiners.len()
    }

    fn active_nodes(&self) -> Vec<Node> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.pipelines {
            for node in p.nodes() {
                if seen.insert(node.id) {
                    out.push(node);
                }
            }
        }
        out
    }

    /// Cannot form even one full pipeline.
    pub fn is_fatal(&self) -> bool {
        self.total_live() * self.gpus_per_node < self.depth
    }

    /// Pipelines with every stage on its own live node.
    pub fn complete_pipelines(&self) -> usize {
        self.pipelines.iter().filter(|p| p.complete()).count()
    }

    /// The node holding `stage`'s layer replica: whoever serves the stage
    /// group just before it (stage 0's replica lives on the last node).
    pub fn replica_holder(&self, pipeline: usize, stage: usize) -> Option<Node> {
        let group_start = stage - stage % self.gpus_per_node;
        let prev = (group_start + self.depth - 1) % self.depth;
        self.pipelines[pipeline].serving[prev]
    }

    pub fn on_allocate(&mut self, node_id: u64, zone: usize) {
        self.joiners.push_back(Node { id: node_id, zone });
    }

    /// Applies one simultaneous preemption bulk. All victims are marked
    /// dead first (two-side detection sees the whole bulk), then each lost
    /// stage group either fails over to its shadow or breaks its pipeline.
    /// Detection reports land in the coordination store.
    pub fn apply_preemption_bulk(&mut self, victims: &[u64]) -> BulkReport {
        let victim_set: BTreeSet<u64> = victims.iter().copied().collect();
        let mut report = BulkReport {
            recovered: Vec::new(),
            broken_pipelines: Vec::new(),
            idle_losses: 0,
        };

        let before = self.standby.len() + self.joiners.len();
        self.standby.retain(|s| !victim_set.contains(&s.node.id));
        self.joiners.retain(|n| !victim_set.contains(&n.id));
        report.idle_losses = before - (self.standby.len() + self.joiners.len());

        // Phase 1: clear every slot served by a victim, remembering the
        // lost stage groups. A merged node's death loses all its groups.
        let mut lost: Vec<(usize, usize)> = Vec::new(); // (pipeline, group start)
        let mut active_victims: BTreeSet<u64> = BTreeSet::new();
        for (pi, pipeline) in self.pipelines.iter_mut().enumerate() {
            for group_start in (0..self.depth).step_by(self.gpus_per_node) {
                let Some(node) = pipeline.serving[group_start] else {
                    continue;
                };
                if victim_set.contains(&node.id) {
                    for s in group_start..group_start + self.gpus_per_node {
                        pipeline.serving[s] = None;
                    }
                    lost.push((pi, group_start));
                    active_victims.insert(node.id);
                }
            }
        }
        self.failures_since_reconfig += active_victims.len();

        // Phase 2: decide recovery per lost group against the cleared
        // snapshot, so one merge cannot vouch for the next victim over
        // (the replica died with its holder). A pipeline with any
        // unrecoverable group skips in-place recovery entirely and waits
        // for reconfiguration. Both surviving neighbors file a report; the
        // reconciled entry identifies the victim.
        let snapshot: Vec<Vec<Option<Node>>> = self
            .pipelines
            .iter()
            .map(|p| p.serving.clone())
            .collect();
        let mut merges: Vec<(usize, usize, Node)> = Vec::new();
        for &(pi, group_start) in &lost {
            let prev = (group_start + self.depth - 1) % self.depth;
            let next = (group_start + self.gpus_per_node) % self.depth;
            let shadow = snapshot[pi][prev];
            let successor = snapshot[pi][next];
            let mut reporters: Vec<u64> = [shadow, successor]
                .iter()
                .flatten()
                .map(|n| n.id)
                .collect();
            reporters.dedup();
            self.store.put(
                format!("failure/{pi}/{group_start}"),
                format!("reporters={reporters:?}"),
            );
            match shadow {
                Some(shadow) => merges.push((pi, group_start, shadow)),
                None => {
                    self.pipelines[pi].broken = true;
                    if !report.broken_pipelines.contains(&pi) {
                        report.broken_pipelines.push(pi);
                    }
                }
            }
        }
        for (pi, group_start, shadow) in merges {
            if self.pipelines[pi].broken {
                continue;
            }
            for s in group_start..group_start + self.gpus_per_node {
                self.pipelines[pi].serving[s] = Some(shadow);
            }
            report.recovered.push((pi, group_start, shadow.id));
        }
        report
    }

    /// Where a node currently serves: (pipeline, group start).
    pub fn locate(&self, id: u64) -> Option<(usize, usize)> {
        for (pi, p) in self.pipelines.iter().enumerate() {
            for gs in (0..self.depth).step_by(self.gpus_per_node) {
                if p.serving[gs].map(|n| n.id) == Some(id) {
                    return Some((pi, gs));
                }
            }
        }
        None
    }

    /// Removes victims from every slot and spare queue without attempting
    /// recovery. Strategies without layer replicas leave the holes open
    /// until a joiner refills them. Returns the count of cleared groups.
    pub fn mark_dead(&mut self, victims: &[u64]) -> usize {
        let victim_set: BTreeSet<u64> = victims.iter().copied().collect();
        self.standby.retain(|s| !victim_set.contains(&s.node.id));
        self.joiners.retain(|n| !victim_set.contains(&n.id));
        let g = self.gpus_per_node;
        let mut cleared = 0;
        for pipeline in &mut self.pipelines {
            for gs in (0..self.depth).step_by(g) {
                if let Some(n) = pipeline.serving[gs] {
                    if victim_set.contains(&n.id) {
                        for s in gs..gs + g {
                            pipeline.serving[s] = None;
                        }
                        cleared += 1;
                    }
                }
            }
        }
        cleared
    }

    /// Moves joiners into empty stage slots in order, with no byte
    /// accounting (baseline strategies reload state off the critical
    /// path). Returns the count of filled groups.
    pub fn fill_holes_from_joiners(&mut self) -> usize {
        let g = self.gpus_per_node;
        let mut filled = 0;
        for pipeline in &mut self.pipelines {
            for gs in (0..self.depth).step_by(g) {
                if pipeline.serving[gs].is_none() {
                    let Some(node) = self.joiners.pop_front() else {
                        return filled;
                    };
                    for s in gs..gs + g {
                        pipeline.serving[s] = Some(node);
                    }
                    filled += 1;
                }
            }
        }
        filled
    }

    /// Whether the cluster should reshape now. Immediate on an
    /// unrecoverable hole; at a step boundary also when a full pipeline's
    /// worth of spares has gathered, or when one more preemption could end
    /// the run.
    pub fn should_reconfigure(&self, at_step_end: bool) -> Option<&'static str> {
        if self.pipelines.iter().any(|p| p.broken) {
            return Some("unrecoverable stage");
        }
        if !at_step_end {
            return None;
        }
        if (self.joiners.len() + self.standby.len()) * self.gpus_per_node >= self.depth {
            return Some("spares for a full pipeline");
        }
        // One more preemption would be fatal: some node's death cannot be
        // recovered (it already serves a merged pair, so its own replica
        // holder is itself) and would drop the fleet below one pipeline.
        let merged_exists = self
            .pipelines
            .iter()
            .any(|p| !p.merged_stages().is_empty());
        if merged_exists && self.total_live().saturating_sub(1) * self.gpus_per_node < self.depth {
            return Some("next preemption could be fatal");
        }
        None
    }

    /// Reshapes the cluster: fills holes from joiners and standby, shrinks
    /// the pipeline count when nodes run short, grows it when spares allow,
    /// and resets the failure counter. Byte accounting charges stage plus
    /// replica weights for every slot whose new node did not already hold
    /// that stage. The first surviving node publishes the decision.
    pub fn reconfigure(
        &mut self,
        partition: &StagePartition,
        params: &ResilienceParams,
        bytes_per_sec: f64,
    ) -> ReconfigureReport {
        if self.is_fatal() {
            return ReconfigureReport {
                pause_s: 0.0,
                bytes_moved: 0,
                new_pipelines: self.pipelines.len(),
                fatal: true,
            };
        }
        let g = self.gpus_per_node;
        let group_bytes = |group_start: usize| -> u64 {
            // Stage weights plus the replica of the successor group.
            let own: u64 = (group_start..group_start + g)
                .map(|s| partition.stages[s].weight_bytes)
                .sum();
            let succ_start = (group_start + g) % self.depth;
            let replica: u64 = (succ_start..succ_start + g)
                .map(|s| partition.stages[s].weight_bytes)
                .sum();
            own + replica
        };

        let decider = self
            .active_nodes()
            .iter()
            .map(|n| n.id)
            .chain(self.standby.iter().map(|s| s.node.id))
            .chain(self.joiners.iter().map(|n| n.id))
            .min()
            .expect("non-fatal cluster has nodes");
        self.store
            .put("reconfigure/decision", format!("leader={decider}"));

        let mut bytes_moved = 0u64;
        let mut spares: VecDeque<Spare> = VecDeque::new();
        for node in std::mem::take(&mut self.joiners) {
            spares.push_back(Spare { node, old_stage: None });
        }
        // Standby nodes line up behind joiners: joiners are the freshly
        // gained capacity reconfiguration exists to absorb.
        let mut old_standby = std::mem::take(&mut self.standby);
        while let Some(s) = old_standby.pop_front() {
            spares.push_back(s);
        }

        // Un-merge: a node serving several groups keeps only its home group
        // and hands the adopted ones back as holes; the failover schedule
        // ends with reconfiguration.
        for pipeline in &mut self.pipelines {
            for gs in pipeline.adopted_groups() {
                for s in gs..gs + g {
                    pipeline.serving[s] = None;
                }
            }
        }

        // Count holes; dissolve trailing pipelines until spares cover them.
        loop {
            let holes: usize = self
                .pipelines
                .iter()
                .map(|p| {
                    (0..self.depth)
                        .step_by(g)
                        .filter(|&s| p.serving[s].is_none())
                        .count()
                })
                .sum();
            if holes <= spares.len() || self.pipelines.is_empty() {
                break;
            }
            // Prefer dissolving a broken pipeline; otherwise the last one.
            let idx = self
                .pipelines
                .iter()
                .rposition(|p| p.broken)
                .unwrap_or(self.pipelines.len() - 1);
            let dissolved = self.pipelines.remove(idx);
            for group_start in (0..self.depth).step_by(g) {
                if let Some(node) = dissolved.serving[group_start] {
                    spares.push_back(Spare {
                        node,
                        old_stage: Some(group_start),
                    });
                }
            }
        }

        // Fill holes: first with spares that already hold the stage, then
        // with anything.
        for pipeline in &mut self.pipelines {
            pipeline.broken = false;
            for group_start in (0..self.depth).step_by(g) {
                if pipeline.serving[group_start].is_some() {
                    continue;
                }
                let matching = spares
                    .iter()
                    .position(|s| s.old_stage == Some(group_start));
                let spare = match matching {
                    Some(i) => spares.remove(i).expect("index valid"),
                    None => {
                        bytes_moved += group_bytes(group_start);
                        spares.pop_front().expect("holes <= spares")
                    }
                };
                for s in group_start..group_start + g {
                    pipeline.serving[s] = Some(spare.node);
                }
            }
        }

        // Grow while a full pipeline's worth of spares remains.
        let slots = self.depth / g;
        while spares.len() >= slots {
            let mut serving = Vec::with_capacity(self.depth);
            for group_start in (0..self.depth).step_by(g) {
                let matching = spares
                    .iter()
                    .position(|s| s.old_stage == Some(group_start));
                let spare = match matching {
                    Some(i) => spares.remove(i).expect("index valid"),
                    None => {
                        bytes_moved += group_bytes(group_start);
                        spares.pop_front().expect("len checked")
                    }
                };
                for _ in 0..g {
                    serving.push(Some(spare.node));
                }
            }
            self.pipelines.push(Pipeline {
                serving,
                gpus_per_node: g,
                broken: false,
            });
        }

        self.standby = spares;
        self.failures_since_reconfig = 0;
        ReconfigureReport {
            pause_s: params.reconfigure_base_s + bytes_moved as f64 / bytes_per_sec,
            bytes_moved,
            new_pipelines: self.pipelines.len(),
            fatal: false,
        }
    }
}

/// Recovers a single active victim in place: fail over to the shadow when
/// its replica survived, reconfigure otherwise. Preempting a node that is
/// not serving a stage is an error here; bulk churn handling tolerates
/// standby losses via [`ClusterState::apply_preemption_bulk`].
#[allow(clippy::too_many_arguments)]
pub fn handle_preemption(
    state: &mut ClusterState,
    victim: u64,
    rc_mode: RcMode,
    partition: &StagePartition,
    microbatches: u32,
    params: &ResilienceParams,
    engine: &EngineParams,
    bytes_per_sec: f64,
) -> Result<RecoveryOutcome> {
    let Some((_, group_start)) = state.locate(victim) else {
        return Err(Error::InvalidVictim(victim));
    };
    let report = state.apply_preemption_bulk(&[victim]);
    if !report.needs_reconfigure() {
        let pause_s = rc_pause_s(
            rc_mode,
            partition,
            group_start,
            microbatches,
            state.gpus_per_node,
            params,
            engine,
        );
        return Ok(RecoveryOutcome {
            kind: RecoveryKind::RcRecovered { pause_s },
            rerouted: true,
        });
    }
    let rep = state.reconfigure(partition, params, bytes_per_sec);
    if rep.fatal {
        return Ok(RecoveryOutcome {
            kind: RecoveryKind::FatalRestart { lost_samples: 0 },
            rerouted: false,
        });
    }
    Ok(RecoveryOutcome {
        kind: RecoveryKind::Reconfigured {
            pause_s: rep.pause_s,
            new_pipelines: rep.new_pipelines,
            new_depth: state.depth,
        },
        rerouted: false,
    })
}

/// Pause for recovering one victim stage group through its replica:
/// detection, rerouting, and the catch-up cost of the chosen mode. Eager
/// backward needs no catch-up; eager forward swaps its saved intermediates
/// back in and runs the missed backwards; lazy forward must first
/// recompute the forwards as well. Catch-up covers the victim's in-flight
/// microbatches.
pub fn rc_pause_s(
    rc_mode: RcMode,
    partition: &StagePartition,
    victim_stage: usize,
    microbatches: u32,
    gpus_per_node: usize,
    res: &ResilienceParams,
    engine: &EngineParams,
) -> f64 {
    let base = res.detection_timeout_s + res.reroute_constant_s;
    let p = partition.depth();
    let group_start = victim_stage - victim_stage % gpus_per_node;
    let mut catch_up = 0.0;
    for s in group_start..group_start + gpus_per_node {
        let in_flight = microbatches.min((p - s) as u32) as f64;
        let cost = &partition.stages[s];
        let per_mb = match rc_mode {
            RcMode::None | RcMode::Efeb => 0.0,
            RcMode::Eflb => {
                cost.activation_bytes as f64 / engine.swap_bandwidth_bytes_per_sec
                    + cost.backward.as_secs_f64()
            }
            RcMode::Lflb => cost.forward.as_secs_f64() + cost.backward.as_secs_f64(),
        };
        catch_up += in_flight * per_mb;
    }
    base + catch_up
}

/// Samples lost in one optimizer step when only `complete` of `pipelines`
/// pipelines contribute.
pub fn sample_drop_step(complete: usize, pipelines: usize, global_batch: u64) -> u64 {
    let down = pipelines.saturating_sub(complete) as u64;
    down * global_batch / pipelines as u64
}

/// Pure data-parallel iteration time (no model partitioning): every node
/// runs the whole model over its shard, then all-reduces full gradients.
/// Redundancy doubles the per-node batch; the GPU absorbs part of that
/// below its saturation point, so the default calibration makes a doubled
/// reference batch cost 1.5x, not 2x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataParallelParams {
    /// Time multiplier observed when the reference per-node batch doubles.
    pub overbatch_time_multiplier: f64,
    /// Cluster size at which the per-node reference batch is measured.
    pub reference_nodes: usize,
}

impl Default for DataParallelParams {
    fn default() -> Self {
        DataParallelParams {
            overbatch_time_multiplier: 1.5,
            reference_nodes: 32,
        }
    }
}

pub fn dp_iteration_time_s(
    profile: &crate::profile::ModelProfile,
    nodes: usize,
    rc_enabled: bool,
    dp: &DataParallelParams,
    comm: &crate::profile::CommModel,
    engine: &EngineParams,
) -> f64 {
    let model_time: f64 = profile
        .layers
        .iter()
        .map(|l| l.forward.as_secs_f64() + l.backward.as_secs_f64())
        .sum();
    let weight_bytes: u64 = profile.layers.iter().map(|l| l.weight_bytes).sum();
    let batch_ref = profile.samples_per_iteration as f64 / dp.reference_nodes as f64;
    // Saturation batch: the point past which time grows linearly, placed so
    // a doubled reference batch costs exactly the observed multiplier.
    let batch_sat = 2.0 * batch_ref / dp.overbatch_time_multiplier;
    let batch_node = profile.samples_per_iteration as f64 / nodes as f64;
    let effective = if rc_enabled { 2.0 * batch_node } else { batch_node };
    let compute = model_time * (effective / batch_sat).max(1.0);
    let allreduce = if nodes >= 2 {
        engine.allreduce_ring_factor * weight_bytes as f64 / comm.intra_zone_bytes_per_sec
    } else {
        0.0
    };
    compute + allreduce
}
