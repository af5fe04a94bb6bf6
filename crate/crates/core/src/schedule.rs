//! Pipeline instruction schedules.
//!
//! A [`Schedule`] holds one instruction stream per stage plus the data
//! dependencies between instructions. Streams are constructed so that any
//! two adjacent stages issue their shared communication operations in the
//! same order, which keeps rendezvous-style sends and receives deadlock
//! free.
//!
//! [`plan_frc`] augments a schedule with redundant computation: eager
//! forward duplicates placed in the pre-send bubble slot, optional swap-out
//! of their intermediates, and (for fully eager plans) backward duplicates
//! with the extra gradient traffic they require.
//!
//! [`merge_failover`] combines a preempted stage's stream with its
//! predecessor's so that a single node can serve both stages.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// Redundant-computation mode for a schedule.
///
/// * `None`: no redundancy.
/// * `Eflb`: eager forward duplicates, backward duplicates deferred to
///   recovery time; forward intermediates are swapped to CPU memory.
/// * `Efeb`: both duplicates eager; costs extra gradient traffic.
/// * `Lflb`: both deferred; only replica weights are kept resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RcMode {
    None,
    Eflb,
    Efeb,
    Lflb,
}

impl RcMode {
    /// Whether this mode keeps a stage replica (weights) on the predecessor.
    pub fn keeps_replica(self) -> bool {
        self != RcMode::None
    }
}

impl fmt::Display for RcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RcMode::None => "none",
            RcMode::Eflb => "eflb",
            RcMode::Efeb => "efeb",
            RcMode::Lflb => "lflb",
        };
        f.write_str(s)
    }
}

/// Who an instruction computes for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    /// The stage's own work.
    Normal,
    /// Work performed on behalf of stage `n` (this node holds its replica).
    RedundantFor(usize),
}

/// One operation in a stage's instruction stream. `mb` is a microbatch
/// index, `peer` the other endpoint's stage for communication operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstrKind {
    Forward { mb: u32 },
    Backward { mb: u32 },
    FrcForward { mb: u32 },
    BrcBackward { mb: u32 },
    SendActivation { mb: u32, peer: usize },
    RecvActivation { mb: u32, peer: usize },
    SendGradient { mb: u32, peer: usize },
    RecvGradient { mb: u32, peer: usize },
    AllReduce,
    ApplyGradient,
    SwapOut { mb: u32 },
    SwapIn { mb: u32 },
}

impl InstrKind {
    pub fn mb(&self) -> Option<u32> {
        match *self {
            InstrKind::Forward { mb }
            | InstrKind::Backward { mb }
            | InstrKind::FrcForward { mb }
            | InstrKind::BrcBackward { mb }
            | InstrKind::SendActivation { mb, .. }
            | InstrKind::RecvActivation { mb, .. }
            | InstrKind::SendGradient { mb, .. }
            | InstrKind::RecvGradient { mb, .. }
            | InstrKind::SwapOut { mb }
            | InstrKind::SwapIn { mb } => Some(mb),
            InstrKind::AllReduce | InstrKind::ApplyGradient => None,
        }
    }

    pub fn peer(&self) -> Option<usize> {
        match *self {
            InstrKind::SendActivation { peer, .. }
            | InstrKind::RecvActivation { peer, .. }
            | InstrKind::SendGradient { peer, .. }
            | InstrKind::RecvGradient { peer, .. } => Some(peer),
            _ => None,
        }
    }

    /// Point-to-point communication (excludes the collective).
    pub fn is_p2p(&self) -> bool {
        matches!(
            self,
            InstrKind::SendActivation { .. }
                | InstrKind::RecvActivation { .. }
                | InstrKind::SendGradient { .. }
                | InstrKind::RecvGradient { .. }
        )
    }

    /// Communication in the grouping sense: p2p plus the collective.
    pub fn is_comm(&self) -> bool {
        self.is_p2p() || matches!(self, InstrKind::AllReduce)
    }

    pub fn is_send(&self) -> bool {
        matches!(
            self,
            InstrKind::SendActivation { .. } | InstrKind::SendGradient { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            InstrKind::Forward { .. } => "forward",
            InstrKind::Backward { .. } => "backward",
            InstrKind::FrcForward { .. } => "frc_forward",
            InstrKind::BrcBackward { .. } => "brc_backward",
            InstrKind::SendActivation { .. } => "send_activation",
            InstrKind::RecvActivation { .. } => "recv_activation",
            InstrKind::SendGradient { .. } => "send_gradient",
            InstrKind::RecvGradient { .. } => "recv_gradient",
            InstrKind::AllReduce => "all_reduce",
            InstrKind::ApplyGradient => "apply_gradient",
            InstrKind::SwapOut { .. } => "swap_out",
            InstrKind::SwapIn { .. } => "swap_in",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub stage: usize,
    pub kind: InstrKind,
    pub owner: Owner,
}

impl Instruction {
    fn normal(stage: usize, kind: InstrKind) -> Self {
        Instruction {
            stage,
            kind,
            owner: Owner::Normal,
        }
    }
}

/// Position of an instruction inside a [`Schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstrRef {
    pub stage: usize,
    pub index: usize,
}

/// Dependency classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepKind {
    /// Producer and consumer live on the same stage.
    Local,
    /// A send/recv pair crossing stages.
    Message,
    /// Backward's use of its forward's saved state. Its absence at recovery
    /// time is what forces rematerialization, so it is tracked separately.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepEdge {
    pub from: InstrRef,
    pub to: InstrRef,
    pub kind: DepKind,
}

/// Compute-order family of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    OneFOneB,
    GPipe,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub depth: usize,
    pub microbatches: u32,
    pub rc_mode: RcMode,
    /// One ordered instruction stream per stage.
    pub stages: Vec<Vec<Instruction>>,
    pub deps: Vec<DepEdge>,
}

impl Schedule {
    pub fn instruction(&self, r: InstrRef) -> &Instruction {
        &self.stages[r.stage][r.index]
    }

    /// Warm-up forward count at a stage before backwards interleave.
    pub fn warmup(depth: usize, microbatches: u32, stage: usize) -> u32 {
        microbatches.min((depth - stage) as u32)
    }

    /// Text dump, one instruction per line: stage, ordinal within the
    /// stage's stream, kind, microbatch, peer. Missing fields print as `-`.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for (stage, stream) in self.stages.iter().enumerate() {
            for (ordinal, instr) in stream.iter().enumerate() {
                let mb = instr
                    .kind
                    .mb()
                    .map_or_else(|| "-".to_string(), |m| m.to_string());
                let peer = instr
                    .kind
                    .peer()
                    .map_or_else(|| "-".to_string(), |p| p.to_string());
                out.push_str(&format!(
                    "{stage}\t{ordinal}\t{}\t{mb}\t{peer}\n",
                    instr.kind.name()
                ));
            }
        }
        out
    }
}

fn check_geometry(depth: usize, microbatches: u32) -> Result<()> {
    if depth == 0 {
        return Err(Error::InvalidSchedule("pipeline depth must be >= 1".into()));
    }
    if microbatches == 0 {
        return Err(Error::InvalidSchedule("microbatch count must be >= 1".into()));
    }
    Ok(())
}

/// Builds the 1F1B schedule: stage `s` runs `min(M, P - s)` warm-up
/// forwards, then alternates one backward with one forward until forwards
/// are exhausted, then drains the remaining backwards. The last stage
/// alternates from the first microbatch.
pub fn generate_1f1b(depth: usize, microbatches: u32) -> Result<Schedule> {
    check_geometry(depth, microbatches)?;
    let p = depth;
    let m = microbatches;
    let mut stages = Vec::with_capacity(p);

    for s in 0..p {
        let w = Schedule::warmup(p, m, s);
        let mut stream = Vec::new();
        let is_first = s == 0;
        let is_last = s == p - 1;

        for mb in 0..w {
            if !is_first {
                stream.push(Instruction::normal(s, InstrKind::RecvActivation { mb, peer: s - 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Forward { mb }));
            if !is_last {
                stream.push(Instruction::normal(s, InstrKind::SendActivation { mb, peer: s + 1 }));
            }
        }
        // Steady phase: backward k, then forward w + k. Receives for the
        // next forward are posted before the gradient send so that both
        // ends of every edge agree on the comm order.
        for k in 0..m.saturating_sub(w) {
            if !is_last {
                stream.push(Instruction::normal(s, InstrKind::RecvGradient { mb: k, peer: s + 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Backward { mb: k }));
            let next_fwd = w + k;
            if !is_first {
                stream.push(Instruction::normal(
                    s,
                    InstrKind::RecvActivation { mb: next_fwd, peer: s - 1 },
                ));
            }
            if !is_first {
                stream.push(Instruction::normal(s, InstrKind::SendGradient { mb: k, peer: s - 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Forward { mb: next_fwd }));
            if !is_last {
                stream.push(Instruction::normal(
                    s,
                    InstrKind::SendActivation { mb: next_fwd, peer: s + 1 },
                ));
            }
        }
        // Drain remaining backwards.
        for mb in m.saturating_sub(w)..m {
            if !is_last {
                stream.push(Instruction::normal(s, InstrKind::RecvGradient { mb, peer: s + 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Backward { mb }));
            if !is_first {
                stream.push(Instruction::normal(s, InstrKind::SendGradient { mb, peer: s - 1 }));
            }
        }
        stream.push(Instruction::normal(s, InstrKind::AllReduce));
        stream.push(Instruction::normal(s, InstrKind::ApplyGradient));
        stages.push(stream);
    }

    let mut schedule = Schedule {
        kind: ScheduleKind::OneFOneB,
        depth: p,
        microbatches: m,
        rc_mode: RcMode::None,
        stages,
        deps: Vec::new(),
    };
    schedule.deps = build_deps(&schedule)?;
    Ok(schedule)
}

/// Builds the GPipe schedule: all forwards, then all backwards.
pub fn generate_gpipe(depth: usize, microbatches: u32) -> Result<Schedule> {
    check_geometry(depth, microbatches)?;
    let p = depth;
    let m = microbatches;
    let mut stages = Vec::with_capacity(p);

    for s in 0..p {
        let mut stream = Vec::new();
        for mb in 0..m {
            if s > 0 {
                stream.push(Instruction::normal(s, InstrKind::RecvActivation { mb, peer: s - 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Forward { mb }));
            if s < p - 1 {
                stream.push(Instruction::normal(s, InstrKind::SendActivation { mb, peer: s + 1 }));
            }
        }
        for mb in 0..m {
            if s < p - 1 {
                stream.push(Instruction::normal(s, InstrKind::RecvGradient { mb, peer: s + 1 }));
            }
            stream.push(Instruction::normal(s, InstrKind::Backward { mb }));
            if s > 0 {
                stream.push(Instruction::normal(s, InstrKind::SendGradient { mb, peer: s - 1 }));
            }
        }
        stream.push(Instruction::normal(s, InstrKind::AllReduce));
        stream.push(Instruction::normal(s, InstrKind::ApplyGradient));
        stages.push(stream);
    }

    let mut schedule = Schedule {
        kind: ScheduleKind::GPipe,
        depth: p,
        microbatches: m,
        rc_mode: RcMode::None,
        stages,
        deps: Vec::new(),
    };
    schedule.deps = build_deps(&schedule)?;
    Ok(schedule)
}

/// Replica placement: the node serving stage `s` holds the replica of the
/// next stage, wrapping the first stage onto the last node.
pub fn replica_target(stage: usize, depth: usize) -> usize {
    (stage + 1) % depth
}

/// Source stage of the gradient a backward duplicate for `replica` needs:
/// the stage after the replica, whose backward produces that gradient.
/// `None` when the gradient is derivable locally (the replica is the last
/// stage, whose loss gradient comes from the duplicate's own forward
/// output) or when the pipeline is too short for a third party.
fn brc_gradient_source(stage: usize, depth: usize) -> Option<usize> {
    let replica = replica_target(stage, depth);
    if replica == depth - 1 {
        return None;
    }
    let source = (stage + 2) % depth;
    if source == stage {
        return None;
    }
    Some(source)
}

/// True when the stage's backward duplicate consumes the stage's own
/// backward output (two-stage pipelines, where the stage after the replica
/// is the stage itself).
fn brc_self_source(stage: usize, depth: usize) -> bool {
    (stage + 2) % depth == stage && replica_target(stage, depth) != depth - 1
}

/// Inserts redundant-computation instructions into a schedule.
///
/// Forward duplicates (`FrcForward`) are placed immediately after the
/// stage's own forward, which is immediately before its send barrier: the
/// slot where the pipeline bubble sits. In `Eflb` each duplicate's
/// intermediates are swapped out to CPU memory right away.
///
/// In `Efeb` backward duplicates (`BrcBackward`) pull the gradient they
/// need from the stage after the replica via an extra send/recv pair.
/// Replica-maintenance messages are buffered (the sender never waits on the
/// receiver), unlike the rendezvous-style normal traffic. Placement:
///
/// * interior stages receive that gradient from downstream, where the
///   producing backward runs earlier, so the pair sits right before the
///   stage's own backward for the same microbatch;
/// * the stage holding the last stage's replica derives the loss gradient
///   from its duplicate forward's own output, with no extra message;
/// * the last stage (holding the wrapped first-stage replica) receives
///   from stage 1, whose backward for microbatch `m` runs `P - 2` pipeline
///   cycles after the last stage's own, so its pairs lag by that offset and
///   the leftovers drain before the reduction. Posting them undelayed would
///   close a dependency cycle through the whole backward sweep.
pub fn plan_frc(schedule: &Schedule, rc_mode: RcMode) -> Result<Schedule> {
    if schedule.rc_mode != RcMode::None {
        return Err(Error::InvalidSchedule(
            "schedule already carries redundant computation".into(),
        ));
    }
    if rc_mode == RcMode::None {
        return Ok(schedule.clone());
    }
    if schedule.kind != ScheduleKind::OneFOneB {
        return Err(Error::InvalidSchedule(
            "redundant computation is only planned over 1F1B schedules".into(),
        ));
    }
    let p = schedule.depth;
    if p < 2 {
        return Err(Error::InvalidSchedule(
            "redundant computation needs at least two stages".into(),
        ));
    }
    if rc_mode == RcMode::Lflb {
        // Lazy plans execute the plain schedule; replica weights are a
        // memory-accounting matter for the engine, not extra instructions.
        let mut out = schedule.clone();
        out.rc_mode = rc_mode;
        return Ok(out);
    }

    let m_total = schedule.microbatches;
    let mut stages = Vec::with_capacity(p);
    for (s, stream) in schedule.stages.iter().enumerate() {
        let replica = replica_target(s, p);
        let grad_source = brc_gradient_source(s, p);
        let wrapped = s == p - 1 && grad_source.is_some();
        let lag = if wrapped { (p - 2) as u32 } else { 0 };
        let mut next_brc: u32 = 0;
        let mut out = Vec::with_capacity(stream.len() * 2);

        let push_brc = |out: &mut Vec<Instruction>, mb: u32| {
            if let Some(source) = grad_source {
                out.push(Instruction {
                    stage: s,
                    kind: InstrKind::RecvGradient { mb, peer: source },
                    owner: Owner::RedundantFor(replica),
                });
            }
            out.push(Instruction {
                stage: s,
                kind: InstrKind::BrcBackward { mb },
                owner: Owner::RedundantFor(replica),
            });
        };

        for instr in stream {
            let own_backward_entry = match instr.kind {
                InstrKind::RecvGradient { mb, peer } if peer == s + 1 => Some(mb),
                InstrKind::Backward { mb } if s == p - 1 => Some(mb),
                _ => None,
            };
            if rc_mode == RcMode::Efeb && !brc_self_source(s, p) {
                if let Some(mb) = own_backward_entry {
                    if mb >= lag && next_brc <= mb - lag {
                        push_brc(&mut out, mb - lag);
                        next_brc = mb - lag + 1;
                    }
                }
                if matches!(instr.kind, InstrKind::AllReduce) {
                    while next_brc < m_total {
                        push_brc(&mut out, next_brc);
                        next_brc += 1;
                    }
                }
            }
            out.push(*instr);
            match instr.kind {
                InstrKind::Forward { mb } => {
                    out.push(Instruction {
                        stage: s,
                        kind: InstrKind::FrcForward { mb },
                        owner: Owner::RedundantFor(replica),
                    });
                    if rc_mode == RcMode::Eflb {
                        out.push(Instruction {
                            stage: s,
                            kind: InstrKind::SwapOut { mb },
                            owner: Owner::RedundantFor(replica),
                        });
                    }
                }
                InstrKind::Backward { mb }
                    if rc_mode == RcMode::Efeb && brc_self_source(s, p) =>
                {
                    // Two-stage pipeline: the gradient the duplicate needs
                    // is the stage's own backward output.
                    out.push(Instruction {
                        stage: s,
                        kind: InstrKind::BrcBackward { mb },
                        owner: Owner::RedundantFor(replica),
                    });
                }
                InstrKind::SendGradient { mb, peer: _ }
                    if rc_mode == RcMode::Efeb && instr.owner == Owner::Normal =>
                {
                    // This stage's backward output also feeds the backward
                    // duplicate two stages upstream (wrapping), if any.
                    let consumer = (s + p - 2) % p;
                    if brc_gradient_source(consumer, p) == Some(s) {
                        out.push(Instruction {
                            stage: s,
                            kind: InstrKind::SendGradient { mb, peer: consumer },
                            owner: Owner::RedundantFor(replica_target(consumer, p)),
                        });
                    }
                }
                _ => {}
            }
        }
        stages.push(out);
    }

    let mut out = Schedule {
        kind: schedule.kind,
        depth: p,
        microbatches: schedule.microbatches,
        rc_mode,
        stages,
        deps: Vec::new(),
    };
    out.deps = build_deps(&out)?;
    Ok(out)
}

/// Key identifying one point-to-point message within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MessageKey {
    activation: bool,
    mb: u32,
    from: usize,
    to: usize,
}

fn message_key(instr: &Instruction) -> Option<MessageKey> {
    match instr.kind {
        InstrKind::SendActivation { mb, peer } => Some(MessageKey {
            activation: true,
            mb,
            from: instr.stage,
            to: peer,
        }),
        InstrKind::RecvActivation { mb, peer } => Some(MessageKey {
            activation: true,
            mb,
            from: peer,
            to: instr.stage,
        }),
        InstrKind::SendGradient { mb, peer } => Some(MessageKey {
            activation: false,
            mb,
            from: instr.stage,
            to: peer,
        }),
        InstrKind::RecvGradient { mb, peer } => Some(MessageKey {
            activation: false,
            mb,
            from: peer,
            to: instr.stage,
        }),
        _ => None,
    }
}

/// Rebuilds the dependency edge list for a schedule from scratch.
fn build_deps(schedule: &Schedule) -> Result<Vec<DepEdge>> {
    let mut edges = Vec::new();
    // (stage, discriminating key) -> ref for local lookups
    let mut computes: HashMap<(usize, &'static str, u32), InstrRef> = HashMap::new();
    let mut sends: HashMap<MessageKey, InstrRef> = HashMap::new();
    let mut recvs: HashMap<MessageKey, InstrRef> = HashMap::new();

    for (s, stream) in schedule.stages.iter().enumerate() {
        for (i, instr) in stream.iter().enumerate() {
            let r = InstrRef { stage: s, index: i };
            match instr.kind {
                InstrKind::Forward { mb }
                | InstrKind::Backward { mb }
                | InstrKind::FrcForward { mb }
                | InstrKind::BrcBackward { mb }
                | InstrKind::SwapOut { mb }
                | InstrKind::SwapIn { mb } => {
                    computes.insert((s, instr.kind.name(), mb), r);
                }
                InstrKind::AllReduce | InstrKind::ApplyGradient => {
                    computes.insert((s, instr.kind.name(), 0), r);
                }
                _ => {}
            }
            if let Some(key) = message_key(instr) {
                if instr.kind.is_send() {
                    if sends.insert(key, r).is_some() {
                        return Err(Error::InvalidSchedule(format!(
                            "duplicate send for message {key:?}"
                        )));
                    }
                } else if recvs.insert(key, r).is_some() {
                    return Err(Error::InvalidSchedule(format!(
                        "duplicate recv for message {key:?}"
                    )));
                }
            }
        }
    }

    let find = |stage: usize, name: &'static str, mb: u32| computes.get(&(stage, name, mb)).copied();

    for (key, send) in &sends {
        let recv = recvs.get(key).ok_or_else(|| {
            Error::InvalidSchedule(format!("send without matching recv: {key:?}"))
        })?;
        edges.push(DepEdge {
            from: *send,
            to: *recv,
            kind: DepKind::Message,
        });
    }
    for (key, recv) in &recvs {
        if !sends.contains_key(key) {
            return Err(Error::InvalidSchedule(format!(
                "recv without matching send: {key:?}"
            )));
        }
        let _ = recv;
    }

    let p = schedule.depth;
    for (s, stream) in schedule.stages.iter().enumerate() {
        for (i, instr) in stream.iter().enumerate() {
            let r = InstrRef { stage: s, index: i };
            let mut local = |from: Option<InstrRef>, kind: DepKind| {
                if let Some(f) = from {
                    edges.push(DepEdge { from: f, to: r, kind });
                }
            };
            match instr.kind {
                InstrKind::Forward { mb } => {
                    if s > 0 {
                        let key = MessageKey { activation: true, mb, from: s - 1, to: s };
                        local(recvs.get(&key).copied(), DepKind::Local);
                    }
                }
                InstrKind::SendActivation { mb, .. } => {
                    local(find(s, "forward", mb), DepKind::Local);
                }
                InstrKind::Backward { mb } => {
                    if s < p - 1 {
                        let key = MessageKey { activation: false, mb, from: s + 1, to: s };
                        local(recvs.get(&key).copied(), DepKind::Local);
                    }
                    local(find(s, "forward", mb), DepKind::Soft);
                }
                InstrKind::SendGradient { mb, peer } => {
                    let _ = peer;
                    local(find(s, "backward", mb), DepKind::Local);
                }
                InstrKind::FrcForward { mb } => {
                    // The duplicate reads the same input the replica stage
                    // would: this stage's forward output. The wrapped
                    // first-stage replica reads raw samples instead.
                    if replica_target(s, p) != 0 {
                        local(find(s, "forward", mb), DepKind::Local);
                    }
                }
                InstrKind::SwapOut { mb } => {
                    local(find(s, "frc_forward", mb), DepKind::Local);
                }
                InstrKind::BrcBackward { mb } => {
                    local(find(s, "frc_forward", mb), DepKind::Soft);
                    if let Some(source) = brc_gradient_source(s, p) {
                        let key = MessageKey { activation: false, mb, from: source, to: s };
                        local(recvs.get(&key).copied(), DepKind::Local);
                    } else if brc_self_source(s, p) {
                        local(find(s, "backward", mb), DepKind::Local);
                    }
                }
                InstrKind::AllReduce => {
                    for mb in 0..schedule.microbatches {
                        local(find(s, "backward", mb), DepKind::Local);
                    }
                }
                InstrKind::ApplyGradient => {
                    local(find(s, "all_reduce", 0), DepKind::Local);
                }
                _ => {}
            }
        }
    }
    Ok(edges)
}

/// Verifies that each pair of stages orders their shared rendezvous
/// operations identically; mismatched orders would deadlock a rendezvous
/// transport. Replica-maintenance messages are buffered, so they are
/// exempt.
pub fn check_edge_order_consistency(schedule: &Schedule) -> Result<()> {
    // For each unordered stage pair, the sequence of message keys as seen
    // from each side.
    let mut per_pair: HashMap<(usize, usize), [Vec<MessageKey>; 2]> = HashMap::new();
    for stream in &schedule.stages {
        for instr in stream {
            if instr.owner != Owner::Normal {
                continue;
            }
            if let Some(key) = message_key(instr) {
                let pair = (key.from.min(key.to), key.from.max(key.to));
                let side = usize::from(instr.stage != pair.0);
                per_pair.entry(pair).or_default()[side].push(key);
            }
        }
    }
    for (pair, [a, b]) in &per_pair {
        if a != b {
            return Err(Error::InvalidSchedule(format!(
                "stages {} and {} disagree on comm order",
                pair.0, pair.1
            )));
        }
    }
    Ok(())
}

/// Where a merged instruction originated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Victim,
    Shadow,
}

/// One instruction in a failover schedule. `local` marks former
/// victim<->shadow messages that collapsed into on-node handoffs; they cost
/// nothing but keep the data flow visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedOp {
    pub instr: Instruction,
    pub origin: Origin,
    pub local: bool,
}

/// The shadow node's combined program after adopting a victim's stage.
#[derive(Debug, Clone)]
pub struct FailoverSchedule {
    pub victim_stage: usize,
    pub shadow_stage: usize,
    pub ops: Vec<MergedOp>,
    /// Start index of each merged group within `ops`.
    pub group_starts: Vec<usize>,
    /// Peers that addressed the victim must now address the shadow.
    pub reroute_to_shadow: usize,
}

/// A stage stream split into (comm run, compute run) groups.
fn group_stream(stream: &[Instruction]) -> Vec<(Vec<Instruction>, Vec<Instruction>)> {
    let mut groups = Vec::new();
    let mut comms = Vec::new();
    let mut computes: Vec<Instruction> = Vec::new();
    for instr in stream {
        if instr.kind.is_comm() {
            if !computes.is_empty() {
                groups.push((std::mem::take(&mut comms), std::mem::take(&mut computes)));
            }
            comms.push(*instr);
        } else {
            computes.push(*instr);
        }
    }
    if !comms.is_empty() || !computes.is_empty() {
        groups.push((comms, computes));
    }
    groups
}

fn backward_class(kind: &InstrKind) -> bool {
    matches!(kind, InstrKind::Backward { .. } | InstrKind::BrcBackward { .. })
}

/// Merges a preempted stage's instruction stream into its predecessor's.
///
/// Groups are paired index-wise and combined under four rules: merged
/// communications run before merged computations; messages between the two
/// stages stop being network traffic (the victim-side halves stay as local
/// handoffs, the shadow-side halves disappear); the victim's surviving
/// communications run before the shadow's; and within a merged group every
/// backward runs before any forward, ascending by microbatch, so backward
/// memory is released before new forwards allocate.
pub fn merge_failover(
    victim: &[Instruction],
    shadow: &[Instruction],
    depth: usize,
) -> Result<FailoverSchedule> {
    // An empty victim stream is allowed (a fully drained victim); its stage
    // is then inferred from the shadow's.
    let (victim_stage, shadow_stage) = match (victim.first(), shadow.first()) {
        (Some(v), Some(s)) => (v.stage, s.stage),
        (None, Some(s)) => ((s.stage + 1) % depth, s.stage),
        _ => {
            return Err(Error::InvalidSchedule(
                "shadow stream must not be empty".into(),
            ))
        }
    };
    victim_stage_check(victim_stage, shadow_stage, depth)?;

    let vgroups = group_stream(victim);
    let sgroups = group_stream(shadow);
    let n = vgroups.len().max(sgroups.len());
    let empty: (Vec<Instruction>, Vec<Instruction>) = (Vec::new(), Vec::new());

    let mut ops = Vec::new();
    let mut group_starts = Vec::new();
    for i in 0..n {
        let (vc, vx) = vgroups.get(i).unwrap_or(&empty);
        let (sc, sx) = sgroups.get(i).unwrap_or(&empty);
        group_starts.push(ops.len());

        // Rule 3: victim's external comms first. Rule 2: victim-side
        // messages to the shadow become local handoffs; shadow-side
        // messages to the victim vanish outright.
        for instr in vc {
            let local = instr.kind.peer() == Some(shadow_stage);
            ops.push(MergedOp {
                instr: *instr,
                origin: Origin::Victim,
                local,
            });
        }
        for instr in sc {
            if instr.kind.peer() == Some(victim_stage) {
                continue;
            }
            ops.push(MergedOp {
                instr: *instr,
                origin: Origin::Shadow,
                local: false,
            });
        }

        // Rule 4: backwards before forwards, ascending microbatch. On equal
        // microbatch the victim's backward feeds the shadow's, and the
        // shadow's forward feeds the victim's.
        let mut computes: Vec<MergedOp> = vx
            .iter()
            .map(|i| MergedOp { instr: *i, origin: Origin::Victim, local: false })
            .chain(sx.iter().map(|i| MergedOp { instr: *i, origin: Origin::Shadow, local: false }))
            .collect();
        computes.sort_by_key(|op| {
            let backward = backward_class(&op.instr.kind);
            let mb = op.instr.kind.mb().unwrap_or(u32::MAX);
            let origin_rank = match (backward, op.origin) {
                (true, Origin::Victim) | (false, Origin::Shadow) => 0,
                (true, Origin::Shadow) | (false, Origin::Victim) => 1,
            };
            (u8::from(!backward), mb, origin_rank)
        });
        ops.extend(computes);
    }

    Ok(FailoverSchedule {
        victim_stage,
        shadow_stage,
        ops,
        group_starts,
        reroute_to_shadow: shadow_stage,
    })
}

fn victim_stage_check(victim_stage: usize, shadow_stage: usize, depth: usize) -> Result<()> {
    if depth < 2 {
        return Err(Error::InvalidSchedule(
            "failover merging needs at least two stages".into(),
        ));
    }
    if (shadow_stage + 1) % depth != victim_stage {
        return Err(Error::InvalidSchedule(format!(
            "stage {shadow_stage} does not hold the replica of stage {victim_stage}"
        )));
    }
    Ok(())
}
