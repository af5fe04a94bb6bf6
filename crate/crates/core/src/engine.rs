//! Deterministic executor for one training iteration.
//!
//! Each stage walks its instruction stream on a shared integer-nanosecond
//! timeline. Normal point-to-point messages are rendezvous operations: both
//! endpoints wait for each other, then the transfer occupies them for its
//! duration. Replica-maintenance messages (owner `RedundantFor`) are
//! buffered: the sender pays the transfer and moves on, the receiver waits
//! only until the data has landed.
//!
//! Forward duplicates do not execute inline. `FrcForward` enqueues the
//! successor stage's forward cost into a per-stage backlog which then
//! drains for free during any wait (the pipeline bubble) and, capped by
//! `frc_overlap_fraction`, alongside each normal forward (duplicates work
//! on the previous microbatch, so the two are independent). Whatever is
//! still queued when the stage reaches its reduction serializes as device
//! time. Backward duplicates (`BrcBackward`) always serialize; that cost is
//! the reason eager backward redundancy is expensive.

use crate::profile::{ClusterSpec, StagePartition};
use crate::schedule::{InstrKind, Owner, RcMode, Schedule};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

/// Tunables for the executor and the recovery-cost formulas built on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    /// GPU to CPU copy bandwidth for swap instructions, bytes per second.
    pub swap_bandwidth_bytes_per_sec: f64,
    /// Fraction of each normal forward during which queued forward
    /// duplicates may run concurrently (1.0 treats overlap as free).
    pub frc_overlap_fraction: f64,
    /// Fixed per-iteration fraction added for failover bookkeeping whenever
    /// redundant computation is enabled.
    pub rc_bookkeeping_fraction: f64,
    /// All-reduce cost multiplier: cost = factor x stage weight bytes /
    /// intra-zone rate (ring style).
    pub allreduce_ring_factor: f64,
    /// Number of data-parallel pipelines sharing the reduction; 1 means no
    /// reduction cost at all.
    pub data_parallel_width: u32,
    /// Record a start/end event per instruction (costly on large runs).
    #[serde(skip)]
    pub record_timeline: bool,
    /// Zone index per node; `None` places everything in one zone.
    #[serde(skip)]
    pub zone_assignment: Option<Vec<usize>>,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            swap_bandwidth_bytes_per_sec: 10.0 * (1u64 << 30) as f64,
            frc_overlap_fraction: 1.0,
            rc_bookkeeping_fraction: 0.07,
            allreduce_ring_factor: 2.0,
            data_parallel_width: 1,
            record_timeline: false,
            zone_assignment: None,
        }
    }
}

impl EngineParams {
    /// Defaults with the overlap fraction dialed down to what duplicate and
    /// normal kernels actually achieve when they contend for the same GPU.
    /// The optimistic 1.0 treats concurrent execution as free; measured
    /// interference leaves only about a tenth of each forward usable.
    pub fn calibrated() -> Self {
        EngineParams {
            frc_overlap_fraction: 0.1,
            ..EngineParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Start,
    End,
}

/// One timeline record; `time_ns` for `Start` is when the stage arrived at
/// the instruction, so waits show up inside communication instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEvent {
    pub time_ns: u64,
    pub node: usize,
    pub stage: usize,
    pub instruction: &'static str,
    pub mb: Option<u32>,
    pub phase: Phase,
}

/// How a stage's forward-duplicate backlog was paid for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrcBreakdown {
    /// Total duplicate work enqueued.
    pub queued: Duration,
    /// Ran inside waits (the bubble).
    pub absorbed: Duration,
    /// Ran alongside normal forwards.
    pub overlapped: Duration,
    /// Leftover that occupied the device before the reduction.
    pub serialized: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageBreakdown {
    /// Device time: own compute, backward duplicates, serialized residue.
    pub busy: Duration,
    /// Everything else up to the iteration end (waits and transfers).
    pub idle: Duration,
    /// Wait before steady-state activation sends; the bubble.
    pub send_wait_steady: Duration,
    pub steady_send_count: u32,
    pub frc: FrcBreakdown,
    pub peak_gpu_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub duration: Duration,
    pub stages: Vec<StageBreakdown>,
    /// Peak host memory per node (stages grouped by `gpus_per_node`).
    pub peak_cpu_bytes: Vec<u64>,
    /// Payload bytes carried per directed stage pair, counted once per
    /// message.
    pub link_bytes: BTreeMap<(usize, usize), u64>,
    pub timeline: Vec<TimelineEvent>,
}

impl IterationTrace {
    pub fn total_bytes(&self) -> u64 {
        self.link_bytes.values().sum()
    }

    /// Timeline dump: `time_ns,node,stage,instruction,phase` per line.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("time_ns,node,stage,instruction,phase\n");
        for ev in &self.timeline {
            let phase = match ev.phase {
                Phase::Start => "start",
                Phase::End => "end",
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                ev.time_ns, ev.node, ev.stage, ev.instruction, phase
            ));
        }
        out
    }
}

/// Mean idle time per steady-state cycle spent waiting at the stage's
/// activation send barrier. Warm-up and drain sends are excluded; stages
/// with no steady sends (the last stage, or tiny microbatch counts) report
/// zero.
pub fn measure_bubble(trace: &IterationTrace, stage: usize) -> Duration {
    let b = &trace.stages[stage];
    if b.steady_send_count == 0 {
        return Duration::ZERO;
    }
    b.send_wait_steady / b.steady_send_count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MsgKey {
    activation: bool,
    mb: u32,
    from: usize,
    to: usize,
}

fn msg_key(stage: usize, kind: &InstrKind) -> Option<MsgKey> {
    match *kind {
        InstrKind::SendActivation { mb, peer } => Some(MsgKey { activation: true, mb, from: stage, to: peer }),
        InstrKind::RecvActivation { mb, peer } => Some(MsgKey { activation: true, mb, from: peer, to: stage }),
        InstrKind::SendGradient { mb, peer } => Some(MsgKey { activation: false, mb, from: stage, to: peer }),
        InstrKind::RecvGradient { mb, peer } => Some(MsgKey { activation: false, mb, from: peer, to: stage }),
        _ => None,
    }
}

struct StageRun {
    pc: usize,
    /// Clock in nanoseconds; the stage is free from this instant on.
    t: u64,
    busy_ns: u64,
    send_wait_steady_ns: u64,
    steady_send_count: u32,
    frc_queue_ns: u64,
    // queued, absorbed, overlapped, serialized
    frc: [u64; 4],
    cur_gpu: u64,
    peak_gpu: u64,
}

impl StageRun {
    /// Free time (waits, transfers) doubles as bubble budget for the
    /// forward-duplicate backlog.
    fn pass_free_time(&mut self, gap: u64) {
        let absorbed = gap.min(self.frc_queue_ns);
        self.frc_queue_ns -= absorbed;
        self.frc[1] += absorbed;
        self.t += gap;
    }

    fn compute(&mut self, cost: u64) {
        self.t += cost;
        self.busy_ns += cost;
    }

    fn add_gpu(&mut self, bytes: u64) {
        self.cur_gpu += bytes;
        self.peak_gpu = self.peak_gpu.max(self.cur_gpu);
    }

    fn sub_gpu(&mut self, bytes: u64) {
        self.cur_gpu = self.cur_gpu.saturating_sub(bytes);
    }
}

fn ns(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).expect("duration fits in u64 nanoseconds")
}

/// Runs one iteration of `schedule` over `partition` on the simulated
/// cluster and reports the timing, memory, and traffic breakdown. The
/// bookkeeping fraction is not applied here; it belongs to whole-run
/// accounting (see [`rc_overhead`]).
pub fn execute_iteration(
    schedule: &Schedule,
    partition: &StagePartition,
    cluster: &ClusterSpec,
    params: &EngineParams,
) -> Result<IterationTrace> {
    let p = schedule.depth;
    if partition.depth() != p {
        return Err(Error::InvalidSchedule(format!(
            "schedule depth {p} does not match partition depth {}",
            partition.depth()
        )));
    }
    let gpus_per_node = cluster.gpus_per_node.max(1) as usize;
    let node_count = p.div_ceil(gpus_per_node);
    if let Some(za) = &params.zone_assignment {
        if za.len() != node_count {
            return Err(Error::InvalidSchedule(format!(
                "zone assignment covers {} nodes, pipeline needs {node_count}",
                za.len()
            )));
        }
    }
    let node_of = |stage: usize| stage / gpus_per_node;
    let zone_of = |stage: usize| {
        params
            .zone_assignment
            .as_ref()
            .map_or(0, |za| za[node_of(stage)])
    };

    let stage_cost = &partition.stages;
    // Gradient payload crossing the cut between stage c and c+1 is sized by
    // the activation that crossed it forward.
    let message_bytes = |owner: Owner, key: &MsgKey| -> u64 {
        if key.activation {
            return stage_cost[key.from].boundary_bytes;
        }
        match owner {
            Owner::Normal => stage_cost[key.to].boundary_bytes,
            // Replica gradient: sized by the replica stage's output cut.
            Owner::RedundantFor(_) => stage_cost[(key.to + 1) % p].boundary_bytes,
        }
    };
    let transfer_ns = |owner: Owner, key: &MsgKey| {
        let cross = zone_of(key.from) != zone_of(key.to);
        ns(cluster.comm.transfer_time(message_bytes(owner, key), cross))
    };

    let mut runs: Vec<StageRun> = (0..p)
        .map(|s| {
            let mut base = stage_cost[s].weight_bytes;
            if schedule.rc_mode.keeps_replica() {
                base += stage_cost[(s + 1) % p].weight_bytes;
            }
            StageRun {
                pc: 0,
                t: 0,
                busy_ns: 0,
                send_wait_steady_ns: 0,
                steady_send_count: 0,
                frc_queue_ns: 0,
                frc: [0; 4],
                cur_gpu: base,
                peak_gpu: base,
            }
        })
        .collect();
    let mut cur_cpu = vec![0u64; node_count];
    let mut peak_cpu = vec![0u64; node_count];
    let mut link_bytes: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut posted: HashMap<MsgKey, u64> = HashMap::new();
    let mut timeline: Vec<TimelineEvent> = Vec::new();
    let m_total = schedule.microbatches;

    let push_event = |timeline: &mut Vec<TimelineEvent>,
                          stage: usize,
                          kind: &InstrKind,
                          start: u64,
                          end: u64| {
        if !params.record_timeline {
            return;
        }
        for (time_ns, phase) in [(start, Phase::Start), (end, Phase::End)] {
            timeline.push(TimelineEvent {
                time_ns,
                node: node_of(stage),
                stage,
                instruction: kind.name(),
                mb: kind.mb(),
                phase,
            });
        }
    };

    // Cooperative walk: run every stage as far as it can go, repeat until
    // nothing moves. Timing is independent of visit order because every
    // synchronization resolves to the max of both arrival clocks.
    loop {
        let mut progressed = false;
        for s in 0..p {
            'stage: while runs[s].pc < schedule.stages[s].len() {
                let instr = schedule.stages[s][runs[s].pc];
                let arrived = runs[s].t;
                match instr.kind {
                    InstrKind::Forward { .. } => {
                        let cost = ns(stage_cost[s].forward);
                        let budget =
                            (cost as f64 * params.frc_overlap_fraction.clamp(0.0, 1.0)) as u64;
                        let run = &mut runs[s];
                        // Queued duplicates for older microbatches share the
                        // device with this forward, up to the budget.
                        let overlapped = budget.min(run.frc_queue_ns);
                        run.frc_queue_ns -= overlapped;
                        run.frc[2] += overlapped;
                        run.compute(cost);
                        run.add_gpu(stage_cost[s].activation_bytes);
                        push_event(&mut timeline, s, &instr.kind, arrived, run.t);
                    }
                    InstrKind::Backward { .. } => {
                        let run = &mut runs[s];
                        run.compute(ns(stage_cost[s].backward));
                        run.sub_gpu(stage_cost[s].activation_bytes);
                        // The duplicate's intermediates are only useful while
                        // the duplicated stage could still need this
                        // microbatch; release them alongside our own.
                        let replica = (s + 1) % p;
                        match schedule.rc_mode {
                            RcMode::Eflb => {
                                let node = node_of(s);
                                cur_cpu[node] = cur_cpu[node]
                                    .saturating_sub(stage_cost[replica].activation_bytes);
                            }
                            RcMode::Efeb => {} // freed by BrcBackward
                            RcMode::None | RcMode::Lflb => {}
                        }
                        push_event(&mut timeline, s, &instr.kind, arrived, run.t);
                    }
                    InstrKind::FrcForward { .. } => {
                        let Owner::RedundantFor(replica) = instr.owner else {
                            return Err(Error::InvalidSchedule(
                                "forward duplicate without replica owner".into(),
                            ));
                        };
                        let cost = ns(stage_cost[replica].forward);
                        let next_is_swap = schedule.stages[s]
                            .get(runs[s].pc + 1)
                            .is_some_and(|n| matches!(n.kind, InstrKind::SwapOut { .. }));
                        let run = &mut runs[s];
                        run.frc_queue_ns += cost;
                        run.frc[0] += cost;
                        // Intermediates land in GPU memory unless a swap-out
                        // follows immediately (write-through to the host).
                        if next_is_swap {
                            let node = node_of(s);
                            cur_cpu[node] += stage_cost[replica].activation_bytes;
                            peak_cpu[node] = peak_cpu[node].max(cur_cpu[node]);
                        } else {
                            run.add_gpu(stage_cost[replica].activation_bytes);
                        }
                        push_event(&mut timeline, s, &instr.kind, arrived, run.t);
                    }
                    InstrKind::BrcBackward { .. } => {
                        let Owner::RedundantFor(replica) = instr.owner else {
                            return Err(Error::InvalidSchedule(
                                "backward duplicate without replica owner".into(),
                            ));
                        };
                        let run = &mut runs[s];
                        run.compute(ns(stage_cost[replica].backward));
                        run.sub_gpu(stage_cost[replica].activation_bytes);
                        push_event(&mut timeline, s, &instr.kind, arrived, run.t);
                    }
                    InstrKind::SwapOut { .. } | InstrKind::SwapIn { .. } => {
                        // Asynchronous DMA; zero device time. The write-through
                        // memory accounting happened at the duplicate forward.
                        push_event(&mut timeline, s, &instr.kind, arrived, arrived);
                    }
                    InstrKind::AllReduce => {
                        // Flush the duplicate backlog first: replicas must be
                        // current before the iteration closes.
                        let leftover = runs[s].frc_queue_ns;
                        runs[s].frc_queue_ns = 0;
                        runs[s].frc[3] += leftover;
                        runs[s].compute(leftover);
                        let cost = if params.data_parallel_width >= 2 {
                            let secs = params.allreduce_ring_factor
                                * stage_cost[s].weight_bytes as f64
                                / cluster.comm.intra_zone_bytes_per_sec;
                            ns(Duration::from_secs_f64(secs))
                        } else {
                            0
                        };
                        runs[s].t += cost;
                        push_event(&mut timeline, s, &instr.kind, arrived, runs[s].t);
                    }
                    InstrKind::ApplyGradient => {
                        push_event(&mut timeline, s, &instr.kind, arrived, arrived);
                    }
                    InstrKind::SendActivation { .. }
                    | InstrKind::RecvActivation { .. }
                    | InstrKind::SendGradient { .. }
                    | InstrKind::RecvGradient { .. } => {
                        let key = msg_key(s, &instr.kind).expect("p2p op has a key");
                        if instr.owner == Owner::Normal {
                            let peer = if key.from == s { key.to } else { key.from };
                            let peer_pc = runs[peer].pc;
                            let matched =
                                schedule.stages[peer].get(peer_pc).is_some_and(|pi| {
                                    pi.owner == Owner::Normal
                                        && msg_key(peer, &pi.kind) == Some(key)
                                });
                            if !matched {
                                break 'stage;
                            }
                            let sender = key.from;
                            let peer_arrived = runs[peer].t;
                            let meet = runs[s].t.max(runs[peer].t);
                            let transfer = transfer_ns(instr.owner, &key);
                            // Pre-send waits during the steady phase are the
                            // measured pipeline bubble.
                            if key.activation {
                                let wait = meet - runs[sender].t;
                                let warm = Schedule::warmup(p, m_total, sender);
                                if key.mb >= warm {
                                    runs[sender].send_wait_steady_ns += wait;
                                    runs[sender].steady_send_count += 1;
                                }
                            }
                            for &side in &[s, peer] {
                                let gap = (meet - runs[side].t) + transfer;
                                runs[side].pass_free_time(gap);
                            }
                            let end = runs[s].t;
                            push_event(&mut timeline, s, &instr.kind, arrived, end);
                            let peer_kind = schedule.stages[peer][peer_pc].kind;
                            push_event(&mut timeline, peer, &peer_kind, peer_arrived, end);
                            runs[peer].pc += 1;
                            *link_bytes.entry((key.from, key.to)).or_insert(0) +=
                                message_bytes(instr.owner, &key);
                        } else if key.from == s {
                            // Buffered replica send: pay the transfer, move on.
                            let transfer = transfer_ns(instr.owner, &key);
                            runs[s].pass_free_time(transfer);
                            posted.insert(key, runs[s].t);
                            *link_bytes.entry((key.from, key.to)).or_insert(0) +=
                                message_bytes(instr.owner, &key);
                            push_event(&mut timeline, s, &instr.kind, arrived, runs[s].t);
                        } else {
                            // Buffered replica receive: wait for the data.
                            let Some(&avail) = posted.get(&key) else {
                                break 'stage;
                            };
                            if avail > runs[s].t {
                                let gap = avail - runs[s].t;
                                runs[s].pass_free_time(gap);
                            }
                            push_event(&mut timeline, s, &instr.kind, arrived, runs[s].t);
                        }
                    }
                }
                runs[s].pc += 1;
                progressed = true;
            }
        }
        if runs
            .iter()
            .enumerate()
            .all(|(s, r)| r.pc == schedule.stages[s].len())
        {
            break;
        }
        if !progressed {
            let positions: Vec<String> = runs
                .iter()
                .enumerate()
                .filter(|(s, r)| r.pc < schedule.stages[*s].len())
                .map(|(s, r)| format!("stage {s} blocked at {:?}", schedule.stages[s][r.pc].kind))
                .collect();
            return Err(Error::Deadlock(positions.join("; ")));
        }
    }

    let duration_ns = runs.iter().map(|r| r.t).max().unwrap_or(0);
    for (s, run) in runs.iter().enumerate() {
        if run.peak_gpu > cluster.gpu_mem_bytes {
            return Err(Error::InfeasibleRun {
                stage: s,
                resource: "GPU",
                required: run.peak_gpu,
                available: cluster.gpu_mem_bytes,
            });
        }
    }
    for (node, &peak) in peak_cpu.iter().enumerate() {
        if peak > cluster.cpu_mem_bytes {
            return Err(Error::InfeasibleRun {
                stage: node * gpus_per_node,
                resource: "CPU",
                required: peak,
                available: cluster.cpu_mem_bytes,
            });
        }
    }

    timeline.sort_by_key(|e| (e.time_ns, e.stage, e.phase));
    let stages = runs
        .iter()
        .map(|r| StageBreakdown {
            busy: Duration::from_nanos(r.busy_ns),
            idle: Duration::from_nanos(duration_ns - r.busy_ns),
            send_wait_steady: Duration::from_nanos(r.send_wait_steady_ns),
            steady_send_count: r.steady_send_count,
            frc: FrcBreakdown {
                queued: Duration::from_nanos(r.frc[0]),
                absorbed: Duration::from_nanos(r.frc[1]),
                overlapped: Duration::from_nanos(r.frc[2]),
                serialized: Duration::from_nanos(r.frc[3]),
            },
            peak_gpu_bytes: r.peak_gpu,
        })
        .collect();
    Ok(IterationTrace {
        duration: Duration::from_nanos(duration_ns),
        stages,
        peak_cpu_bytes: peak_cpu,
        link_bytes,
        timeline,
    })
}

/// Relative iteration-time cost of a redundancy mode versus running the
/// plain schedule, bookkeeping included.
pub fn rc_overhead(
    partition: &StagePartition,
    microbatches: u32,
    cluster: &ClusterSpec,
    params: &EngineParams,
    rc_mode: RcMode,
) -> Result<f64> {
    use crate::schedule::{generate_1f1b, plan_frc};
    let base = generate_1f1b(partition.depth(), microbatches)?;
    let plain = execute_iteration(&base, partition, cluster, params)?;
    if rc_mode == RcMode::None {
        return Ok(0.0);
    }
    let planned = plan_frc(&base, rc_mode)?;
    let trace = execute_iteration(&planned, partition, cluster, params)?;
    let with_bk = trace.duration.as_secs_f64() * (1.0 + params.rc_bookkeeping_fraction);
    Ok(with_bk / plain.duration.as_secs_f64() - 1.0)
}
