//! Discrete-event simulator and scheduling library for pipeline-parallel
//! DNN training on preemptible (spot) instances.
//!
//! The crate is organized around a small pipeline of concerns:
//!
//! * [`profile`] describes a model as per-layer costs and partitions it into
//!   pipeline stages.
//! * [`schedule`] turns a partition into per-stage instruction streams
//!   (1F1B or GPipe), optionally augmented with redundant computation, and
//!   merges a victim's schedule into its shadow's after a preemption.
//! * [`engine`] executes one training iteration of a schedule on an integer
//!   nanosecond timeline and reports busy/idle/bubble accounting.
//! * [`churn`] models spot-market behavior: preemption traces, synthetic
//!   preemption/allocation processes, zone-aware placement, autoscaling.
//! * [`resilience`] holds the cluster state machine: preemption detection,
//!   recovery through redundant computation, reconfiguration, checkpointing,
//!   and the baseline strategies.
//! * [`sim`] drives a full training run (iterations x churn) and produces a
//!   [`metrics::RunResult`].
//! * [`metrics`] aggregates run results into throughput/cost/value summaries
//!   and CSV reports.
//! * [`config`] + [`experiment`] tie everything to a declarative experiment
//!   file and the batch runner used by the CLI.

pub mod churn;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod profile;
pub mod resilience;
pub mod schedule;
pub mod sim;
pub mod units;

pub use churn::{ChurnEvent, ChurnKind, ChurnModel, ChurnProcess};
pub use config::{load_config, parse_config, Experiment, ExperimentConfig};
pub use engine::{measure_bubble, EngineParams, IterationTrace};
pub use metrics::{BatchSummary, Prices, RunResult, TimeBucket, TimeSplit};
pub use profile::{ClusterSpec, CommModel, LayerCost, ModelProfile, StagePartition};
pub use resilience::{
    ClusterState, RecoveryKind, RecoveryOutcome, ResilienceParams, Strategy,
};
pub use schedule::{InstrKind, Instruction, Owner, RcMode, Schedule, ScheduleKind};
pub use sim::{ChurnSource, InstanceClass, RunConfig, SimEvent, SimOutput, SimParams, StopRule};

use thiserror::Error;

/// Library-wide error type.
///
/// Variants carry enough context to point at the offending input (a stage,
/// a config path, a line number) without holding references.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model profile: {0}")]
    InvalidProfile(String),

    #[error("invalid schedule request: {0}")]
    InvalidSchedule(String),

    #[error("stage {stage} needs {required} bytes of {resource} memory but only {available} are available")]
    InfeasibleRun {
        stage: usize,
        resource: &'static str,
        required: u64,
        available: u64,
    },

    #[error("schedule deadlock: no stage can make progress ({0})")]
    Deadlock(String),

    #[error("invalid configuration at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("node {0} is not serving any pipeline stage")]
    InvalidVictim(u64),

    #[error("placement needs {needed} nodes but only {available} are live")]
    InsufficientNodes { needed: usize, available: usize },

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
