//! Test harness: workloads, the simulation driver, the equivalence oracle,
//! sweeps and metrics.

mod explore;
mod metrics;
mod program;
mod sim;
mod sweep;
mod workloads;

pub use explore::{check_equivalence, explore, Equivalence, Exploration, ExploreReport, Script};
pub use metrics::Metrics;
pub use program::{Call, Op, Proc, Program, RankOutput, Reg, ReqKind, WORLD};
pub use sim::{
    classify, first_divergence, run, Blocked, CheckpointRecord, DeadlockReport, Outcome, PhaseClass, RunConfig,
    RunResult, Sim,
};
pub use sweep::{
    ckpt_sweep, endurance, fuzz, par_map, EnduranceReport, FuzzCase, FuzzReport, SweepCase, SweepConfig, SweepReport,
};
pub use workloads::{completion_digest, ring_payload, Workload, WorkloadKind, CHURN_CREATED, CHURN_FREED, SPLIT_EVERY};
