//! Checkpoint-injection sweeps, endurance runs and fuzzing, all judged by
//! the native-vs-checkpointed equivalence oracle.

use std::collections::BTreeSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::interpose::Mode;

use super::sim::{first_divergence, run, PhaseClass, RunConfig, RunResult};
use super::workloads::{Workload, WorkloadKind};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on
/// and `parallel` is true.
pub fn par_map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Compares a checkpointed run against the native output.
fn judge(native: &RunResult, got: &Result<RunResult>, expected_ckpts: usize) -> Option<String> {
    let got = match got {
        Ok(r) => r,
        Err(e) => return Some(format!("error: {e}")),
    };
    if !got.completed() {
        return Some(format!("did not complete: {:?}", got.outcome));
    }
    if got.mismatches() > 0 {
        let m = got.outputs.iter().find_map(|o| o.first_mismatch.clone());
        return Some(format!("wrong result: {}", m.unwrap_or_default()));
    }
    if !got.drains_ok() {
        return Some("drain left messages in flight or counters unbalanced".into());
    }
    if got.checkpoints.len() != expected_ckpts {
        return Some(format!(
            "{} checkpoints taken, {expected_ckpts} requested",
            got.checkpoints.len()
        ));
    }
    if got.output_bytes() != native.output_bytes() {
        return Some(format!(
            "output differs: {}",
            first_divergence(&native.outputs, &got.outputs).unwrap_or_default()
        ));
    }
    None
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub workloads: Vec<WorkloadKind>,
    pub procs: Vec<usize>,
    /// Starting round count; doubled until the run has enough points.
    pub rounds: u32,
    pub every: u64,
    pub min_points: usize,
    pub mode: Mode,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            workloads: vec![
                WorkloadKind::P2pRing,
                WorkloadKind::CollectiveStorm,
                WorkloadKind::Straggler,
            ],
            procs: vec![2, 4, 8, 16],
            rounds: 4,
            every: 10,
            min_points: 50,
            mode: Mode::Hybrid2pc,
            seed: 1,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCase {
    pub workload: Workload,
    pub native_steps: u64,
    pub points: usize,
    pub failures: Vec<(u64, String)>,
    pub coverage: BTreeSet<PhaseClass>,
    pub drains: usize,
    pub drains_ok: bool,
    pub drained_messages: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub cases: Vec<SweepCase>,
}

impl SweepReport {
    pub fn points(&self) -> usize {
        self.cases.iter().map(|c| c.points).sum()
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().map(|c| c.failures.len()).sum()
    }

    pub fn coverage(&self) -> BTreeSet<PhaseClass> {
        self.cases.iter().flat_map(|c| c.coverage.iter().copied()).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0 && self.cases.iter().all(|c| c.drains_ok)
    }
}

/// Native run of `kind` on `n` processes long enough for `min_points`
/// injection points every `every` steps.
fn sized_native(kind: WorkloadKind, n: usize, cfg: &SweepConfig) -> Result<(Workload, RunResult)> {
    let mut rounds = cfg.rounds.max(1);
    loop {
        let w = Workload::new(kind, n, rounds)?;
        let native = run(RunConfig::new(w, cfg.mode, cfg.seed))?;
        if native.steps / cfg.every >= cfg.min_points as u64 || rounds >= 1 << 16 {
            return Ok((w, native));
        }
        rounds *= 2;
    }
}

/// Injects a checkpoint (followed by kill and restart) at every multiple of
/// `every` steps of each configuration and compares against the native run.
pub fn ckpt_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    for &kind in &cfg.workloads {
        for &n in &cfg.procs {
            let (w, native) = sized_native(kind, n, cfg)?;
            let points: Vec<u64> = (1..=native.steps / cfg.every).map(|k| k * cfg.every).collect();
            let results = par_map(&points, cfg.parallel, |&at| {
                let r = run(RunConfig::new(w, cfg.mode, cfg.seed).with_ckpts([at]));
                let verdict = judge(&native, &r, 1);
                (at, verdict, r.ok())
            });
            let mut case = SweepCase {
                workload: w,
                native_steps: native.steps,
                points: points.len(),
                failures: Vec::new(),
                coverage: BTreeSet::new(),
                drains: 0,
                drains_ok: true,
                drained_messages: 0,
            };
            for (at, verdict, r) in results {
                if let Some(v) = verdict {
                    case.failures.push((at, v));
                }
                if let Some(r) = r {
                    case.coverage.extend(r.coverage());
                    case.drains += r.checkpoints.len();
                    case.drains_ok &= r.drains_ok();
                    case.drained_messages += r.checkpoints.iter().map(|c| c.drain.messages_drained).sum::<u64>();
                }
            }
            report.cases.push(case);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EnduranceReport {
    pub workload: Workload,
    pub restarts: usize,
    pub failure: Option<String>,
    pub drains_ok: bool,
    pub high_water: usize,
}

/// `cycles` consecutive checkpoint-kill-restart rounds spread over one run.
pub fn endurance(
    kind: WorkloadKind,
    n: usize,
    rounds: u32,
    cycles: u64,
    mode: Mode,
    seed: u64,
) -> Result<EnduranceReport> {
    let w = Workload::new(kind, n, rounds)?;
    let native = run(RunConfig::new(w, mode, seed))?;
    let at: Vec<u64> = (1..=cycles).map(|k| native.steps * k / (cycles + 1)).collect();
    let r = run(RunConfig::new(w, mode, seed).with_ckpts(at));
    let failure = judge(&native, &r, cycles as usize);
    let r = r.ok();
    Ok(EnduranceReport {
        workload: w,
        restarts: r
            .as_ref()
            .map_or(0, |r| r.checkpoints.iter().filter(|c| c.restart.is_some()).count()),
        failure,
        drains_ok: r.as_ref().is_some_and(RunResult::drains_ok),
        high_water: r.map_or(0, |r| r.high_water.into_iter().max().unwrap_or(0)),
    })
}

#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub seed: u64,
    pub workload: Workload,
    pub mode: Mode,
    pub ckpt_at: Vec<u64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FuzzReport {
    pub cases: Vec<FuzzCase>,
}

impl FuzzReport {
    pub fn failures(&self) -> Vec<&FuzzCase> {
        self.cases.iter().filter(|c| c.failure.is_some()).collect()
    }
}

/// Random workloads, sizes, modes and injection points, `iterations` of
/// them derived from `seed`.
pub fn fuzz(seed: u64, iterations: usize, max_procs: usize, parallel: bool) -> Result<FuzzReport> {
    let seeds: Vec<u64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..iterations).map(|_| rng.random_range(0..u64::MAX)).collect()
    };
    let cases = par_map(&seeds, parallel, |&s| fuzz_one(s, max_procs.max(2)));
    Ok(FuzzReport {
        cases: cases.into_iter().collect::<Result<_>>()?,
    })
}

pub(crate) fn fuzz_one(seed: u64, max_procs: usize) -> Result<FuzzCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = WorkloadKind::ALL[rng.random_range(0..WorkloadKind::ALL.len())];
    let mode = if kind == WorkloadKind::BcastDeadlock {
        [Mode::P2pEmulation, Mode::Hybrid2pc][rng.random_range(0..2)]
    } else {
        Mode::ALL[rng.random_range(0..Mode::ALL.len())]
    };
    let n = rng.random_range(2..=max_procs);
    let rounds = rng.random_range(1..=8);
    let w = Workload::new(kind, n, rounds)?;
    let native = run(RunConfig::new(w, mode, seed))?;
    let k = rng.random_range(1..=3);
    let mut at: Vec<u64> = (0..k).map(|_| rng.random_range(0..=native.steps)).collect();
    at.sort_unstable();
    let restart = rng.random_range(0..4) != 0;
    let mut cfg = RunConfig::new(w, mode, seed).with_ckpts(at.clone());
    cfg.restart = restart;
    let r = run(cfg);
    // Requests landing inside an earlier round are deferred, so every one
    // is eventually honoured.
    let failure = judge(&native, &r, k);
    Ok(FuzzCase {
        seed,
        workload: w,
        mode,
        ckpt_at: at,
        failure,
    })
}
