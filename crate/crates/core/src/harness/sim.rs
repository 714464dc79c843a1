//! Seeded simulation driver: schedules processes, injects checkpoints,
//! kills and restarts the job, and detects deadlock.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use crate::codec::{Decode, Encode};
use crate::coordinator::{write_images, CheckpointImage, Coordinator, DrainReport, Phase};
use crate::error::{Error, Result};
use crate::interpose::{CollKey, Mode, Upper, WrapperStats};
use crate::restart::{restart, RestartReport};
use crate::runtime::{Event, LowerHalf, Rank, Scheduler, Source};

use super::metrics::Metrics;
use super::program::{Call, Proc, RankOutput};
use super::workloads::Workload;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workload: Workload,
    pub mode: Mode,
    pub seed: u64,
    /// Scheduler steps at which a checkpoint is requested.
    pub ckpt_at: Vec<u64>,
    /// Kill the job after every checkpoint and continue from the images.
    pub restart: bool,
    pub ckpt_dir: Option<PathBuf>,
    pub record_events: bool,
    pub max_steps: u64,
}

impl RunConfig {
    pub fn new(workload: Workload, mode: Mode, seed: u64) -> Self {
        RunConfig {
            workload,
            mode,
            seed,
            ckpt_at: Vec::new(),
            restart: true,
            ckpt_dir: None,
            record_events: false,
            max_steps: 50_000_000,
        }
    }

    pub fn with_ckpts(mut self, at: impl IntoIterator<Item = u64>) -> Self {
        self.ckpt_at = at.into_iter().collect();
        self.ckpt_at.sort_unstable();
        self
    }
}

/// Where a process was when a checkpoint was committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseClass {
    SendLoop,
    RecvLoop,
    CollectiveEmulation,
    /// Holding a non-blocking request it has not yet completed.
    BetweenCreateAndTest,
}

impl PhaseClass {
    pub const ALL: [PhaseClass; 4] = [
        PhaseClass::SendLoop,
        PhaseClass::RecvLoop,
        PhaseClass::CollectiveEmulation,
        PhaseClass::BetweenCreateAndTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhaseClass::SendLoop => "send-loop",
            PhaseClass::RecvLoop => "recv-loop",
            PhaseClass::CollectiveEmulation => "collective-emulation",
            PhaseClass::BetweenCreateAndTest => "between-create-and-test",
        }
    }
}

pub fn classify(proc: &Proc) -> BTreeSet<PhaseClass> {
    let mut out = BTreeSet::new();
    match &proc.call {
        Some(Call::Send(_)) => {
            out.insert(PhaseClass::SendLoop);
        }
        Some(Call::Recv { .. }) => {
            out.insert(PhaseClass::RecvLoop);
        }
        Some(c) if c.is_emulating() => {
            out.insert(PhaseClass::CollectiveEmulation);
        }
        _ => {}
    }
    if !proc.reqs.is_empty() {
        out.insert(PhaseClass::BetweenCreateAndTest);
    }
    out
}

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub round: u32,
    pub requested_at: u64,
    pub committed_at: u64,
    pub drain: DrainReport,
    /// Network empty and every pair balanced right after the drain.
    pub drain_ok: bool,
    pub image_bytes: usize,
    pub classes: BTreeSet<PhaseClass>,
    pub restart: Option<RestartReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocked {
    pub rank: Rank,
    pub call: String,
    /// World ranks this process waits on.
    pub waits_for: Vec<Rank>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockReport {
    pub step: u64,
    pub checkpoint_pending: bool,
    pub blocked: Vec<Blocked>,
    pub finished: Vec<Rank>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "deadlock at step {} (checkpoint pending: {})",
            self.step,
            if self.checkpoint_pending { "yes" } else { "no" }
        )?;
        for b in &self.blocked {
            writeln!(
                f,
                "  rank {} blocked in {} -> waits for {:?}",
                b.rank, b.call, b.waits_for
            )?;
        }
        if !self.finished.is_empty() {
            writeln!(f, "  finished: {:?}", self.finished)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Deadlock(DeadlockReport),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: Outcome,
    pub outputs: Vec<RankOutput>,
    pub steps: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub stats: WrapperStats,
    pub high_water: Vec<usize>,
    pub final_requests: Vec<usize>,
    pub max_comms: usize,
    pub phase_trace: Vec<(u64, Phase)>,
    /// Event log of every epoch, oldest first (when recorded).
    pub events: Vec<Vec<Event>>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn output_bytes(&self) -> Vec<u8> {
        self.outputs
            .iter()
            .map(RankOutput::render)
            .collect::<String>()
            .into_bytes()
    }

    pub fn mismatches(&self) -> u32 {
        self.outputs.iter().map(|o| o.mismatches).sum()
    }

    pub fn drains_ok(&self) -> bool {
        self.checkpoints.iter().all(|c| c.drain_ok)
    }

    /// Completed, every result as expected and every drain exact.
    pub fn verified(&self) -> bool {
        self.completed() && self.mismatches() == 0 && self.drains_ok()
    }

    pub fn coverage(&self) -> BTreeSet<PhaseClass> {
        self.checkpoints
            .iter()
            .flat_map(|c| c.classes.iter().copied())
            .collect()
    }

    pub fn metrics(&self, cfg: &RunConfig) -> Metrics {
        let mut m = Metrics::new();
        m.push("workload", cfg.workload.kind);
        m.push("procs", cfg.workload.n);
        m.push("rounds", cfg.workload.rounds);
        m.push("seed", cfg.seed);
        m.push("mode", cfg.mode);
        m.push(
            "outcome",
            match self.outcome {
                Outcome::Completed => "completed",
                Outcome::Deadlock(_) => "deadlock",
            },
        );
        m.push("verified", self.verified());
        m.push("steps", self.steps);
        m.push("checkpoints", self.checkpoints.len());
        m.push(
            "restarts",
            self.checkpoints.iter().filter(|c| c.restart.is_some()).count(),
        );
        let sum = |f: &dyn Fn(&CheckpointRecord) -> u64| self.checkpoints.iter().map(f).sum::<u64>();
        m.push("drain_bytes", sum(&|c| c.drain.bytes_drained));
        m.push("drain_messages", sum(&|c| c.drain.messages_drained));
        m.push("drain_iterations", sum(&|c| c.drain.iterations));
        m.push("drain_completed_by_test", sum(&|c| c.drain.completed_by_test));
        m.push("drains_ok", self.drains_ok());
        m.push("image_bytes", sum(&|c| c.image_bytes as u64));
        m.push(
            "restart_comms_created",
            self.checkpoints
                .iter()
                .filter_map(|c| c.restart.as_ref())
                .map(|r| r.comms_created)
                .sum::<usize>(),
        );
        m.push(
            "ckpt_latency_steps",
            sum(&|c| c.committed_at.saturating_sub(c.requested_at)),
        );
        m.push("barrier_insertions", self.stats.barrier_insertions);
        m.push("real_collectives", self.stats.real_collectives);
        m.push("emulated_collectives", self.stats.emulated_collectives);
        m.push("request_high_water", self.high_water.iter().max().copied().unwrap_or(0));
        m.push("final_request_entries", self.final_requests.iter().sum::<usize>());
        m.push("max_comms", self.max_comms);
        m.push("mismatches", self.mismatches());
        let cov = self.coverage();
        for c in PhaseClass::ALL {
            m.push(&format!("coverage.{}", c.name()), cov.contains(&c));
        }
        for (k, v) in &self.stats.calls {
            m.push(&format!("calls.{k}"), v);
        }
        m.push(
            "output_digest",
            format!("{:016x}", crate::hash::fnv1a64(&self.output_bytes())),
        );
        m
    }
}

/// One running job plus the harness state around it.
#[derive(Debug)]
pub struct Sim {
    pub cfg: RunConfig,
    pub lh: LowerHalf,
    pub ups: Vec<Upper>,
    pub procs: Vec<Proc>,
    pub coord: Coordinator,
    sched: Scheduler,
    injections: Vec<u64>,
    requested_at: u64,
    checkpoints: Vec<CheckpointRecord>,
    stats: WrapperStats,
    high_water: Vec<usize>,
    max_comms: usize,
    phase_trace: Vec<(u64, Phase)>,
    events: Vec<Vec<Event>>,
}

impl Sim {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let n = cfg.workload.n;
        let mut lh = LowerHalf::with_events(n, 0, cfg.record_events)?;
        let ups: Vec<Upper> = (0..n as Rank).map(|r| Upper::init(&mut lh, r)).collect::<Result<_>>()?;
        let procs = ups.iter().map(|u| Proc::new(u.rank(), u.world())).collect();
        let mut injections = cfg.ckpt_at.clone();
        injections.sort_unstable();
        Ok(Sim {
            sched: Scheduler::new(cfg.seed),
            injections,
            cfg,
            lh,
            ups,
            procs,
            coord: Coordinator::new(),
            requested_at: 0,
            checkpoints: Vec::new(),
            stats: WrapperStats::default(),
            high_water: vec![0; n],
            max_comms: 1,
            phase_trace: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.sched.steps()
    }

    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }

    pub fn checkpoint_pending(&self) -> bool {
        self.coord.phase() == Phase::CkptRequested
    }

    pub fn request_checkpoint(&mut self) -> Result<u32> {
        let round = self.coord.request_checkpoint(&mut self.lh, &mut self.ups)?;
        self.requested_at = self.sched.steps();
        Ok(round)
    }

    fn ready(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, p) in self.procs.iter().enumerate() {
            if p.ready(&self.ups[i], &self.lh)? {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Advances by one scheduler step; `Some` once the run is over.
    pub fn step(&mut self) -> Result<Option<Outcome>> {
        let now = self.sched.steps();
        if now > self.cfg.max_steps {
            return Err(Error::InvalidConfiguration(format!(
                "run exceeded {} steps",
                self.cfg.max_steps
            )));
        }
        // Requests falling inside an earlier round wait for it to finish;
        // requests past the end of the program are served at the end.
        let all_done = self.procs.iter().all(|p| p.done);
        while let Some(&s) = self.injections.first() {
            if self.coord.phase().in_round() || (s > now && !all_done) {
                break;
            }
            self.injections.remove(0);
            self.request_checkpoint()?;
            if self.coord.poll_safe(&self.lh, &mut self.ups) {
                self.take_checkpoint()?;
            }
        }
        if self.checkpoint_pending() && self.coord.poll_safe(&self.lh, &mut self.ups) {
            self.take_checkpoint()?;
        }
        if all_done {
            return Ok(Some(Outcome::Completed));
        }
        let runnable = self.ready()?;
        if runnable.is_empty() {
            return Ok(Some(Outcome::Deadlock(self.deadlock_report())));
        }
        let p = self.sched.pick(&runnable);
        self.lh.set_step(self.sched.steps());
        let active: BTreeSet<CollKey> = if self.checkpoint_pending() {
            self.coord.active_keys()
        } else {
            BTreeSet::new()
        };
        let is_active = |k: &CollKey| active.contains(k);
        self.procs[p].step(
            &self.cfg.workload,
            &mut self.ups[p],
            &mut self.lh,
            self.cfg.mode,
            &is_active,
        )?;
        self.max_comms = self.max_comms.max(self.ups[p].comm_table_len());
        Ok(None)
    }

    /// Steps until `pred` holds or the run ends; true if `pred` held.
    pub fn run_until(&mut self, mut pred: impl FnMut(&Sim) -> bool) -> Result<bool> {
        loop {
            if pred(self) {
                return Ok(true);
            }
            if self.step()?.is_some() {
                return Ok(false);
            }
        }
    }

    pub fn run(mut self) -> Result<RunResult> {
        let outcome = loop {
            if let Some(o) = self.step()? {
                break o;
            }
        };
        self.retire_epoch();
        let final_requests = self.ups.iter().map(Upper::request_table_len).collect();
        self.phase_trace.extend_from_slice(self.coord.trace());
        Ok(RunResult {
            outcome,
            outputs: self.procs.iter().map(|p| p.out.clone()).collect(),
            steps: self.sched.steps(),
            checkpoints: self.checkpoints,
            stats: self.stats,
            high_water: self.high_water,
            final_requests,
            max_comms: self.max_comms,
            phase_trace: self.phase_trace,
            events: self.events,
        })
    }

    /// Folds the statistics and event log of the current epoch into the
    /// run totals.
    fn retire_epoch(&mut self) {
        for (i, up) in self.ups.iter_mut().enumerate() {
            self.stats.merge(&up.stats);
            self.high_water[i] = self.high_water[i].max(up.stats.request_high_water);
            up.stats = WrapperStats::default();
        }
        if self.cfg.record_events {
            self.events.push(self.lh.events_mut().take());
        }
    }

    fn take_checkpoint(&mut self) -> Result<()> {
        let classes = self.procs.iter().flat_map(classify).collect();
        let apps = self.procs.iter().map(Encode::to_bytes).collect();
        let ck = self.coord.checkpoint(&mut self.lh, &mut self.ups, apps)?;
        let drain_ok = ck.drain.balanced() && self.lh.p2p_in_flight() == 0;
        let encoded: Vec<Vec<u8>> = ck.images.iter().map(CheckpointImage::encode).collect();
        if let Some(dir) = &self.cfg.ckpt_dir {
            write_images(dir, ck.round, &ck.images)?;
        }
        let mut record = CheckpointRecord {
            round: ck.round,
            requested_at: self.requested_at,
            committed_at: self.sched.steps(),
            drain: ck.drain,
            drain_ok,
            image_bytes: encoded.iter().map(Vec::len).sum(),
            classes,
            restart: None,
        };
        if self.cfg.restart {
            self.retire_epoch();
            self.phase_trace.extend_from_slice(self.coord.trace());
            let images = encoded
                .iter()
                .map(|b| CheckpointImage::decode(b))
                .collect::<Result<Vec<_>>>()?;
            let r = restart(images, self.cfg.record_events)?;
            self.procs = r
                .apps
                .iter()
                .map(|a| Proc::from_bytes(a, "app-state"))
                .collect::<Result<_>>()?;
            self.lh = r.lh;
            self.lh.set_step(self.sched.steps());
            self.ups = r.ups;
            self.coord = Coordinator::resumed_at(ck.round);
            record.restart = Some(r.report);
        } else {
            self.coord.resume(&mut self.lh, &mut self.ups)?;
        }
        self.checkpoints.push(record);
        Ok(())
    }

    fn deadlock_report(&self) -> DeadlockReport {
        let mut blocked = Vec::new();
        let mut finished = Vec::new();
        let in_coll: BTreeMap<Rank, crate::interpose::VirtualId> = self
            .procs
            .iter()
            .filter_map(|p| match &p.call {
                Some(Call::Coll { call, .. }) => Some((p.rank, call.vcomm)),
                Some(Call::Split { call, .. }) => Some((p.rank, call.parent)),
                _ => None,
            })
            .collect();
        for (p, up) in self.procs.iter().zip(&self.ups) {
            if p.done {
                finished.push(p.rank);
                continue;
            }
            let Some(call) = &p.call else { continue };
            let members = |v| up.descriptor(v).map(|d| d.members.clone()).unwrap_or_default();
            let waits_for = match call {
                Call::Recv { call, .. } => match call.src {
                    Source::Rank(s) => members(call.vcomm).get(s as usize).copied().into_iter().collect(),
                    Source::Any => members(call.vcomm),
                },
                Call::Coll { call, .. } => members(call.vcomm)
                    .into_iter()
                    .filter(|&m| m != p.rank && in_coll.get(&m) != Some(&call.vcomm))
                    .collect(),
                Call::Split { call, .. } => members(call.parent)
                    .into_iter()
                    .filter(|&m| m != p.rank && in_coll.get(&m) != Some(&call.parent))
                    .collect(),
                _ => Vec::new(),
            };
            blocked.push(Blocked {
                rank: p.rank,
                call: call.label(),
                waits_for,
            });
        }
        DeadlockReport {
            step: self.sched.steps(),
            checkpoint_pending: self.checkpoint_pending(),
            blocked,
            finished,
        }
    }
}

/// Runs one configuration to the end.
pub fn run(cfg: RunConfig) -> Result<RunResult> {
    Sim::new(cfg)?.run()
}

/// First place two runs' outputs differ, for diagnostics.
pub fn first_divergence(a: &[RankOutput], b: &[RankOutput]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{} ranks vs {} ranks", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if let Some(i) = x.results.iter().zip(&y.results).position(|(p, q)| p != q) {
            return Some(format!(
                "rank {} completion #{i}: {:016x} vs {:016x}",
                x.rank, x.results[i], y.results[i]
            ));
        }
        if x.results.len() != y.results.len() {
            return Some(format!(
                "rank {}: {} completions vs {}",
                x.rank,
                x.results.len(),
                y.results.len()
            ));
        }
        if x != y {
            return Some(format!(
                "rank {}: {} vs {}",
                x.rank,
                x.render().trim(),
                y.render().trim()
            ));
        }
    }
    None
}
