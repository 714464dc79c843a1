//! Checkpoint coordinator: request, safe-point detection, drain, commit and
//! image capture.
//!
//! The coordinator only ever talks to processes through the pending flag
//! and their reports. Counter data for the drain moves between processes
//! through an alltoall on the lower half, never through the coordinator.

mod drain;
mod image;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use drain::{drain, DrainReport};
pub use image::{
    image_path, read_images, round_dir, write_images, CheckpointImage, CommsSection, ImageLayout, TablesSection,
    FORMAT_VERSION, MAGIC, SECTIONS,
};

use crate::error::{Error, Result};
use crate::interpose::{CollKey, ProcessReport, Upper};
use crate::runtime::{Actor, EventOp, LowerHalf, Rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Running,
    CkptRequested,
    Draining,
    Committed,
    Writing,
    Resumed,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Running => "running",
            Phase::CkptRequested => "ckpt-requested",
            Phase::Draining => "draining",
            Phase::Committed => "committed",
            Phase::Writing => "writing",
            Phase::Resumed => "resumed",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    /// The only successor allowed from each phase; a round can also be
    /// aborted back to running from any in-progress phase.
    fn next(self) -> Phase {
        match self {
            Phase::Running | Phase::Resumed => Phase::CkptRequested,
            Phase::CkptRequested => Phase::Draining,
            Phase::Draining => Phase::Committed,
            Phase::Committed => Phase::Writing,
            Phase::Writing => Phase::Resumed,
        }
    }

    pub fn in_round(self) -> bool {
        !matches!(self, Phase::Running | Phase::Resumed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of a committed round, before the images are written.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub round: u32,
    pub images: Vec<CheckpointImage>,
    pub drain: DrainReport,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    phase: Phase,
    round: u32,
    reports: BTreeMap<Rank, ProcessReport>,
    /// (scheduler step, phase entered).
    trace: Vec<(u64, Phase)>,
}

impl Default for Coordinator {
    fn default() -> Self {
        Self::new()
    }
}

impl Coordinator {
    pub fn new() -> Self {
        Coordinator {
            phase: Phase::Running,
            round: 0,
            reports: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    /// Continues round numbering after a restart.
    pub fn resumed_at(round: u32) -> Self {
        Coordinator {
            phase: Phase::Resumed,
            round,
            ..Self::new()
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn trace(&self) -> &[(u64, Phase)] {
        &self.trace
    }

    pub fn reports(&self) -> &BTreeMap<Rank, ProcessReport> {
        &self.reports
    }

    fn enter(&mut self, lh: &mut LowerHalf, to: Phase) -> Result<()> {
        if self.phase.next() != to {
            return Err(Error::ProtocolViolation(format!(
                "coordinator cannot go from {} to {}",
                self.phase, to
            )));
        }
        self.phase = to;
        self.trace.push((lh.step(), to));
        lh.log(Actor::Coordinator, EventOp::Phase, &[to.code(), u64::from(self.round)]);
        Ok(())
    }

    /// Starts a round: every process sees the pending flag before its next
    /// step.
    pub fn request_checkpoint(&mut self, lh: &mut LowerHalf, ups: &mut [Upper]) -> Result<u32> {
        if self.phase.in_round() {
            return Err(Error::RejectedBusy(self.round));
        }
        self.round += 1;
        lh.log(Actor::Coordinator, EventOp::CheckpointRequest, &[u64::from(self.round)]);
        self.enter(lh, Phase::CkptRequested)?;
        for up in ups.iter_mut() {
            up.ctx.ckpt_pending = true;
        }
        self.reports.clear();
        Ok(self.round)
    }

    /// Refreshes the reports. True when no process is inside the lower
    /// half and no collective instance is committed to the real path.
    pub fn poll_safe(&mut self, lh: &LowerHalf, ups: &mut [Upper]) -> bool {
        for up in ups.iter_mut() {
            let rep = up.report(lh);
            self.reports.insert(rep.rank, rep);
        }
        self.reports.values().all(|r| r.safe && r.active.is_empty())
    }

    /// Collective instances some process has committed to the real path.
    pub fn active_keys(&self) -> BTreeSet<CollKey> {
        self.reports.values().flat_map(|r| r.active.iter().copied()).collect()
    }

    /// Drains, commits and captures images. `apps` holds each rank's
    /// application blob. Fails without side effects on the phase if some
    /// process is not at a safe point.
    pub fn checkpoint(&mut self, lh: &mut LowerHalf, ups: &mut [Upper], apps: Vec<Vec<u8>>) -> Result<Checkpoint> {
        if self.phase != Phase::CkptRequested {
            return Err(Error::ProtocolViolation(format!(
                "checkpoint attempted in phase {}",
                self.phase
            )));
        }
        if !self.poll_safe(lh, ups) {
            return Err(Error::ProtocolViolation(
                "checkpoint attempted while a process is inside the lower half".into(),
            ));
        }
        if apps.len() != ups.len() {
            return Err(Error::InvalidConfiguration(
                "one application blob per process required".into(),
            ));
        }
        self.enter(lh, Phase::Draining)?;
        let report = match drain(lh, ups) {
            Ok(r) => r,
            Err(e) => {
                self.abort(lh, ups);
                return Err(e);
            }
        };
        if !report.balanced() {
            self.abort(lh, ups);
            return Err(Error::CheckpointAborted(format!(
                "drain left the network {} with unbalanced pairs {:?}",
                if report.network_empty { "empty" } else { "non-empty" },
                report.imbalances
            )));
        }
        for up in ups.iter_mut() {
            up.sweep(lh, false)?;
        }
        let mut floors: BTreeMap<(u64, u32), (u64, Vec<Rank>)> = BTreeMap::new();
        for up in ups.iter() {
            for (&id, &seq) in up.collective_progress() {
                let members = up.identity_members(id).unwrap_or_default().to_vec();
                let f = floors.entry(id).or_insert((0, members));
                f.0 = f.0.max(seq);
            }
        }
        for up in ups.iter_mut() {
            up.set_emulation_floors(&floors);
        }
        self.enter(lh, Phase::Committed)?;
        self.enter(lh, Phase::Writing)?;
        if ups.iter().any(|u| u.ctx.in_lower_half) {
            return Err(Error::ProtocolViolation("in-lower-half flag set while writing".into()));
        }
        let epoch = lh.epoch();
        let images = ups
            .iter()
            .zip(apps)
            .map(|(up, app)| CheckpointImage::capture(up, epoch, self.round, app))
            .collect();
        Ok(Checkpoint {
            round: self.round,
            images,
            drain: report,
        })
    }

    /// Ends the round and clears the pending flag everywhere.
    pub fn resume(&mut self, lh: &mut LowerHalf, ups: &mut [Upper]) -> Result<()> {
        self.enter(lh, Phase::Resumed)?;
        for up in ups.iter_mut() {
            up.ctx.ckpt_pending = false;
        }
        Ok(())
    }

    /// Abandons the current round; no images from it are kept.
    pub fn abort(&mut self, lh: &mut LowerHalf, ups: &mut [Upper]) {
        self.phase = Phase::Running;
        self.trace.push((lh.step(), Phase::Running));
        lh.log(
            Actor::Coordinator,
            EventOp::Phase,
            &[Phase::Running.code(), u64::from(self.round)],
        );
        for up in ups.iter_mut() {
            up.ctx.ckpt_pending = false;
        }
    }
}
