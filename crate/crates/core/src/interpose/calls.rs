//! Blocking wrapper calls as resumable state machines.
//!
//! Each call is polled once per scheduler step. Between polls the process
//! sits at a checkpoint-safe yield point, and the call's state is plain
//! data that goes into the checkpoint image. The one exception is
//! [`CollStage::Real`]: a process in that stage is inside the lower half
//! and the coordinator never takes a checkpoint while it is there.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::runtime::{results, split_members, CollectiveKind, CollectiveStart, LowerHalf, RealRequest, Source, TagSel};

use super::state::CollKey;
use super::upper::{Completion, Upper, EMULATION_TAG};
use super::vtable::VirtualId;

/// How blocking collectives are made checkpoint-safe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// A checkpoint-safe barrier before every real collective.
    NaiveBarrier,
    /// Every collective is emulated with point-to-point messages.
    P2pEmulation,
    /// Real collectives until a checkpoint is requested, then emulation
    /// for any instance not already under way on the real path.
    Hybrid2pc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NaiveBarrier, Mode::P2pEmulation, Mode::Hybrid2pc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NaiveBarrier => "naive-barrier",
            Mode::P2pEmulation => "p2p-emulation",
            Mode::Hybrid2pc => "hybrid-2pc",
        }
    }

    fn code(self) -> u8 {
        match self {
            Mode::NaiveBarrier => 0,
            Mode::P2pEmulation => 1,
            Mode::Hybrid2pc => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfiguration(format!("unknown mode {s:?}")))
    }
}

impl Encode for Mode {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.code());
    }
}

impl Decode for Mode {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let c = r.u8()?;
        Mode::ALL
            .into_iter()
            .find(|m| m.code() == c)
            .ok_or_else(|| r.invalid(format!("bad mode {c}")))
    }
}

/// Blocking send: a non-blocking send followed by a test loop.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SendCall {
    pub dst: u32,
    pub tag: i32,
    pub vcomm: VirtualId,
    payload: Vec<u8>,
    pub vreq: Option<VirtualId>,
}

impl SendCall {
    pub fn new(dst: u32, tag: i32, vcomm: VirtualId, payload: Vec<u8>) -> Self {
        SendCall {
            dst,
            tag,
            vcomm,
            payload,
            vreq: None,
        }
    }

    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        match self.vreq {
            None => Ok(true),
            Some(v) => up.is_ready(lh, v),
        }
    }

    pub fn poll(&mut self, up: &mut Upper, lh: &mut LowerHalf) -> Result<Option<()>> {
        match self.vreq {
            None => {
                if self.tag >= 0 {
                    up.stats.count("send");
                }
                let payload = std::mem::take(&mut self.payload);
                self.vreq = Some(up.isend_raw(lh, self.dst, self.tag, self.vcomm, payload)?);
                Ok(None)
            }
            Some(v) => Ok(up.complete_internal(lh, v)?.map(|_| ())),
        }
    }
}

/// Blocking receive: a non-blocking receive followed by a test loop.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RecvCall {
    /// Local rank selector.
    pub src: Source,
    pub tag: TagSel,
    pub vcomm: VirtualId,
    pub vreq: Option<VirtualId>,
}

impl RecvCall {
    pub fn new(src: Source, tag: TagSel, vcomm: VirtualId) -> Self {
        RecvCall {
            src,
            tag,
            vcomm,
            vreq: None,
        }
    }

    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        match self.vreq {
            None => Ok(true),
            Some(v) => up.is_ready(lh, v),
        }
    }

    pub fn poll(&mut self, up: &mut Upper, lh: &mut LowerHalf) -> Result<Option<Completion>> {
        match self.vreq {
            None => {
                if !matches!(self.tag, TagSel::Tag(t) if t < 0) {
                    up.stats.count("recv");
                }
                self.vreq = Some(up.irecv_raw(lh, self.src, self.tag, self.vcomm)?);
                Ok(None)
            }
            Some(v) => up.complete_internal(lh, v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Part {
    Contribution,
    Block(u32),
    Result,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Move {
    Send { to: u32, part: Part },
    Recv { from: u32 },
}

/// Point-to-point schedule emulating `kind` at local rank `me` of `n`.
/// Gather-based kinds use local rank 0 as the hub.
fn plan(kind: CollectiveKind, me: u32, n: u32) -> Vec<Move> {
    let others = || (0..n).filter(move |&j| j != me);
    match kind {
        CollectiveKind::Barrier | CollectiveKind::Allreduce(_) => {
            if me == 0 {
                others()
                    .map(|from| Move::Recv { from })
                    .chain(others().map(|to| Move::Send { to, part: Part::Result }))
                    .collect()
            } else {
                vec![
                    Move::Send {
                        to: 0,
                        part: Part::Contribution,
                    },
                    Move::Recv { from: 0 },
                ]
            }
        }
        CollectiveKind::Bcast { root } => {
            if me == root {
                others()
                    .map(|to| Move::Send {
                        to,
                        part: Part::Contribution,
                    })
                    .collect()
            } else {
                vec![Move::Recv { from: root }]
            }
        }
        CollectiveKind::Alltoall => others()
            .map(|to| Move::Send {
                to,
                part: Part::Block(to),
            })
            .chain(others().map(|from| Move::Recv { from }))
            .collect(),
        CollectiveKind::Allgather => others()
            .map(|to| Move::Send {
                to,
                part: Part::Contribution,
            })
            .chain(others().map(|from| Move::Recv { from }))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum SubOp {
    Send(SendCall),
    Recv { from: u32, call: RecvCall },
}

/// A collective carried out with checkpoint-safe point-to-point calls on
/// a reserved tag. Produces the same bytes as the lower-half engine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Emulation {
    pub kind: CollectiveKind,
    pub vcomm: VirtualId,
    me: u32,
    n: u32,
    contribution: Vec<u8>,
    step: usize,
    op: Option<SubOp>,
    received: BTreeMap<u32, Vec<u8>>,
}

impl Emulation {
    pub fn new(up: &Upper, vcomm: VirtualId, kind: CollectiveKind, contribution: Vec<u8>) -> Result<Self> {
        up.check_contribution(vcomm, kind, &contribution)?;
        Ok(Emulation {
            kind,
            vcomm,
            me: up.comm_rank(vcomm)?,
            n: up.comm_size(vcomm)?,
            contribution,
            step: 0,
            op: None,
            received: BTreeMap::new(),
        })
    }

    /// Progress through the schedule, as a (completed moves, total) pair.
    pub fn progress(&self) -> (usize, usize) {
        (self.step, plan(self.kind, self.me, self.n).len())
    }

    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        match &self.op {
            None => Ok(true),
            Some(SubOp::Send(c)) => c.ready(up, lh),
            Some(SubOp::Recv { call, .. }) => call.ready(up, lh),
        }
    }

    fn contributions(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| {
                if i == self.me {
                    self.contribution.clone()
                } else {
                    self.received.get(&i).cloned().unwrap_or_default()
                }
            })
            .collect()
    }

    fn part(&self, part: Part) -> Result<Vec<u8>> {
        Ok(match part {
            Part::Contribution => self.contribution.clone(),
            Part::Block(j) => {
                let b = self.contribution.len() / self.n as usize;
                self.contribution[j as usize * b..(j as usize + 1) * b].to_vec()
            }
            Part::Result => results(self.kind, &self.contributions())?[0].clone(),
        })
    }

    fn result(&self) -> Result<Vec<u8>> {
        let me = self.me;
        match self.kind {
            CollectiveKind::Barrier => Ok(Vec::new()),
            CollectiveKind::Bcast { root } if root != me => Ok(self.received[&root].clone()),
            CollectiveKind::Bcast { .. } => Ok(self.contribution.clone()),
            CollectiveKind::Allreduce(_) if me != 0 => Ok(self.received[&0].clone()),
            CollectiveKind::Allreduce(_) => self.part(Part::Result),
            CollectiveKind::Alltoall => {
                let mut out = Vec::new();
                for i in 0..self.n {
                    if i == me {
                        out.extend(self.part(Part::Block(me))?);
                    } else {
                        out.extend_from_slice(&self.received[&i]);
                    }
                }
                Ok(out)
            }
            CollectiveKind::Allgather => Ok(self.contributions().concat()),
        }
    }

    pub fn poll(&mut self, up: &mut Upper, lh: &mut LowerHalf) -> Result<Option<Vec<u8>>> {
        let moves = plan(self.kind, self.me, self.n);
        loop {
            match &mut self.op {
                Some(SubOp::Send(c)) => {
                    if c.poll(up, lh)?.is_none() {
                        return Ok(None);
                    }
                    self.op = None;
                    self.step += 1;
                }
                Some(SubOp::Recv { from, call }) => {
                    let from = *from;
                    let Some(done) = call.poll(up, lh)? else {
                        return Ok(None);
                    };
                    self.received.insert(from, done.data.unwrap_or_default());
                    self.op = None;
                    self.step += 1;
                }
                None => {}
            }
            let Some(&mv) = moves.get(self.step) else {
                return self.result().map(Some);
            };
            self.op = Some(match mv {
                Move::Send { to, part } => SubOp::Send(SendCall::new(to, EMULATION_TAG, self.vcomm, self.part(part)?)),
                Move::Recv { from } => SubOp::Recv {
                    from,
                    call: RecvCall::new(Source::Rank(from), TagSel::Tag(EMULATION_TAG), self.vcomm),
                },
            });
        }
    }
}

/// Where a blocking collective is.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CollStage {
    Arrive,
    /// Naive mode: waiting on the inserted checkpoint-safe barrier.
    NaiveBarrier {
        vreq: VirtualId,
        key: CollKey,
    },
    /// Blocked inside the lower half.
    Real {
        req: RealRequest,
        key: CollKey,
    },
    Emulating {
        key: CollKey,
        emu: Emulation,
    },
}

/// Blocking collective wrapper.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CollectiveCall {
    pub vcomm: VirtualId,
    pub kind: CollectiveKind,
    contribution: Vec<u8>,
    pub stage: CollStage,
}

impl CollectiveCall {
    pub fn new(vcomm: VirtualId, kind: CollectiveKind, contribution: Vec<u8>) -> Self {
        CollectiveCall {
            vcomm,
            kind,
            contribution,
            stage: CollStage::Arrive,
        }
    }

    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        match &self.stage {
            CollStage::Arrive => Ok(true),
            CollStage::NaiveBarrier { vreq, .. } => up.is_ready(lh, *vreq),
            CollStage::Real { req, .. } => lh.is_complete(*req),
            CollStage::Emulating { emu, .. } => emu.ready(up, lh),
        }
    }

    pub fn is_emulating(&self) -> bool {
        matches!(self.stage, CollStage::Emulating { .. })
    }

    fn enter_real(&mut self, up: &mut Upper, lh: &mut LowerHalf, key: CollKey) -> Result<Option<Vec<u8>>> {
        let contribution = std::mem::take(&mut self.contribution);
        match up.enter_collective(lh, self.vcomm, self.kind, contribution, key)? {
            CollectiveStart::Completed(data) => Ok(Some(data)),
            CollectiveStart::Blocked(req) => {
                self.stage = CollStage::Real { req, key };
                Ok(None)
            }
        }
    }

    /// One step. `active` tells whether some member is already committed
    /// to the real path for an instance.
    pub fn poll(
        &mut self,
        up: &mut Upper,
        lh: &mut LowerHalf,
        mode: Mode,
        active: &dyn Fn(&CollKey) -> bool,
    ) -> Result<Option<Vec<u8>>> {
        match &mut self.stage {
            CollStage::Arrive => {
                up.stats.count(self.kind.name());
                up.check_contribution(self.vcomm, self.kind, &self.contribution)?;
                let (key, floor) = up.next_collective_key(self.vcomm)?;
                let emulate = match mode {
                    Mode::P2pEmulation => true,
                    Mode::NaiveBarrier => false,
                    Mode::Hybrid2pc => floor || (up.ctx.ckpt_pending && !active(&key)),
                };
                if mode == Mode::NaiveBarrier {
                    up.stats.barrier_insertions += 1;
                    let vreq = up.icollective_raw(lh, self.vcomm, CollectiveKind::Barrier, Vec::new(), None)?;
                    self.stage = CollStage::NaiveBarrier { vreq, key };
                    return Ok(None);
                }
                if emulate {
                    up.stats.emulated_collectives += 1;
                    let emu = Emulation::new(up, self.vcomm, self.kind, std::mem::take(&mut self.contribution))?;
                    self.stage = CollStage::Emulating { key, emu };
                    return self.poll(up, lh, mode, active);
                }
                self.enter_real(up, lh, key)
            }
            CollStage::NaiveBarrier { vreq, key } => {
                let (vreq, key) = (*vreq, *key);
                if up.complete_internal(lh, vreq)?.is_none() {
                    return Ok(None);
                }
                self.enter_real(up, lh, key)
            }
            CollStage::Real { req, .. } => up.poll_collective(lh, *req),
            CollStage::Emulating { emu, .. } => emu.poll(up, lh),
        }
    }
}

/// Communicator split: an allgather of (color, key) followed by a local
/// creation over the members sharing this process's color. A negative
/// color takes no part in any new communicator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitCall {
    pub parent: VirtualId,
    pub color: i64,
    pub key: i64,
    pub gather: CollectiveCall,
}

impl SplitCall {
    pub fn new(parent: VirtualId, color: i64, key: i64) -> Self {
        let mut contribution = Vec::with_capacity(16);
        contribution.extend_from_slice(&color.to_le_bytes());
        contribution.extend_from_slice(&key.to_le_bytes());
        SplitCall {
            parent,
            color,
            key,
            gather: CollectiveCall::new(parent, CollectiveKind::Allgather, contribution),
        }
    }

    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        self.gather.ready(up, lh)
    }

    pub fn poll(
        &mut self,
        up: &mut Upper,
        lh: &mut LowerHalf,
        mode: Mode,
        active: &dyn Fn(&CollKey) -> bool,
    ) -> Result<Option<Option<VirtualId>>> {
        let Some(data) = self.gather.poll(up, lh, mode, active)? else {
            return Ok(None);
        };
        up.stats.count("comm_split");
        if self.color < 0 {
            return Ok(Some(None));
        }
        let entries: Vec<(i64, i64)> = data
            .chunks_exact(16)
            .map(|c| {
                (
                    i64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    i64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        let parent = up.descriptor(self.parent)?.members.clone();
        let members = split_members(&parent, &entries, self.color);
        up.create_comm_from_members(lh, members).map(|v| Some(Some(v)))
    }
}

// ---- encodings -----------------------------------------------------------------

impl Encode for SendCall {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.dst)
            .i32(self.tag)
            .put(&self.vcomm)
            .bytes(&self.payload)
            .opt(&self.vreq);
    }
}

impl Decode for SendCall {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(SendCall {
            dst: r.u32()?,
            tag: r.i32()?,
            vcomm: r.get()?,
            payload: r.bytes()?,
            vreq: r.opt()?,
        })
    }
}

impl Encode for RecvCall {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.src).put(&self.tag).put(&self.vcomm).opt(&self.vreq);
    }
}

impl Decode for RecvCall {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(RecvCall {
            src: r.get()?,
            tag: r.get()?,
            vcomm: r.get()?,
            vreq: r.opt()?,
        })
    }
}

impl Encode for Emulation {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.kind)
            .put(&self.vcomm)
            .u32(self.me)
            .u32(self.n)
            .bytes(&self.contribution)
            .u64(self.step as u64);
        match &self.op {
            None => w.u8(0),
            Some(SubOp::Send(c)) => w.u8(1).put(c),
            Some(SubOp::Recv { from, call }) => w.u8(2).u32(*from).put(call),
        };
        let received: Vec<(u32, Vec<u8>)> = self.received.clone().into_iter().collect();
        w.seq(&received);
    }
}

impl Decode for Emulation {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let kind = r.get()?;
        let vcomm = r.get()?;
        let me = r.u32()?;
        let n = r.u32()?;
        let contribution = r.bytes()?;
        let step = r.u64()? as usize;
        let op = match r.u8()? {
            0 => None,
            1 => Some(SubOp::Send(r.get()?)),
            2 => Some(SubOp::Recv {
                from: r.u32()?,
                call: r.get()?,
            }),
            v => return Err(r.invalid(format!("bad emulation sub-op {v}"))),
        };
        let received: Vec<(u32, Vec<u8>)> = r.seq()?;
        if me >= n || step > plan(kind, me, n).len() {
            return Err(r.invalid("emulation position out of range"));
        }
        Ok(Emulation {
            kind,
            vcomm,
            me,
            n,
            contribution,
            step,
            op,
            received: received.into_iter().collect(),
        })
    }
}

impl Encode for CollectiveCall {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.vcomm).put(&self.kind).bytes(&self.contribution);
        match &self.stage {
            CollStage::Arrive => w.u8(0),
            CollStage::NaiveBarrier { vreq, key } => w.u8(1).put(vreq).put(key),
            // Never written: images are only taken outside the lower half.
            CollStage::Real { key, .. } => w.u8(2).put(key),
            CollStage::Emulating { key, emu } => w.u8(3).put(key).put(emu),
        };
    }
}

impl Decode for CollectiveCall {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let vcomm = r.get()?;
        let kind = r.get()?;
        let contribution = r.bytes()?;
        let stage = match r.u8()? {
            0 => CollStage::Arrive,
            1 => CollStage::NaiveBarrier {
                vreq: r.get()?,
                key: r.get()?,
            },
            2 => return Err(r.invalid("process recorded inside a lower-half collective")),
            3 => CollStage::Emulating {
                key: r.get()?,
                emu: r.get()?,
            },
            v => return Err(r.invalid(format!("bad collective stage {v}"))),
        };
        Ok(CollectiveCall {
            vcomm,
            kind,
            contribution,
            stage,
        })
    }
}

impl Encode for SplitCall {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.parent).i64(self.color).i64(self.key).put(&self.gather);
    }
}

impl Decode for SplitCall {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(SplitCall {
            parent: r.get()?,
            color: r.i64()?,
            key: r.i64()?,
            gather: r.get()?,
        })
    }
}
