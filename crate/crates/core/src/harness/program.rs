//! Per-process program interpreter.
//!
//! A workload is a pure function from (rank, round) to a list of [`Op`]s.
//! [`Proc`] walks that list one scheduler step at a time; all of its state
//! is plain data, so it doubles as the application state stored in a
//! checkpoint image.

use std::collections::BTreeMap;

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::hash::fnv1a64_extend;
use crate::interpose::{CollKey, CollStage, CollectiveCall, Mode, RecvCall, SendCall, SplitCall, Upper, VirtualId};
use crate::runtime::{CollectiveKind, LowerHalf, Rank, Source, TagSel};

use super::workloads::completion_digest;

/// Register naming a communicator or a request inside a program.
pub type Reg = u8;
/// Register holding the world communicator.
pub const WORLD: Reg = 0;

/// Source of the ops a process runs: a pure function of (rank, round).
pub trait Program {
    fn rounds(&self) -> u32;
    fn ops(&self, rank: Rank, round: u32) -> Vec<Op>;
}

/// One application-level call. Ranks are local to the communicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Send {
        dst: u32,
        tag: i32,
        comm: Reg,
        payload: Vec<u8>,
    },
    Recv {
        src: u32,
        tag: i32,
        comm: Reg,
        expect: Option<Vec<u8>>,
    },
    Isend {
        dst: u32,
        tag: i32,
        comm: Reg,
        payload: Vec<u8>,
        req: Reg,
    },
    Irecv {
        src: u32,
        tag: i32,
        comm: Reg,
        req: Reg,
    },
    /// Test loop on a request until it completes.
    Wait {
        req: Reg,
    },
    Coll {
        comm: Reg,
        kind: CollectiveKind,
        contribution: Vec<u8>,
        expect: Option<Vec<u8>>,
    },
    Icoll {
        comm: Reg,
        kind: CollectiveKind,
        contribution: Vec<u8>,
        req: Reg,
    },
    Split {
        parent: Reg,
        color: i64,
        key: i64,
        out: Reg,
    },
    /// Communicator over `members` (local ranks of `parent`) via a group.
    Create {
        parent: Reg,
        members: Vec<u32>,
        out: Reg,
    },
    Free {
        comm: Reg,
    },
    /// Local work taking `steps` scheduler steps.
    Compute {
        steps: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqKind {
    Send,
    Recv,
    Collective,
}

impl ReqKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [ReqKind::Send, ReqKind::Recv, ReqKind::Collective]
            .get(c as usize)
            .copied()
    }
}

/// The blocking call a process is inside of.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Call {
    Send(SendCall),
    Recv {
        call: RecvCall,
        expect: Option<Vec<u8>>,
    },
    Coll {
        call: CollectiveCall,
        expect: Option<Vec<u8>>,
    },
    Split {
        call: SplitCall,
        out: Reg,
    },
    Wait {
        req: Reg,
    },
    Compute {
        left: u32,
    },
}

impl Call {
    pub fn label(&self) -> String {
        match self {
            Call::Send(c) => format!("send(dst={}, tag={})", c.dst, c.tag),
            Call::Recv { call, .. } => format!("recv(src={:?}, tag={:?})", call.src, call.tag),
            Call::Coll { call, .. } => format!("{}({})", call.kind.name(), stage_name(&call.stage)),
            Call::Split { call, .. } => format!("comm_split({})", stage_name(&call.gather.stage)),
            Call::Wait { req } => format!("wait(r{req})"),
            Call::Compute { left } => format!("compute({left} left)"),
        }
    }

    pub fn is_emulating(&self) -> bool {
        match self {
            Call::Coll { call, .. } => call.is_emulating(),
            Call::Split { call, .. } => call.gather.is_emulating(),
            _ => false,
        }
    }
}

fn stage_name(s: &CollStage) -> &'static str {
    match s {
        CollStage::Arrive => "arriving",
        CollStage::NaiveBarrier { .. } => "inserted barrier",
        CollStage::Real { .. } => "real",
        CollStage::Emulating { .. } => "emulated",
    }
}

/// Observable result of one process: what the equivalence oracle compares.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct RankOutput {
    pub rank: Rank,
    /// Wrapping sum of the leading u64 of every received payload.
    pub sum: u64,
    /// Digest of every completion, in program order.
    pub results: Vec<u64>,
    pub mismatches: u32,
    pub first_mismatch: Option<String>,
}

impl RankOutput {
    pub fn digest(&self) -> u64 {
        self.results
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |h, r| fnv1a64_extend(h, &r.to_le_bytes()))
    }

    pub fn render(&self) -> String {
        format!(
            "rank={} completions={} sum={} digest={:016x} mismatches={}\n",
            self.rank,
            self.results.len(),
            self.sum,
            self.digest(),
            self.mismatches
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Proc {
    pub rank: Rank,
    pub round: u32,
    pub pc: u32,
    pub call: Option<Call>,
    pub comms: BTreeMap<Reg, VirtualId>,
    /// Outstanding non-blocking requests.
    pub reqs: BTreeMap<Reg, (VirtualId, ReqKind)>,
    pub out: RankOutput,
    pub done: bool,
    ops: OpCache,
}

/// Ops of the current round, regenerated on demand; not part of the state.
#[derive(Debug, Clone, Default)]
struct OpCache {
    round: Option<u32>,
    ops: Vec<Op>,
}

impl PartialEq for OpCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for OpCache {}

impl std::hash::Hash for OpCache {
    fn hash<H: std::hash::Hasher>(&self, _: &mut H) {}
}

impl Proc {
    pub fn new(rank: Rank, world: VirtualId) -> Self {
        Proc {
            rank,
            round: 0,
            pc: 0,
            call: None,
            comms: BTreeMap::from([(WORLD, world)]),
            reqs: BTreeMap::new(),
            out: RankOutput {
                rank,
                ..RankOutput::default()
            },
            done: false,
            ops: OpCache::default(),
        }
    }

    fn comm(&self, r: Reg) -> Result<VirtualId> {
        self.comms
            .get(&r)
            .copied()
            .ok_or_else(|| Error::InvalidOperation(format!("rank {}: communicator register {r} is empty", self.rank)))
    }

    fn fold(&mut self, data: &[u8], received: bool) {
        self.out.results.push(completion_digest(data));
        if received && data.len() >= 8 {
            let lead = u64::from_le_bytes(data[..8].try_into().expect("8 bytes"));
            self.out.sum = self.out.sum.wrapping_add(lead);
        }
    }

    fn check(&mut self, what: &str, got: &[u8], expect: &Option<Vec<u8>>) {
        if let Some(e) = expect {
            if e.as_slice() != got {
                self.out.mismatches += 1;
                if self.out.first_mismatch.is_none() {
                    self.out.first_mismatch = Some(format!(
                        "rank {} round {} {what}: expected {e:?}, got {got:?}",
                        self.rank, self.round
                    ));
                }
            }
        }
    }

    /// The op at the program counter, advancing rounds as needed. `None`
    /// once the program has finished.
    fn current_op(&mut self, w: &dyn Program) -> Option<Op> {
        loop {
            if self.round >= w.rounds() {
                return None;
            }
            if self.ops.round != Some(self.round) {
                self.ops = OpCache {
                    round: Some(self.round),
                    ops: w.ops(self.rank, self.round),
                };
            }
            if let Some(op) = self.ops.ops.get(self.pc as usize) {
                return Some(op.clone());
            }
            self.round += 1;
            self.pc = 0;
        }
    }

    fn advance(&mut self) {
        self.pc += 1;
    }

    /// Would a step make progress right now?
    pub fn ready(&self, up: &Upper, lh: &LowerHalf) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        match &self.call {
            None => Ok(true),
            Some(Call::Send(c)) => c.ready(up, lh),
            Some(Call::Recv { call, .. }) => call.ready(up, lh),
            Some(Call::Coll { call, .. }) => call.ready(up, lh),
            Some(Call::Split { call, .. }) => call.ready(up, lh),
            Some(Call::Wait { req }) => match self.reqs.get(req) {
                Some(&(v, _)) => up.is_ready(lh, v),
                None => Ok(true),
            },
            Some(Call::Compute { .. }) => Ok(true),
        }
    }

    /// One scheduler step.
    pub fn step(
        &mut self,
        w: &dyn Program,
        up: &mut Upper,
        lh: &mut LowerHalf,
        mode: Mode,
        active: &dyn Fn(&CollKey) -> bool,
    ) -> Result<()> {
        if self.done {
            return Ok(());
        }
        if self.call.is_none() {
            let Some(op) = self.current_op(w) else {
                self.done = true;
                return Ok(());
            };
            if let Some(call) = self.start(op, up, lh)? {
                self.call = Some(call);
            } else {
                self.advance();
                return Ok(());
            }
        }
        let mut call = self.call.take().expect("set above");
        let finished = match &mut call {
            Call::Send(c) => c.poll(up, lh)?.is_some(),
            Call::Recv { call, expect } => match call.poll(up, lh)? {
                Some(c) => {
                    let data = c.data.unwrap_or_default();
                    let expect = expect.take();
                    self.check("recv", &data, &expect);
                    self.fold(&data, true);
                    true
                }
                None => false,
            },
            Call::Coll { call, expect } => match call.poll(up, lh, mode, active)? {
                Some(data) => {
                    let expect = expect.take();
                    let what = call.kind.name();
                    self.check(what, &data, &expect);
                    self.fold(&data, false);
                    true
                }
                None => false,
            },
            Call::Split { call, out } => match call.poll(up, lh, mode, active)? {
                Some(made) => {
                    match made {
                        Some(v) => {
                            self.fold(&(up.comm_size(v)? as u64).to_le_bytes(), false);
                            self.comms.insert(*out, v);
                        }
                        None => {
                            self.comms.remove(out);
                        }
                    }
                    true
                }
                None => false,
            },
            Call::Wait { req } => {
                let req = *req;
                match self.reqs.get(&req).copied() {
                    None => true,
                    Some((v, kind)) => {
                        let mut slot = Some(v);
                        match up.wait_step(lh, &mut slot)? {
                            Some(c) => {
                                match kind {
                                    ReqKind::Recv => self.fold(&c.data.unwrap_or_default(), true),
                                    ReqKind::Collective => self.fold(&c.data.unwrap_or_default(), false),
                                    ReqKind::Send => {}
                                }
                                match slot {
                                    Some(v) => {
                                        self.reqs.insert(req, (v, kind));
                                    }
                                    None => {
                                        self.reqs.remove(&req);
                                    }
                                }
                                slot.is_none()
                            }
                            None => false,
                        }
                    }
                }
            }
            Call::Compute { left } => {
                *left = left.saturating_sub(1);
                *left == 0
            }
        };
        if finished {
            self.advance();
        } else {
            self.call = Some(call);
        }
        Ok(())
    }

    /// Runs a local op to completion, or turns a blocking one into a call.
    fn start(&mut self, op: Op, up: &mut Upper, lh: &mut LowerHalf) -> Result<Option<Call>> {
        Ok(match op {
            Op::Send {
                dst,
                tag,
                comm,
                payload,
            } => Some(Call::Send(SendCall::new(dst, tag, self.comm(comm)?, payload))),
            Op::Recv { src, tag, comm, expect } => Some(Call::Recv {
                call: RecvCall::new(Source::Rank(src), TagSel::Tag(tag), self.comm(comm)?),
                expect,
            }),
            Op::Isend {
                dst,
                tag,
                comm,
                payload,
                req,
            } => {
                let v = up.isend(lh, dst, tag, self.comm(comm)?, payload)?;
                self.reqs.insert(req, (v, ReqKind::Send));
                None
            }
            Op::Irecv { src, tag, comm, req } => {
                let v = up.irecv(lh, Source::Rank(src), TagSel::Tag(tag), self.comm(comm)?)?;
                self.reqs.insert(req, (v, ReqKind::Recv));
                None
            }
            Op::Wait { req } => Some(Call::Wait { req }),
            Op::Coll {
                comm,
                kind,
                contribution,
                expect,
            } => Some(Call::Coll {
                call: CollectiveCall::new(self.comm(comm)?, kind, contribution),
                expect,
            }),
            Op::Icoll {
                comm,
                kind,
                contribution,
                req,
            } => {
                let v = up.icollective(lh, self.comm(comm)?, kind, contribution)?;
                self.reqs.insert(req, (v, ReqKind::Collective));
                None
            }
            Op::Split {
                parent,
                color,
                key,
                out,
            } => Some(Call::Split {
                call: SplitCall::new(self.comm(parent)?, color, key),
                out,
            }),
            Op::Create { parent, members, out } => {
                let p = self.comm(parent)?;
                let g = up.comm_group(lh, p)?;
                let sub = up.group_incl(lh, g, &members)?;
                let made = up.comm_create(lh, p, sub)?;
                up.group_free(sub)?;
                up.group_free(g)?;
                if let Some(v) = made {
                    self.comms.insert(out, v);
                }
                None
            }
            Op::Free { comm } => {
                if let Some(v) = self.comms.remove(&comm) {
                    up.comm_free(v)?;
                }
                None
            }
            Op::Compute { steps } => (steps > 0).then_some(Call::Compute { left: steps }),
        })
    }
}

// ---- encodings -----------------------------------------------------------------

impl Encode for Call {
    fn encode(&self, w: &mut Writer) {
        match self {
            Call::Send(c) => w.u8(0).put(c),
            Call::Recv { call, expect } => w.u8(1).put(call).opt(expect),
            Call::Coll { call, expect } => w.u8(2).put(call).opt(expect),
            Call::Split { call, out } => w.u8(3).put(call).u8(*out),
            Call::Wait { req } => w.u8(4).u8(*req),
            Call::Compute { left } => w.u8(5).u32(*left),
        };
    }
}

impl Decode for Call {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            0 => Call::Send(r.get()?),
            1 => Call::Recv {
                call: r.get()?,
                expect: r.opt()?,
            },
            2 => Call::Coll {
                call: r.get()?,
                expect: r.opt()?,
            },
            3 => Call::Split {
                call: r.get()?,
                out: r.u8()?,
            },
            4 => Call::Wait { req: r.u8()? },
            5 => Call::Compute { left: r.u32()? },
            t => return Err(r.invalid(format!("call tag {t}"))),
        })
    }
}

impl Encode for Proc {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.rank)
            .u32(self.round)
            .u32(self.pc)
            .opt(&self.call)
            .bool(self.done);
        w.u64(self.comms.len() as u64);
        for (&r, v) in &self.comms {
            w.u8(r).put(v);
        }
        w.u64(self.reqs.len() as u64);
        for (&r, &(v, kind)) in &self.reqs {
            w.u8(r).put(&v).u8(kind.code());
        }
        w.u64(self.out.sum).u32(self.out.mismatches).seq(&self.out.results);
        match &self.out.first_mismatch {
            Some(m) => w.u8(1).str(m),
            None => w.u8(0),
        };
    }
}

impl Decode for Proc {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let rank = r.u32()?;
        let round = r.u32()?;
        let pc = r.u32()?;
        let call = r.opt()?;
        let done = r.bool()?;
        let mut comms = BTreeMap::new();
        for _ in 0..r.len()? {
            comms.insert(r.u8()?, r.get()?);
        }
        let mut reqs = BTreeMap::new();
        for _ in 0..r.len()? {
            let k = r.u8()?;
            let v = r.get()?;
            let kind = r.u8()?;
            let kind = ReqKind::from_code(kind).ok_or_else(|| r.invalid(format!("request kind {kind}")))?;
            reqs.insert(k, (v, kind));
        }
        let sum = r.u64()?;
        let mismatches = r.u32()?;
        let results = r.seq()?;
        let first_mismatch = match r.u8()? {
            0 => None,
            _ => Some(r.str()?),
        };
        Ok(Proc {
            rank,
            round,
            pc,
            call,
            comms,
            reqs,
            out: RankOutput {
                rank,
                sum,
                results,
                mismatches,
                first_mismatch,
            },
            done,
            ops: OpCache::default(),
        })
    }
}
