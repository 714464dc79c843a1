//! The serializable pieces of a process's wrapper state.

use std::collections::BTreeMap;

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::Result;
use crate::hash::fnv1a64;
use crate::runtime::{CollectiveKind, Rank, ReduceOp, Source, Status, TagSel};

use super::vtable::VirtualId;

/// Communicator identity shared by all members: FNV-1a-64 over the sorted
/// member world ranks, each as 4 little-endian bytes.
pub fn gid_of(members: &[Rank]) -> u64 {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let bytes: Vec<u8> = sorted.iter().flat_map(|m| m.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

/// Per-peer counters held by one process: its row of the sent matrix and
/// its column of the received matrix. Bytes and envelope counts are both
/// kept so zero-byte messages are accounted for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PairCounters {
    pub sent_bytes: Vec<u64>,
    pub sent_msgs: Vec<u64>,
    pub recv_bytes: Vec<u64>,
    pub recv_msgs: Vec<u64>,
}

impl PairCounters {
    pub fn new(n: usize) -> Self {
        PairCounters {
            sent_bytes: vec![0; n],
            sent_msgs: vec![0; n],
            recv_bytes: vec![0; n],
            recv_msgs: vec![0; n],
        }
    }

    pub fn record_send(&mut self, dst: Rank, bytes: usize) {
        self.sent_bytes[dst as usize] += bytes as u64;
        self.sent_msgs[dst as usize] += 1;
    }

    pub fn record_recv(&mut self, src: Rank, bytes: usize) {
        self.recv_bytes[src as usize] += bytes as u64;
        self.recv_msgs[src as usize] += 1;
    }
}

impl Encode for PairCounters {
    fn encode(&self, w: &mut Writer) {
        w.seq(&self.sent_bytes)
            .seq(&self.sent_msgs)
            .seq(&self.recv_bytes)
            .seq(&self.recv_msgs);
    }
}

impl Decode for PairCounters {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let c = PairCounters {
            sent_bytes: r.seq()?,
            sent_msgs: r.seq()?,
            recv_bytes: r.seq()?,
            recv_msgs: r.seq()?,
        };
        let n = c.sent_bytes.len();
        if [c.sent_msgs.len(), c.recv_bytes.len(), c.recv_msgs.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(r.invalid("counter vectors of differing lengths"));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Send,
    Recv,
}

/// One live non-blocking point-to-point request.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct P2pRecord {
    pub vreq: VirtualId,
    pub dir: Direction,
    /// Destination for sends, source selector for receives (world ranks).
    pub peer: Source,
    pub tag: TagSel,
    pub vcomm: VirtualId,
    /// Payload length for sends, received length once a receive completes.
    pub bytes: u64,
    pub completed: bool,
    /// Whether the application has seen the completion (step A of retirement).
    pub observed: bool,
    pub status: Option<Status>,
    /// Received data held until the application observes the completion.
    pub payload: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplayEntry {
    pub vreq: VirtualId,
    pub kind: CollectiveKind,
    pub vcomm: VirtualId,
    /// Kept in full so the call can be re-issued after restart.
    pub contribution: Vec<u8>,
    pub digest: u64,
    pub completed: bool,
    /// Instance key, absent for internal checkpoint traffic.
    pub key: Option<CollKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CommDescriptor {
    pub vid: VirtualId,
    /// World ranks in local-rank order.
    pub members: Vec<Rank>,
    pub gid: u64,
    /// How many earlier communicators with the same gid this process created.
    pub ordinal: u32,
}

impl CommDescriptor {
    pub fn local_of(&self, world: Rank) -> Option<u32> {
        self.members.iter().position(|&m| m == world).map(|i| i as u32)
    }

    pub fn world_of(&self, local: u32) -> Option<Rank> {
        self.members.get(local as usize).copied()
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Key that identifies the communicator across processes and epochs.
    pub fn identity(&self) -> (u64, u32) {
        (self.gid, self.ordinal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupDescriptor {
    pub vid: VirtualId,
    pub members: Vec<Rank>,
}

/// Communicators and groups not yet freed. Membership alone is enough to
/// rebuild each one; how it was created is not recorded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveCommList {
    pub world: CommDescriptor,
    pub comms: BTreeMap<VirtualId, CommDescriptor>,
    pub groups: BTreeMap<VirtualId, GroupDescriptor>,
}

impl ActiveCommList {
    pub fn comm(&self, vid: VirtualId) -> Option<&CommDescriptor> {
        if vid == self.world.vid {
            Some(&self.world)
        } else {
            self.comms.get(&vid)
        }
    }

    pub fn all_comms(&self) -> impl Iterator<Item = &CommDescriptor> {
        std::iter::once(&self.world).chain(self.comms.values())
    }
}

/// A message pulled off the network during a drain, replayed to the
/// application before any network receive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DrainedBuffer {
    pub src: Rank,
    pub tag: i32,
    /// Identity of the communicator it was sent on.
    pub gid: u64,
    pub ordinal: u32,
    /// That communicator at the receiver, if the receiver has created it
    /// and not freed it.
    pub vcomm: Option<VirtualId>,
    pub payload: Vec<u8>,
}

/// Identity of one collective instance: communicator identity plus the
/// per-communicator call sequence number, equal at every member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CollKey {
    pub gid: u64,
    pub ordinal: u32,
    pub seq: u64,
}

// ---- encodings -----------------------------------------------------------

impl Encode for Source {
    fn encode(&self, w: &mut Writer) {
        match self {
            Source::Any => w.u8(0),
            Source::Rank(r) => w.u8(1).u32(*r),
        };
    }
}

impl Decode for Source {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => Ok(Source::Any),
            1 => Ok(Source::Rank(r.u32()?)),
            v => Err(r.invalid(format!("bad source tag {v}"))),
        }
    }
}

impl Encode for TagSel {
    fn encode(&self, w: &mut Writer) {
        match self {
            TagSel::Any => w.u8(0),
            TagSel::Tag(t) => w.u8(1).i32(*t),
        };
    }
}

impl Decode for TagSel {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => Ok(TagSel::Any),
            1 => Ok(TagSel::Tag(r.i32()?)),
            v => Err(r.invalid(format!("bad tag selector {v}"))),
        }
    }
}

impl Encode for Status {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.src).i32(self.tag).u64(self.bytes as u64);
    }
}

impl Decode for Status {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Status {
            src: r.u32()?,
            tag: r.i32()?,
            bytes: r.u64()? as usize,
        })
    }
}

impl Encode for CollectiveKind {
    fn encode(&self, w: &mut Writer) {
        match self {
            CollectiveKind::Barrier => w.u8(0),
            CollectiveKind::Bcast { root } => w.u8(1).u32(*root),
            CollectiveKind::Allreduce(op) => w.u8(2).u8(op.code()),
            CollectiveKind::Alltoall => w.u8(3),
            CollectiveKind::Allgather => w.u8(4),
        };
    }
}

impl Decode for CollectiveKind {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            0 => CollectiveKind::Barrier,
            1 => CollectiveKind::Bcast { root: r.u32()? },
            2 => {
                let code = r.u8()?;
                CollectiveKind::Allreduce(
                    ReduceOp::from_code(code).ok_or_else(|| r.invalid(format!("bad reduce op {code}")))?,
                )
            }
            3 => CollectiveKind::Alltoall,
            4 => CollectiveKind::Allgather,
            v => return Err(r.invalid(format!("bad collective kind {v}"))),
        })
    }
}

impl Encode for Direction {
    fn encode(&self, w: &mut Writer) {
        w.u8(match self {
            Direction::Send => 0,
            Direction::Recv => 1,
        });
    }
}

impl Decode for Direction {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => Ok(Direction::Send),
            1 => Ok(Direction::Recv),
            v => Err(r.invalid(format!("bad direction {v}"))),
        }
    }
}

impl Encode for P2pRecord {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.vreq)
            .put(&self.dir)
            .put(&self.peer)
            .put(&self.tag)
            .put(&self.vcomm)
            .u64(self.bytes)
            .bool(self.completed)
            .bool(self.observed)
            .opt(&self.status)
            .opt(&self.payload);
    }
}

impl Decode for P2pRecord {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(P2pRecord {
            vreq: r.get()?,
            dir: r.get()?,
            peer: r.get()?,
            tag: r.get()?,
            vcomm: r.get()?,
            bytes: r.u64()?,
            completed: r.bool()?,
            observed: r.bool()?,
            status: r.opt()?,
            payload: r.opt()?,
        })
    }
}

impl Encode for ReplayEntry {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.vreq)
            .put(&self.kind)
            .put(&self.vcomm)
            .bytes(&self.contribution)
            .u64(self.digest)
            .bool(self.completed)
            .opt(&self.key);
    }
}

impl Decode for ReplayEntry {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let e = ReplayEntry {
            vreq: r.get()?,
            kind: r.get()?,
            vcomm: r.get()?,
            contribution: r.bytes()?,
            digest: r.u64()?,
            completed: r.bool()?,
            key: r.opt()?,
        };
        if fnv1a64(&e.contribution) != e.digest {
            return Err(r.invalid("replay entry digest does not match its contribution"));
        }
        Ok(e)
    }
}

impl Encode for CommDescriptor {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.vid).seq(&self.members).u64(self.gid).u32(self.ordinal);
    }
}

impl Decode for CommDescriptor {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let d = CommDescriptor {
            vid: r.get()?,
            members: r.seq()?,
            gid: r.u64()?,
            ordinal: r.u32()?,
        };
        if d.members.is_empty() || gid_of(&d.members) != d.gid {
            return Err(r.invalid("communicator gid does not match its membership"));
        }
        Ok(d)
    }
}

impl Encode for GroupDescriptor {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.vid).seq(&self.members);
    }
}

impl Decode for GroupDescriptor {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(GroupDescriptor {
            vid: r.get()?,
            members: r.seq()?,
        })
    }
}

impl Encode for DrainedBuffer {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.src)
            .i32(self.tag)
            .u64(self.gid)
            .u32(self.ordinal)
            .opt(&self.vcomm)
            .bytes(&self.payload);
    }
}

impl Decode for DrainedBuffer {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(DrainedBuffer {
            src: r.u32()?,
            tag: r.i32()?,
            gid: r.u64()?,
            ordinal: r.u32()?,
            vcomm: r.opt()?,
            payload: r.bytes()?,
        })
    }
}

impl Encode for CollKey {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.gid).u32(self.ordinal).u64(self.seq);
    }
}

impl Decode for CollKey {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(CollKey {
            gid: r.u64()?,
            ordinal: r.u32()?,
            seq: r.u64()?,
        })
    }
}
