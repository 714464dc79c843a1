//! Per-process wrapper state and the non-blocking wrapper operations.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::runtime::{
    check_contribution, CollectiveKind, CollectiveStart, LowerHalf, Rank, RealComm, RealGroup, RealRequest, Source,
    Status, TagSel,
};

use super::state::{
    gid_of, ActiveCommList, CollKey, CommDescriptor, Direction, DrainedBuffer, GroupDescriptor, P2pRecord,
    PairCounters, ReplayEntry,
};
use super::vtable::{Binding, HandleKind, VirtualId, VirtualTable};

/// Flags the coordinator and the safety check look at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WrapperContext {
    /// Blocked inside a lower-half collective.
    pub in_lower_half: bool,
    pub ckpt_pending: bool,
    /// Lower-half calls made through this wrapper, accumulated across epochs.
    pub lh_entries: u64,
}

/// Wrapper-level counters for metrics. Not part of the checkpointed state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WrapperStats {
    pub calls: BTreeMap<&'static str, u64>,
    pub barrier_insertions: u64,
    pub real_collectives: u64,
    pub emulated_collectives: u64,
    pub request_high_water: usize,
}

impl WrapperStats {
    pub fn count(&mut self, kind: &'static str) {
        *self.calls.entry(kind).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &WrapperStats) {
        for (k, v) in &other.calls {
            *self.calls.entry(k).or_insert(0) += v;
        }
        self.barrier_insertions += other.barrier_insertions;
        self.real_collectives += other.real_collectives;
        self.emulated_collectives += other.emulated_collectives;
        self.request_high_water = self.request_high_water.max(other.request_high_water);
    }
}

/// What a process tells the coordinator while a checkpoint is pending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessReport {
    pub rank: Rank,
    pub in_collective: bool,
    /// Communicator of the collective the process is blocked in.
    pub gid: Option<u64>,
    pub safe: bool,
    /// Collective instances that must finish on the real path: the one the
    /// process is blocked in plus any bcast it rooted that some member has
    /// not reached yet.
    pub active: Vec<CollKey>,
}

/// A completion as the application sees it. `first` is false when the
/// completion was already reported by an earlier test.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Completion {
    pub first: bool,
    /// Source is a local rank of the receive's communicator.
    pub status: Option<Status>,
    pub data: Option<Vec<u8>>,
}

/// Reserved tag of point-to-point traffic that emulates collectives.
pub const EMULATION_TAG: i32 = -2;

/// The upper half of one process.
#[derive(Debug, Clone)]
pub struct Upper {
    rank: Rank,
    size: usize,
    pub(crate) requests: VirtualTable<RealRequest>,
    pub(crate) comms: VirtualTable<RealComm>,
    pub(crate) groups: VirtualTable<RealGroup>,
    pub(crate) counters: PairCounters,
    pub(crate) p2p: BTreeMap<VirtualId, P2pRecord>,
    pub(crate) replay: Vec<ReplayEntry>,
    pub(crate) active: ActiveCommList,
    pub(crate) drained: Vec<DrainedBuffer>,
    /// Results of non-blocking collectives completed during a drain sweep.
    pub(crate) coll_results: BTreeMap<VirtualId, Vec<u8>>,
    /// Collective calls made so far per communicator identity.
    pub(crate) coll_seq: BTreeMap<(u64, u32), u64>,
    /// Communicators created so far per gid.
    pub(crate) gid_ordinals: BTreeMap<u64, u32>,
    /// Collective instances below these sequence numbers were started on
    /// the emulated path by some member and must be emulated here too.
    pub(crate) emulation_floor: BTreeMap<(u64, u32), u64>,
    unsettled: Vec<(CollKey, RealRequest)>,
    current: Option<CollKey>,
    real_index: BTreeMap<u32, VirtualId>,
    pub ctx: WrapperContext,
    pub stats: WrapperStats,
}

impl Upper {
    /// Wrapper state for process `rank` of a fresh run.
    pub fn init(lh: &mut LowerHalf, rank: Rank) -> Result<Self> {
        let size = lh.size();
        if rank as usize >= size {
            return Err(Error::InvalidRank {
                rank: i64::from(rank),
                size,
            });
        }
        let mut comms = VirtualTable::new(HandleKind::Comm);
        let world = lh.world();
        let members = lh.translate_group_ranks(rank, world)?;
        let vid = comms.insert(world);
        let gid = gid_of(&members);
        let mut up = Upper {
            rank,
            size,
            requests: VirtualTable::new(HandleKind::Request),
            comms,
            groups: VirtualTable::new(HandleKind::Group),
            counters: PairCounters::new(size),
            p2p: BTreeMap::new(),
            replay: Vec::new(),
            active: ActiveCommList {
                world: CommDescriptor {
                    vid,
                    members,
                    gid,
                    ordinal: 0,
                },
                comms: BTreeMap::new(),
                groups: BTreeMap::new(),
            },
            drained: Vec::new(),
            coll_results: BTreeMap::new(),
            coll_seq: BTreeMap::new(),
            gid_ordinals: BTreeMap::from([(gid, 1)]),
            emulation_floor: BTreeMap::new(),
            unsettled: Vec::new(),
            current: None,
            real_index: BTreeMap::from([(world.id, vid)]),
            ctx: WrapperContext::default(),
            stats: WrapperStats::default(),
        };
        up.ctx.lh_entries += 1;
        Ok(up)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        rank: Rank,
        size: usize,
        requests: VirtualTable<RealRequest>,
        comms: VirtualTable<RealComm>,
        groups: VirtualTable<RealGroup>,
        counters: PairCounters,
        p2p: BTreeMap<VirtualId, P2pRecord>,
        replay: Vec<ReplayEntry>,
        active: ActiveCommList,
        drained: Vec<DrainedBuffer>,
        coll_results: BTreeMap<VirtualId, Vec<u8>>,
        coll_seq: BTreeMap<(u64, u32), u64>,
        gid_ordinals: BTreeMap<u64, u32>,
        emulation_floor: BTreeMap<(u64, u32), u64>,
    ) -> Self {
        Upper {
            rank,
            size,
            requests,
            comms,
            groups,
            counters,
            p2p,
            replay,
            active,
            drained,
            coll_results,
            coll_seq,
            gid_ordinals,
            emulation_floor,
            unsettled: Vec::new(),
            current: None,
            real_index: BTreeMap::new(),
            ctx: WrapperContext::default(),
            stats: WrapperStats::default(),
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn world(&self) -> VirtualId {
        self.active.world.vid
    }

    pub fn counters(&self) -> &PairCounters {
        &self.counters
    }

    pub fn p2p_records(&self) -> impl Iterator<Item = &P2pRecord> {
        self.p2p.values()
    }

    pub fn replay_log(&self) -> &[ReplayEntry] {
        &self.replay
    }

    pub fn active_comms(&self) -> &ActiveCommList {
        &self.active
    }

    pub fn drained(&self) -> &[DrainedBuffer] {
        &self.drained
    }

    pub fn request_table_len(&self) -> usize {
        self.requests.len()
    }

    pub fn comm_table_len(&self) -> usize {
        self.comms.len()
    }

    pub fn group_table_len(&self) -> usize {
        self.groups.len()
    }

    pub fn request_binding(&self, vid: VirtualId) -> Result<Binding<RealRequest>> {
        self.requests.get(vid)
    }

    pub fn emulation_floors(&self) -> &BTreeMap<(u64, u32), u64> {
        &self.emulation_floor
    }

    fn lh(&mut self) {
        self.ctx.lh_entries += 1;
    }

    fn note_request_count(&mut self) {
        self.stats.request_high_water = self.stats.request_high_water.max(self.requests.len());
    }

    // ---- communicator lookups (local only) ---------------------------------

    pub fn descriptor(&self, vcomm: VirtualId) -> Result<&CommDescriptor> {
        self.active.comm(vcomm).ok_or(Error::UnknownVirtualHandle {
            kind: HandleKind::Comm.name(),
            id: vcomm.0,
        })
    }

    /// Globally unique communicator id, computed from local state only.
    pub fn comm_gid(&self, vcomm: VirtualId) -> Result<u64> {
        Ok(self.descriptor(vcomm)?.gid)
    }

    pub fn comm_size(&self, vcomm: VirtualId) -> Result<u32> {
        Ok(self.descriptor(vcomm)?.size() as u32)
    }

    pub fn comm_rank(&self, vcomm: VirtualId) -> Result<u32> {
        let d = self.descriptor(vcomm)?;
        d.local_of(self.rank).ok_or_else(|| {
            Error::ProtocolViolation(format!("rank {} is not in its own communicator {vcomm}", self.rank))
        })
    }

    fn real_comm(&self, vcomm: VirtualId) -> Result<RealComm> {
        self.descriptor(vcomm)?;
        self.comms.real(vcomm)
    }

    /// Virtual communicator bound to a real communicator id of this epoch.
    pub fn vcomm_of_real(&self, real_id: u32) -> Option<VirtualId> {
        self.real_index.get(&real_id).copied()
    }

    fn world_of(&self, vcomm: VirtualId, local: u32) -> Result<Rank> {
        let d = self.descriptor(vcomm)?;
        d.world_of(local).ok_or(Error::InvalidRank {
            rank: i64::from(local),
            size: d.size(),
        })
    }

    fn localize(&self, vcomm: VirtualId, status: Status) -> Status {
        let src = self
            .descriptor(vcomm)
            .ok()
            .and_then(|d| d.local_of(status.src))
            .unwrap_or(status.src);
        Status { src, ..status }
    }

    // ---- point-to-point ------------------------------------------------------

    /// Application non-blocking send. Tags must be non-negative.
    pub fn isend(
        &mut self,
        lh: &mut LowerHalf,
        dst: u32,
        tag: i32,
        vcomm: VirtualId,
        payload: Vec<u8>,
    ) -> Result<VirtualId> {
        if tag < 0 {
            return Err(Error::InvalidOperation(format!("negative application tag {tag}")));
        }
        self.stats.count("isend");
        self.isend_raw(lh, dst, tag, vcomm, payload)
    }

    pub(crate) fn isend_raw(
        &mut self,
        lh: &mut LowerHalf,
        dst: u32,
        tag: i32,
        vcomm: VirtualId,
        payload: Vec<u8>,
    ) -> Result<VirtualId> {
        let real_comm = self.real_comm(vcomm)?;
        let dst_world = self.world_of(vcomm, dst)?;
        let bytes = payload.len();
        self.lh();
        let real = lh.isend(self.rank, dst_world, tag, real_comm, payload)?;
        self.counters.record_send(dst_world, bytes);
        let vid = self.requests.insert(real);
        self.p2p.insert(
            vid,
            P2pRecord {
                vreq: vid,
                dir: Direction::Send,
                peer: Source::Rank(dst_world),
                tag: TagSel::Tag(tag),
                vcomm,
                bytes: bytes as u64,
                completed: false,
                observed: false,
                status: None,
                payload: None,
            },
        );
        self.note_request_count();
        Ok(vid)
    }

    /// Application non-blocking receive; `src` is a local rank.
    pub fn irecv(&mut self, lh: &mut LowerHalf, src: Source, tag: TagSel, vcomm: VirtualId) -> Result<VirtualId> {
        self.stats.count("irecv");
        self.irecv_raw(lh, src, tag, vcomm)
    }

    pub(crate) fn irecv_raw(
        &mut self,
        lh: &mut LowerHalf,
        src: Source,
        tag: TagSel,
        vcomm: VirtualId,
    ) -> Result<VirtualId> {
        self.real_comm(vcomm)?;
        let peer = match src {
            Source::Any => Source::Any,
            Source::Rank(l) => Source::Rank(self.world_of(vcomm, l)?),
        };
        let vid = self.requests.insert_null();
        self.p2p.insert(
            vid,
            P2pRecord {
                vreq: vid,
                dir: Direction::Recv,
                peer,
                tag,
                vcomm,
                bytes: 0,
                completed: false,
                observed: false,
                status: None,
                payload: None,
            },
        );
        self.post_recv(lh, vid)?;
        self.note_request_count();
        Ok(vid)
    }

    /// Binds receive record `vid` to a drained buffer if one matches, and
    /// to a fresh lower-half receive otherwise.
    pub(crate) fn post_recv(&mut self, lh: &mut LowerHalf, vid: VirtualId) -> Result<()> {
        let rec = self
            .p2p
            .get(&vid)
            .cloned()
            .ok_or_else(|| Error::ProtocolViolation(format!("request {vid} has no receive record")))?;
        let buffered = self
            .drained
            .iter()
            .position(|b| b.vcomm == Some(rec.vcomm) && rec.peer.admits(b.src) && rec.tag.admits(b.tag));
        if let Some(i) = buffered {
            let buf = self.drained.remove(i);
            let status = Status {
                src: buf.src,
                tag: buf.tag,
                bytes: buf.payload.len(),
            };
            self.counters.record_recv(buf.src, buf.payload.len());
            self.requests.set_null(vid)?;
            let rec = self.p2p.get_mut(&vid).expect("checked above");
            rec.completed = true;
            rec.bytes = status.bytes as u64;
            rec.status = Some(status);
            rec.payload = Some(buf.payload);
            return Ok(());
        }
        let real_comm = self.real_comm(rec.vcomm)?;
        self.lh();
        let real = lh.irecv(self.rank, rec.peer, rec.tag, real_comm)?;
        self.requests.rebind(vid, real)
    }

    /// Non-destructive: would testing `vid` report completion now?
    pub fn is_ready(&self, lh: &LowerHalf, vid: VirtualId) -> Result<bool> {
        match self.requests.get(vid)? {
            Binding::Null => Ok(true),
            Binding::Real(r) => lh.is_complete(r),
        }
    }

    pub fn slot_ready(&self, lh: &LowerHalf, slot: Option<VirtualId>) -> Result<bool> {
        match slot {
            None => Ok(true),
            Some(v) => self.is_ready(lh, v),
        }
    }

    fn replay_index(&self, vid: VirtualId) -> Option<usize> {
        self.replay.iter().position(|e| e.vreq == vid)
    }

    /// Marks a replay entry completed; completed entries are pruned.
    fn finish_replay(&mut self, vid: VirtualId) {
        if let Some(i) = self.replay_index(vid) {
            self.replay[i].completed = true;
        }
        self.replay.retain(|e| !e.completed);
    }

    fn note_recv(&mut self, vid: VirtualId, status: Status) {
        self.counters.record_recv(status.src, status.bytes);
        if let Some(rec) = self.p2p.get_mut(&vid) {
            rec.bytes = status.bytes as u64;
            rec.status = Some(status);
        }
    }

    /// Application-level test with two-step retirement for point-to-point
    /// requests: the completing test repoints the entry to the null
    /// sentinel (step A), the next test removes it and clears `slot`
    /// (step B). Non-blocking collectives retire on the completing test.
    pub fn test(&mut self, lh: &mut LowerHalf, slot: &mut Option<VirtualId>) -> Result<Option<Completion>> {
        self.stats.count("test");
        let Some(vid) = *slot else {
            return Ok(Some(Completion::default()));
        };
        match self.requests.get(vid)? {
            Binding::Real(real) => {
                self.lh();
                let out = lh.test(self.rank, real)?;
                if !out.done {
                    return Ok(None);
                }
                if self.replay_index(vid).is_some() {
                    self.finish_replay(vid);
                    self.requests.remove(vid)?;
                    *slot = None;
                    return Ok(Some(Completion {
                        first: true,
                        status: None,
                        data: out.data,
                    }));
                }
                self.requests.set_null(vid)?;
                if let Some(st) = out.status {
                    self.note_recv(vid, st);
                }
                let rec = self
                    .p2p
                    .get_mut(&vid)
                    .ok_or_else(|| Error::ProtocolViolation(format!("request {vid} has no active record")))?;
                rec.completed = true;
                rec.observed = true;
                let vcomm = rec.vcomm;
                Ok(Some(Completion {
                    first: true,
                    status: out.status.map(|s| self.localize(vcomm, s)),
                    data: out.data,
                }))
            }
            Binding::Null => {
                if let Some(data) = self.coll_results.remove(&vid) {
                    self.finish_replay(vid);
                    self.requests.remove(vid)?;
                    *slot = None;
                    return Ok(Some(Completion {
                        first: true,
                        status: None,
                        data: Some(data),
                    }));
                }
                let rec = self
                    .p2p
                    .get(&vid)
                    .cloned()
                    .ok_or_else(|| Error::ProtocolViolation(format!("null request {vid} has no active record")))?;
                if !rec.observed {
                    // Completed where the application's slot was not at hand
                    // (drain sweep or buffered receive): report it now and
                    // leave the entry for the retiring test.
                    let r = self.p2p.get_mut(&vid).expect("present");
                    r.observed = true;
                    let data = r.payload.take();
                    return Ok(Some(Completion {
                        first: true,
                        status: rec.status.map(|s| self.localize(rec.vcomm, s)),
                        data: data.or(match rec.dir {
                            Direction::Recv => Some(Vec::new()),
                            Direction::Send => None,
                        }),
                    }));
                }
                self.p2p.remove(&vid);
                self.requests.remove(vid)?;
                *slot = None;
                Ok(Some(Completion {
                    first: false,
                    status: rec.status.map(|s| self.localize(rec.vcomm, s)),
                    data: None,
                }))
            }
        }
    }

    /// One wait iteration: a test, followed on completion by the retiring
    /// test since the slot is at hand.
    pub fn wait_step(&mut self, lh: &mut LowerHalf, slot: &mut Option<VirtualId>) -> Result<Option<Completion>> {
        let Some(done) = self.test(lh, slot)? else {
            return Ok(None);
        };
        if slot.is_some() {
            self.test(lh, slot)?;
        }
        Ok(Some(done))
    }

    /// Completion of a wrapper-internal request; retires immediately.
    pub(crate) fn complete_internal(&mut self, lh: &mut LowerHalf, vid: VirtualId) -> Result<Option<Completion>> {
        match self.requests.get(vid)? {
            Binding::Real(real) => {
                self.lh();
                let out = lh.test(self.rank, real)?;
                if !out.done {
                    return Ok(None);
                }
                self.requests.remove(vid)?;
                if self.replay_index(vid).is_some() {
                    self.finish_replay(vid);
                    return Ok(Some(Completion {
                        first: true,
                        status: None,
                        data: out.data,
                    }));
                }
                if let Some(st) = out.status {
                    self.note_recv(vid, st);
                }
                let rec = self.p2p.remove(&vid);
                let vcomm = rec.map(|r| r.vcomm).unwrap_or(self.world());
                Ok(Some(Completion {
                    first: true,
                    status: out.status.map(|s| self.localize(vcomm, s)),
                    data: out.data,
                }))
            }
            Binding::Null => {
                self.requests.remove(vid)?;
                if let Some(data) = self.coll_results.remove(&vid) {
                    self.finish_replay(vid);
                    return Ok(Some(Completion {
                        first: true,
                        status: None,
                        data: Some(data),
                    }));
                }
                let rec = self
                    .p2p
                    .remove(&vid)
                    .ok_or_else(|| Error::ProtocolViolation(format!("null request {vid} has no active record")))?;
                Ok(Some(Completion {
                    first: true,
                    status: rec.status.map(|s| self.localize(rec.vcomm, s)),
                    data: rec.payload,
                }))
            }
        }
    }

    /// Completes, without an application slot at hand, every request the
    /// lower half has finished (receives only if `recv_only`). Returns how
    /// many completed.
    pub fn sweep(&mut self, lh: &mut LowerHalf, recv_only: bool) -> Result<usize> {
        let mut done = 0;
        let pending: Vec<VirtualId> = self
            .p2p
            .values()
            .filter(|r| !r.completed && (r.dir == Direction::Recv || !recv_only))
            .map(|r| r.vreq)
            .collect();
        for vid in pending {
            let Binding::Real(real) = self.requests.get(vid)? else {
                continue;
            };
            if !lh.is_complete(real)? {
                continue;
            }
            self.lh();
            let out = lh.test(self.rank, real)?;
            self.requests.set_null(vid)?;
            if let Some(st) = out.status {
                self.note_recv(vid, st);
            }
            let rec = self.p2p.get_mut(&vid).expect("listed above");
            rec.completed = true;
            if rec.dir == Direction::Recv {
                rec.payload = Some(out.data.unwrap_or_default());
            }
            done += 1;
        }
        if recv_only {
            return Ok(done);
        }
        let entries: Vec<VirtualId> = self.replay.iter().filter(|e| !e.completed).map(|e| e.vreq).collect();
        for vid in entries {
            let Binding::Real(real) = self.requests.get(vid)? else {
                continue;
            };
            if !lh.is_complete(real)? {
                continue;
            }
            self.lh();
            let out = lh.test(self.rank, real)?;
            self.requests.set_null(vid)?;
            self.coll_results.insert(vid, out.data.unwrap_or_default());
            if let Some(i) = self.replay_index(vid) {
                self.replay[i].completed = true;
            }
            done += 1;
        }
        self.replay.retain(|e| !e.completed);
        Ok(done)
    }

    // ---- collectives -----------------------------------------------------------

    /// Sequence key of the next collective call on `vcomm`, and whether
    /// that instance was started on the emulated path by some member
    /// before the last checkpoint (so it must be emulated here as well).
    pub fn next_collective_key(&mut self, vcomm: VirtualId) -> Result<(CollKey, bool)> {
        let id = self.descriptor(vcomm)?.identity();
        let seq = self.coll_seq.entry(id).or_insert(0);
        let key = CollKey {
            gid: id.0,
            ordinal: id.1,
            seq: *seq,
        };
        *seq += 1;
        let emulate = match self.emulation_floor.get(&id) {
            Some(&floor) => {
                if key.seq + 1 >= floor {
                    self.emulation_floor.remove(&id);
                }
                key.seq < floor
            }
            None => false,
        };
        Ok((key, emulate))
    }

    /// Collective calls made per communicator identity.
    pub fn collective_progress(&self) -> &BTreeMap<(u64, u32), u64> {
        &self.coll_seq
    }

    /// World members of the live communicator with identity `id`.
    pub fn identity_members(&self, id: (u64, u32)) -> Option<&[Rank]> {
        self.active
            .all_comms()
            .find(|d| d.identity() == id)
            .map(|d| d.members.as_slice())
    }

    /// Installs floors agreed across all processes, keyed by identity with
    /// the communicator's members. A member that has not created the
    /// communicator yet gets the floor too, so that its first instances
    /// line up with the emulated ones.
    pub fn set_emulation_floors(&mut self, floors: &BTreeMap<(u64, u32), (u64, Vec<Rank>)>) {
        for (id, (floor, members)) in floors {
            let mine = self.coll_seq.get(id).copied().unwrap_or(0);
            if members.contains(&self.rank) && *floor > mine {
                self.emulation_floor.insert(*id, *floor);
            }
        }
    }

    /// Non-blocking collective: logged for replay and issued for real.
    pub fn icollective(
        &mut self,
        lh: &mut LowerHalf,
        vcomm: VirtualId,
        kind: CollectiveKind,
        contribution: Vec<u8>,
    ) -> Result<VirtualId> {
        self.stats.count("icollective");
        let (key, _) = self.next_collective_key(vcomm)?;
        self.icollective_raw(lh, vcomm, kind, contribution, Some(key))
    }

    pub(crate) fn icollective_raw(
        &mut self,
        lh: &mut LowerHalf,
        vcomm: VirtualId,
        kind: CollectiveKind,
        contribution: Vec<u8>,
        key: Option<CollKey>,
    ) -> Result<VirtualId> {
        let real_comm = self.real_comm(vcomm)?;
        let local = self.comm_rank(vcomm)?;
        self.lh();
        let real = lh.icollective(self.rank, real_comm, kind, contribution.clone())?;
        if let Some(key) = key {
            if kind.completes_on_arrival(local) && !lh.settled(real)? {
                self.unsettled.push((key, real));
            }
        }
        let vid = self.requests.insert(real);
        self.replay.push(ReplayEntry {
            vreq: vid,
            kind,
            vcomm,
            digest: fnv1a64(&contribution),
            contribution,
            completed: false,
            key,
        });
        self.note_request_count();
        Ok(vid)
    }

    /// Enters a blocking collective on the real path.
    pub(crate) fn enter_collective(
        &mut self,
        lh: &mut LowerHalf,
        vcomm: VirtualId,
        kind: CollectiveKind,
        contribution: Vec<u8>,
        key: CollKey,
    ) -> Result<CollectiveStart> {
        let real_comm = self.real_comm(vcomm)?;
        let local = self.comm_rank(vcomm)?;
        self.stats.real_collectives += 1;
        self.lh();
        let real = lh.icollective(self.rank, real_comm, kind, contribution)?;
        if lh.is_complete(real)? {
            if kind.completes_on_arrival(local) && !lh.settled(real)? {
                self.unsettled.push((key, real));
            }
            self.lh();
            let out = lh.test(self.rank, real)?;
            return Ok(CollectiveStart::Completed(out.data.unwrap_or_default()));
        }
        self.ctx.in_lower_half = true;
        self.current = Some(key);
        Ok(CollectiveStart::Blocked(real))
    }

    /// Progress of a blocked real collective.
    pub(crate) fn poll_collective(&mut self, lh: &mut LowerHalf, real: RealRequest) -> Result<Option<Vec<u8>>> {
        if !lh.is_complete(real)? {
            return Ok(None);
        }
        self.lh();
        let out = lh.test(self.rank, real)?;
        self.ctx.in_lower_half = false;
        self.current = None;
        Ok(Some(out.data.unwrap_or_default()))
    }

    pub(crate) fn check_contribution(&self, vcomm: VirtualId, kind: CollectiveKind, data: &[u8]) -> Result<()> {
        check_contribution(kind, self.descriptor(vcomm)?.size(), data)
    }

    /// Current report for the coordinator; drops bcast roots whose
    /// instance every member has reached.
    pub fn report(&mut self, lh: &LowerHalf) -> ProcessReport {
        self.unsettled.retain(|(_, r)| !lh.settled(*r).unwrap_or(true));
        let mut active: Vec<CollKey> = self.unsettled.iter().map(|(k, _)| *k).collect();
        active.extend(self.current);
        ProcessReport {
            rank: self.rank,
            in_collective: self.current.is_some(),
            gid: self.current.map(|k| k.gid),
            safe: !self.ctx.in_lower_half,
            active,
        }
    }

    // ---- communicators and groups ----------------------------------------------

    /// Creates the communicator over `members` (world ranks in local order).
    /// Every member must make the matching call.
    pub fn create_comm_from_members(&mut self, lh: &mut LowerHalf, members: Vec<Rank>) -> Result<VirtualId> {
        let gid = gid_of(&members);
        let ordinal = self.gid_ordinals.get(&gid).copied().unwrap_or(0);
        self.lh();
        let real = lh.comm_create_group_at(self.rank, &members, u64::from(ordinal))?;
        self.gid_ordinals.insert(gid, ordinal + 1);
        let vid = self.comms.insert(real);
        self.real_index.insert(real.id, vid);
        // Messages drained before this process created the communicator.
        for b in self.drained.iter_mut() {
            if b.vcomm.is_none() && b.gid == gid && b.ordinal == ordinal {
                b.vcomm = Some(vid);
            }
        }
        self.active.comms.insert(
            vid,
            CommDescriptor {
                vid,
                members,
                gid,
                ordinal,
            },
        );
        Ok(vid)
    }

    /// Communicator over the members of `group` (a local operation here).
    /// Returns `None` at processes outside the group.
    pub fn comm_create(
        &mut self,
        lh: &mut LowerHalf,
        parent: VirtualId,
        group: VirtualId,
    ) -> Result<Option<VirtualId>> {
        self.stats.count("comm_create");
        self.descriptor(parent)?;
        let members = self.group_descriptor(group)?.members.clone();
        if !members.contains(&self.rank) {
            return Ok(None);
        }
        self.create_comm_from_members(lh, members).map(Some)
    }

    pub fn comm_free(&mut self, vcomm: VirtualId) -> Result<()> {
        self.stats.count("comm_free");
        if vcomm == self.world() {
            return Err(Error::InvalidOperation("COMM_WORLD cannot be freed".into()));
        }
        let d = self.active.comms.remove(&vcomm).ok_or(Error::UnknownVirtualHandle {
            kind: HandleKind::Comm.name(),
            id: vcomm.0,
        })?;
        if let Binding::Real(real) = self.comms.remove(vcomm)? {
            self.real_index.remove(&real.id);
        }
        self.coll_seq.remove(&d.identity());
        self.emulation_floor.remove(&d.identity());
        for buf in &mut self.drained {
            if buf.vcomm == Some(vcomm) {
                buf.vcomm = None;
            }
        }
        Ok(())
    }

    pub fn group_descriptor(&self, vgroup: VirtualId) -> Result<&GroupDescriptor> {
        self.active.groups.get(&vgroup).ok_or(Error::UnknownVirtualHandle {
            kind: HandleKind::Group.name(),
            id: vgroup.0,
        })
    }

    fn new_group(&mut self, lh: &mut LowerHalf, members: Vec<Rank>) -> Result<VirtualId> {
        self.lh();
        let real = lh.group_create(crate::runtime::Actor::Process(self.rank), &members)?;
        let vid = self.groups.insert(real);
        self.active.groups.insert(vid, GroupDescriptor { vid, members });
        Ok(vid)
    }

    pub fn comm_group(&mut self, lh: &mut LowerHalf, vcomm: VirtualId) -> Result<VirtualId> {
        self.stats.count("comm_group");
        let members = self.descriptor(vcomm)?.members.clone();
        self.new_group(lh, members)
    }

    /// Subgroup of the listed local ranks of `vgroup`, in the given order.
    pub fn group_incl(&mut self, lh: &mut LowerHalf, vgroup: VirtualId, ranks: &[u32]) -> Result<VirtualId> {
        self.stats.count("group_incl");
        let parent = self.group_descriptor(vgroup)?.members.clone();
        let members = ranks
            .iter()
            .map(|&r| {
                parent.get(r as usize).copied().ok_or(Error::InvalidRank {
                    rank: i64::from(r),
                    size: parent.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.new_group(lh, members)
    }

    pub fn group_free(&mut self, vgroup: VirtualId) -> Result<()> {
        self.stats.count("group_free");
        self.active.groups.remove(&vgroup).ok_or(Error::UnknownVirtualHandle {
            kind: HandleKind::Group.name(),
            id: vgroup.0,
        })?;
        self.groups.remove(vgroup)?;
        Ok(())
    }

    // ---- restart support ----------------------------------------------------------

    pub(crate) fn rebind_comm(&mut self, vcomm: VirtualId, real: RealComm) -> Result<()> {
        self.comms.rebind(vcomm, real)?;
        self.real_index.insert(real.id, vcomm);
        Ok(())
    }

    pub(crate) fn rebind_group(&mut self, vgroup: VirtualId, real: RealGroup) -> Result<()> {
        self.groups.rebind(vgroup, real)
    }

    /// Re-issues an outstanding non-blocking collective on the current
    /// lower half and rebinds its request.
    pub(crate) fn reissue(&mut self, lh: &mut LowerHalf, entry: &ReplayEntry) -> Result<()> {
        let real_comm = self.real_comm(entry.vcomm)?;
        let local = self.comm_rank(entry.vcomm)?;
        let real = lh.icollective(self.rank, real_comm, entry.kind, entry.contribution.clone())?;
        if let Some(key) = entry.key {
            if entry.kind.completes_on_arrival(local) && !lh.settled(real)? {
                self.unsettled.push((key, real));
            }
        }
        self.requests.rebind(entry.vreq, real)
    }

    pub(crate) fn push_drained(&mut self, buf: DrainedBuffer) {
        self.drained.push(buf);
    }

    #[cfg(test)]
    pub(crate) fn counters_mut(&mut self) -> &mut PairCounters {
        &mut self.counters
    }
}

impl Hash for Upper {
    /// Covers the checkpointed state plus the transient collective status;
    /// metrics and the entry counter are left out.
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank.hash(state);
        self.requests.hash(state);
        self.comms.hash(state);
        self.groups.hash(state);
        self.counters.hash(state);
        self.p2p.hash(state);
        self.replay.hash(state);
        self.active.hash(state);
        self.drained.hash(state);
        self.coll_results.hash(state);
        self.coll_seq.hash(state);
        self.gid_ordinals.hash(state);
        self.emulation_floor.hash(state);
        self.unsettled.hash(state);
        self.current.hash(state);
        self.ctx.in_lower_half.hash(state);
        self.ctx.ckpt_pending.hash(state);
    }
}
