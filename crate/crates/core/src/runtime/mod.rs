//! The simulated lower half.
//!
//! A [`LowerHalf`] is one lifetime ("epoch") of the message-passing library:
//! communicators, groups, requests, the in-flight message store and the
//! collective rendezvous table. Nothing in here survives a checkpoint; the
//! restart engine builds a fresh instance at the next epoch and every handle
//! minted by an older instance is rejected with [`Error::StaleHandle`].

mod collective;
mod events;
mod network;
mod scheduler;

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

pub use collective::{check_contribution, reduce, results, CollectiveKind, ReduceOp};
pub use events::{Actor, Event, EventLog, EventOp};
pub use network::{Envelope, Message, Network, Source, TagSel};
pub use scheduler::Scheduler;

use crate::error::{Error, Result};
use crate::hash::{digest_words, fnv1a64};

/// Index of a process in the world communicator.
pub type Rank = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RealComm {
    pub id: u32,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RealGroup {
    pub id: u32,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RealRequest {
    Null,
    Live { id: u32, epoch: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Send,
    Recv,
    Collective,
}

/// Completion status of a point-to-point receive. `src` is a world rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Status {
    pub src: Rank,
    pub tag: i32,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TestOutcome {
    pub done: bool,
    pub status: Option<Status>,
    /// Received payload or collective result, handed out once at completion.
    pub data: Option<Vec<u8>>,
}

impl TestOutcome {
    fn pending() -> Self {
        TestOutcome::default()
    }

    fn done(status: Option<Status>, data: Option<Vec<u8>>) -> Self {
        TestOutcome {
            done: true,
            status,
            data,
        }
    }
}

/// Result of entering a blocking collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CollectiveStart {
    Completed(Vec<u8>),
    Blocked(RealRequest),
}

#[derive(Debug, Clone, Hash)]
struct CommInfo {
    members: Vec<Rank>,
}

#[derive(Debug, Clone)]
enum ReqState {
    Send {
        owner: Rank,
    },
    Recv {
        owner: Rank,
        comm: u32,
        source: Source,
        tag: TagSel,
        matched: Option<u64>,
        done: Option<Status>,
    },
    Collective {
        owner: Rank,
        comm: u32,
        instance: u64,
        kind: CollectiveKind,
        local: u32,
        result: Option<Vec<u8>>,
        done: bool,
        delivered: bool,
    },
}

/// `matched` holds an absolute arrival number, which depends on the
/// schedule; the message side records the claim, so only its presence is
/// hashed.
impl Hash for ReqState {
    fn hash<H: Hasher>(&self, h: &mut H) {
        match self {
            ReqState::Send { owner } => (0u8, owner).hash(h),
            ReqState::Recv {
                owner,
                comm,
                source,
                tag,
                matched,
                done,
            } => (1u8, owner, comm, source, tag, matched.is_some(), done).hash(h),
            ReqState::Collective {
                owner,
                comm,
                instance,
                kind,
                local,
                result,
                done,
                delivered,
            } => (2u8, owner, comm, instance, kind, local, result, done, delivered).hash(h),
        }
    }
}

impl ReqState {
    fn owner(&self) -> Rank {
        match self {
            ReqState::Send { owner } | ReqState::Recv { owner, .. } => *owner,
            ReqState::Collective { owner, .. } => *owner,
        }
    }
}

#[derive(Debug, Clone, Hash)]
struct Rendezvous {
    kind: CollectiveKind,
    size: usize,
    contributions: BTreeMap<u32, Vec<u8>>,
    requests: BTreeMap<u32, u32>,
}

/// Everything that defines the lower half's observable state; the event log
/// and the step stamp are kept outside so fingerprints ignore them.
#[derive(Debug, Clone, Hash)]
struct State {
    epoch: u32,
    size: usize,
    comms: Vec<CommInfo>,
    groups: Vec<Vec<Rank>>,
    /// Keyed by id; ids are numbered per owning process, so they do not
    /// depend on how processes interleave.
    requests: BTreeMap<u32, ReqState>,
    request_counters: Vec<u32>,
    network: Network,
    rendezvous: BTreeMap<(u32, u64), Rendezvous>,
    coll_counters: BTreeMap<(Rank, u32), u64>,
    create_counters: BTreeMap<(Rank, Vec<Rank>), u64>,
    create_registry: BTreeMap<(Vec<Rank>, u64), u32>,
    split_registry: BTreeMap<(u32, u64, i64), u32>,
}

#[derive(Debug, Clone)]
pub struct LowerHalf {
    state: State,
    events: EventLog,
    step: u64,
    /// Lower-half calls made per process (the entry-count proxy metric).
    entries: Vec<u64>,
}

const WORLD_ID: u32 = 0;
const INTERNAL_ID: u32 = 1;

impl LowerHalf {
    /// Starts a lower half with `n` processes at the given epoch.
    pub fn init(n: usize, epoch: u32) -> Result<Self> {
        Self::with_events(n, epoch, true)
    }

    pub fn with_events(n: usize, epoch: u32, record_events: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfiguration(
                "a lower half needs at least one process".into(),
            ));
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidConfiguration(format!("{n} processes")));
        }
        let world: Vec<Rank> = (0..n as Rank).collect();
        let mut lh = LowerHalf {
            state: State {
                epoch,
                size: n,
                // COMM_WORLD plus a private duplicate for checkpoint traffic.
                comms: vec![CommInfo { members: world.clone() }, CommInfo { members: world }],
                groups: Vec::new(),
                requests: BTreeMap::new(),
                request_counters: vec![0; n],
                network: Network::default(),
                rendezvous: BTreeMap::new(),
                coll_counters: BTreeMap::new(),
                create_counters: BTreeMap::new(),
                create_registry: BTreeMap::new(),
                split_registry: BTreeMap::new(),
            },
            events: EventLog::new(record_events),
            step: 0,
            entries: vec![0; n],
        };
        lh.log(Actor::Restart, EventOp::Init, &[n as u64, u64::from(epoch)]);
        Ok(lh)
    }

    pub fn epoch(&self) -> u32 {
        self.state.epoch
    }

    pub fn size(&self) -> usize {
        self.state.size
    }

    pub fn world(&self) -> RealComm {
        RealComm {
            id: WORLD_ID,
            epoch: self.state.epoch,
        }
    }

    /// Communicator reserved for checkpoint-time exchanges; never handed to
    /// applications.
    pub fn internal_world(&self) -> RealComm {
        RealComm {
            id: INTERNAL_ID,
            epoch: self.state.epoch,
        }
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn events_mut(&mut self) -> &mut EventLog {
        &mut self.events
    }

    /// Lower-half calls made by process `p` in this epoch.
    pub fn entry_count(&self, p: Rank) -> u64 {
        self.entries.get(p as usize).copied().unwrap_or(0)
    }

    pub fn log(&mut self, actor: Actor, op: EventOp, args: &[u64]) {
        if self.events.is_enabled() {
            let event = Event {
                step: self.step,
                actor,
                op,
                subject: args.first().copied().unwrap_or(0),
                digest: digest_words(args),
            };
            self.events.push(event);
        }
    }

    fn enter(&mut self, p: Rank, op: EventOp, args: &[u64]) {
        if let Some(e) = self.entries.get_mut(p as usize) {
            *e += 1;
        }
        self.log(Actor::Process(p), op, args);
    }

    /// Hash of the observable lower-half state (excludes the event log).
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.state.hash(&mut h);
        h.finish()
    }

    fn check_epoch(&self, kind: &'static str, id: u32, epoch: u32) -> Result<()> {
        if epoch != self.state.epoch {
            return Err(Error::StaleHandle {
                kind,
                id,
                handle_epoch: epoch,
                current_epoch: self.state.epoch,
            });
        }
        Ok(())
    }

    fn comm_info(&self, c: RealComm) -> Result<&CommInfo> {
        self.check_epoch("communicator", c.id, c.epoch)?;
        self.state
            .comms
            .get(c.id as usize)
            .ok_or_else(|| Error::InvalidOperation(format!("no communicator {}", c.id)))
    }

    fn check_member(&self, c: RealComm, p: Rank) -> Result<u32> {
        let info = self.comm_info(c)?;
        info.members
            .iter()
            .position(|&m| m == p)
            .map(|i| i as u32)
            .ok_or(Error::InvalidRank {
                rank: i64::from(p),
                size: info.members.len(),
            })
    }

    fn request_index(&self, r: RealRequest) -> Result<Option<u32>> {
        match r {
            RealRequest::Null => Ok(None),
            RealRequest::Live { id, epoch } => {
                self.check_epoch("request", id, epoch)?;
                if self.state.requests.contains_key(&id) {
                    Ok(Some(id))
                } else {
                    Err(Error::InvalidOperation(format!("no request {id}")))
                }
            }
        }
    }

    fn new_request(&mut self, state: ReqState) -> RealRequest {
        let owner = state.owner() as usize;
        let counter = &mut self.state.request_counters[owner];
        let id = *counter * self.state.size as u32 + owner as u32;
        *counter += 1;
        self.state.requests.insert(id, state);
        RealRequest::Live {
            id,
            epoch: self.state.epoch,
        }
    }

    /// Ordered membership of a communicator without generating an event.
    pub fn comm_members(&self, c: RealComm) -> Result<&[Rank]> {
        Ok(&self.comm_info(c)?.members)
    }

    pub fn group_members(&self, g: RealGroup) -> Result<&[Rank]> {
        self.check_epoch("group", g.id, g.epoch)?;
        self.state
            .groups
            .get(g.id as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidOperation(format!("no group {}", g.id)))
    }

    /// World ranks of `c`'s members by local rank. Purely local.
    pub fn translate_group_ranks(&mut self, p: Rank, c: RealComm) -> Result<Vec<Rank>> {
        let members = self.comm_info(c)?.members.clone();
        self.enter(p, EventOp::Translate, &[u64::from(c.id)]);
        Ok(members)
    }

    pub fn request_kind(&self, r: RealRequest) -> Result<Option<RequestKind>> {
        Ok(self.request_index(r)?.map(|i| match &self.state.requests[&i] {
            ReqState::Send { .. } => RequestKind::Send,
            ReqState::Recv { .. } => RequestKind::Recv,
            ReqState::Collective { .. } => RequestKind::Collective,
        }))
    }

    // ---- point-to-point -------------------------------------------------

    /// Eager send: the message is enqueued and the request is already complete.
    pub fn isend(&mut self, p: Rank, dst: Rank, tag: i32, c: RealComm, payload: Vec<u8>) -> Result<RealRequest> {
        self.check_member(c, p)?;
        self.check_member(c, dst)?;
        self.enter(
            p,
            EventOp::Isend,
            &[
                u64::from(dst),
                tag as u64,
                u64::from(c.id),
                payload.len() as u64,
                fnv1a64(&payload),
            ],
        );
        let arrival = self.state.network.enqueue(p, dst, c.id, tag, payload);
        self.match_arrival(arrival);
        Ok(self.new_request(ReqState::Send { owner: p }))
    }

    /// Hands a freshly arrived message to the oldest posted receive it matches.
    fn match_arrival(&mut self, arrival: u64) {
        let msg = match self.state.network.get(arrival) {
            Some(m) => m.clone(),
            None => return,
        };
        let posted = self.state.network.posted_for(msg.dst);
        for req in posted {
            if let ReqState::Recv {
                comm,
                source,
                tag,
                matched,
                ..
            } = self.state.requests.get_mut(&req).expect("posted receives exist")
            {
                if matched.is_none() && *comm == msg.comm && source.admits(msg.src) && tag.admits(msg.tag) {
                    *matched = Some(arrival);
                    self.state.network.claim(arrival, req);
                    self.state.network.unpost(msg.dst, req);
                    return;
                }
            }
        }
    }

    pub fn irecv(&mut self, p: Rank, src: Source, tag: TagSel, c: RealComm) -> Result<RealRequest> {
        self.check_member(c, p)?;
        if let Source::Rank(s) = src {
            self.check_member(c, s)?;
        }
        self.enter(p, EventOp::Irecv, &[src.code(), tag.code(), u64::from(c.id)]);
        let req = self.new_request(ReqState::Recv {
            owner: p,
            comm: c.id,
            source: src,
            tag,
            matched: None,
            done: None,
        });
        let RealRequest::Live { id, .. } = req else {
            unreachable!()
        };
        match self.state.network.find_unclaimed(p, c.id, src, tag) {
            Some(arrival) => {
                self.state.network.claim(arrival, id);
                if let ReqState::Recv { matched, .. } = self.state.requests.get_mut(&id).expect("request exists") {
                    *matched = Some(arrival);
                }
            }
            None => self.state.network.post(p, id),
        }
        Ok(req)
    }

    /// Non-destructive readiness check: would `test` report completion now?
    pub fn is_complete(&self, r: RealRequest) -> Result<bool> {
        let Some(i) = self.request_index(r)? else {
            return Ok(true);
        };
        Ok(match &self.state.requests[&i] {
            ReqState::Send { .. } => true,
            ReqState::Recv { matched, done, .. } => matched.is_some() || done.is_some(),
            ReqState::Collective { done, .. } => *done,
        })
    }

    pub fn test(&mut self, p: Rank, r: RealRequest) -> Result<TestOutcome> {
        let Some(i) = self.request_index(r)? else {
            return Ok(TestOutcome::done(None, None));
        };
        let owner = self.state.requests[&i].owner();
        if owner != p {
            return Err(Error::InvalidOperation(format!(
                "process {p} tested a request owned by {owner}"
            )));
        }
        self.enter(p, EventOp::Test, &[i as u64]);
        match self.state.requests.get_mut(&i).expect("checked above") {
            ReqState::Send { .. } => Ok(TestOutcome::done(None, None)),
            ReqState::Recv { matched, done, .. } => {
                if let Some(status) = done {
                    return Ok(TestOutcome::done(Some(*status), None));
                }
                let Some(arrival) = matched.take() else {
                    return Ok(TestOutcome::pending());
                };
                let msg = self
                    .state
                    .network
                    .remove(arrival)
                    .expect("claimed message stays in flight until completion");
                let status = Status {
                    src: msg.src,
                    tag: msg.tag,
                    bytes: msg.payload.len(),
                };
                *done = Some(status);
                Ok(TestOutcome::done(Some(status), Some(msg.payload)))
            }
            ReqState::Collective {
                done,
                result,
                delivered,
                ..
            } => {
                if !*done {
                    return Ok(TestOutcome::pending());
                }
                let data = if *delivered {
                    None
                } else {
                    *delivered = true;
                    Some(result.take().unwrap_or_default())
                };
                Ok(TestOutcome::done(None, data))
            }
        }
    }

    /// Oldest unclaimed message for `p` on `c` matching `src`/`tag`.
    pub fn iprobe(&mut self, p: Rank, src: Source, tag: TagSel, c: RealComm) -> Result<Option<Envelope>> {
        self.check_member(c, p)?;
        self.enter(p, EventOp::Iprobe, &[src.code(), tag.code(), u64::from(c.id)]);
        let epoch = self.state.epoch;
        Ok(self
            .state
            .network
            .find_unclaimed(p, c.id, src, tag)
            .and_then(|a| self.state.network.get(a))
            .map(|m| m.envelope(epoch)))
    }

    /// Oldest unclaimed message from `src` to `p` on any communicator and
    /// any tag, internal tags included.
    pub fn iprobe_any(&mut self, p: Rank, src: Rank) -> Result<Option<Envelope>> {
        if p as usize >= self.state.size || src as usize >= self.state.size {
            return Err(Error::InvalidRank {
                rank: i64::from(p.max(src)),
                size: self.state.size,
            });
        }
        self.enter(p, EventOp::Iprobe, &[u64::from(src), u64::MAX]);
        let epoch = self.state.epoch;
        Ok(self
            .state
            .network
            .find_unclaimed_any(p, src)
            .and_then(|a| self.state.network.get(a))
            .map(|m| m.envelope(epoch)))
    }

    /// Point-to-point messages still in the network (claimed or not).
    pub fn p2p_in_flight(&self) -> usize {
        self.state.network.len()
    }

    pub fn in_flight_messages(&self) -> impl Iterator<Item = &Message> {
        self.state.network.messages()
    }

    // ---- collectives ----------------------------------------------------

    pub fn icollective(
        &mut self,
        p: Rank,
        c: RealComm,
        kind: CollectiveKind,
        contribution: Vec<u8>,
    ) -> Result<RealRequest> {
        let local = self.check_member(c, p)?;
        let size = self.comm_info(c)?.members.len();
        check_contribution(kind, size, &contribution)?;
        let counter = self.state.coll_counters.entry((p, c.id)).or_insert(0);
        let instance = *counter;
        *counter += 1;
        self.enter(
            p,
            EventOp::CollectiveArrive,
            &[u64::from(c.id), instance, kind_code(kind), fnv1a64(&contribution)],
        );

        let key = (c.id, instance);
        let rv = self.state.rendezvous.entry(key).or_insert_with(|| Rendezvous {
            kind,
            size,
            contributions: BTreeMap::new(),
            requests: BTreeMap::new(),
        });
        if rv.kind != kind {
            return Err(Error::ProtocolViolation(format!(
                "process {p} entered {} as instance {instance} of communicator {} while others entered {}",
                kind.name(),
                c.id,
                rv.kind.name()
            )));
        }
        if rv.contributions.contains_key(&local) {
            return Err(Error::ProtocolViolation(format!(
                "process {p} entered instance {instance} twice"
            )));
        }
        rv.contributions.insert(local, contribution);
        let req = self.new_request(ReqState::Collective {
            owner: p,
            comm: c.id,
            instance,
            kind,
            local,
            result: None,
            done: false,
            delivered: false,
        });
        let RealRequest::Live { id, .. } = req else {
            unreachable!()
        };
        self.state
            .rendezvous
            .get_mut(&key)
            .expect("just inserted")
            .requests
            .insert(local, id);
        self.progress_rendezvous(key)?;
        Ok(req)
    }

    fn progress_rendezvous(&mut self, key: (u32, u64)) -> Result<()> {
        let rv = &self.state.rendezvous[&key];
        let all_arrived = rv.contributions.len() == rv.size;
        match rv.kind {
            CollectiveKind::Bcast { root } => {
                let Some(payload) = rv.contributions.get(&root).cloned() else {
                    return Ok(());
                };
                let waiting: Vec<u32> = rv.requests.values().copied().collect();
                for id in waiting {
                    self.finish_request(id, payload.clone());
                }
                if all_arrived {
                    self.state.rendezvous.remove(&key);
                }
            }
            kind if all_arrived => {
                let rv = self.state.rendezvous.remove(&key).expect("present");
                let contributions: Vec<Vec<u8>> = rv.contributions.into_values().collect();
                let outs = results(kind, &contributions)?;
                for (local, id) in rv.requests {
                    self.finish_request(id, outs[local as usize].clone());
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn finish_request(&mut self, id: u32, data: Vec<u8>) {
        if let ReqState::Collective { done, result, .. } = self.state.requests.get_mut(&id).expect("request exists") {
            if !*done {
                *done = true;
                *result = Some(data);
            }
        }
    }

    /// Blocking collective entry. A `Blocked` request must be polled with
    /// [`LowerHalf::test`] until it completes.
    pub fn collective(
        &mut self,
        p: Rank,
        c: RealComm,
        kind: CollectiveKind,
        contribution: Vec<u8>,
    ) -> Result<CollectiveStart> {
        let req = self.icollective(p, c, kind, contribution)?;
        if self.is_complete(req)? {
            let out = self.test(p, req)?;
            Ok(CollectiveStart::Completed(out.data.unwrap_or_default()))
        } else {
            Ok(CollectiveStart::Blocked(req))
        }
    }

    /// True once every member has arrived at the collective instance that
    /// `r` belongs to; a bcast root is complete earlier than that.
    pub fn settled(&self, r: RealRequest) -> Result<bool> {
        let Some(i) = self.request_index(r)? else {
            return Ok(true);
        };
        match &self.state.requests[&i] {
            ReqState::Collective { comm, instance, .. } => Ok(!self.state.rendezvous.contains_key(&(*comm, *instance))),
            _ => Ok(true),
        }
    }

    /// Locations of every partially filled rendezvous: (comm id, instance,
    /// arrived count, size).
    pub fn open_rendezvous(&self) -> Vec<(u32, u64, usize, usize)> {
        self.state
            .rendezvous
            .iter()
            .map(|(&(c, i), rv)| (c, i, rv.contributions.len(), rv.size))
            .collect()
    }

    // ---- communicators and groups ----------------------------------------

    /// Collective split of `c`; the request completes once all members
    /// arrived and is turned into a communicator with [`Self::split_result`].
    pub fn comm_split(&mut self, p: Rank, c: RealComm, color: i64, key: i64) -> Result<RealRequest> {
        let mut contribution = Vec::with_capacity(16);
        contribution.extend_from_slice(&color.to_le_bytes());
        contribution.extend_from_slice(&key.to_le_bytes());
        self.icollective(p, c, CollectiveKind::Allgather, contribution)
    }

    pub fn split_result(&mut self, p: Rank, r: RealRequest) -> Result<Option<RealComm>> {
        let Some(i) = self.request_index(r)? else {
            return Err(Error::InvalidOperation("split on a null request".into()));
        };
        let (parent, instance, local) = match &self.state.requests[&i] {
            ReqState::Collective {
                comm,
                instance,
                kind: CollectiveKind::Allgather,
                local,
                ..
            } => (*comm, *instance, *local),
            _ => return Err(Error::InvalidOperation("not a split request".into())),
        };
        let out = self.test(p, r)?;
        if !out.done {
            return Ok(None);
        }
        let Some(data) = out.data else {
            return Err(Error::InvalidOperation("split result already taken".into()));
        };
        let parent_members = self.state.comms[parent as usize].members.clone();
        let entries: Vec<(i64, i64)> = data
            .chunks_exact(16)
            .map(|c| {
                (
                    i64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    i64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        let my_color = entries[local as usize].0;
        let members = split_members(&parent_members, &entries, my_color);
        let reg_key = (parent, instance, my_color);
        let id = match self.state.split_registry.get(&reg_key) {
            Some(&id) => id,
            None => {
                let id = self.push_comm(Actor::Process(p), members);
                self.state.split_registry.insert(reg_key, id);
                id
            }
        };
        Ok(Some(RealComm {
            id,
            epoch: self.state.epoch,
        }))
    }

    fn push_comm(&mut self, actor: Actor, members: Vec<Rank>) -> u32 {
        let id = self.state.comms.len() as u32;
        let mut args: Vec<u64> = vec![u64::from(id)];
        args.extend(members.iter().map(|&m| u64::from(m)));
        self.log(actor, EventOp::CommCreate, &args);
        self.state.comms.push(CommInfo { members });
        id
    }

    fn validate_members(&self, members: &[Rank]) -> Result<()> {
        if members.is_empty() {
            return Err(Error::InvalidOperation("empty member list".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &m in members {
            if m as usize >= self.state.size {
                return Err(Error::InvalidRank {
                    rank: i64::from(m),
                    size: self.state.size,
                });
            }
            if !seen.insert(m) {
                return Err(Error::InvalidOperation(format!("duplicate member {m}")));
            }
        }
        Ok(())
    }

    /// Communicator over an explicit ordered member list. Every member gets
    /// the same handle for its k-th call with this member list; only the
    /// first call creates it.
    pub fn comm_create_group(&mut self, p: Rank, members: &[Rank]) -> Result<RealComm> {
        let counter = self.state.create_counters.entry((p, members.to_vec())).or_insert(0);
        let ordinal = *counter;
        *counter += 1;
        self.comm_create_group_at(p, members, ordinal)
    }

    /// Like [`Self::comm_create_group`] with a caller-chosen ordinal, which
    /// must be the same at every member.
    pub fn comm_create_group_at(&mut self, p: Rank, members: &[Rank], ordinal: u64) -> Result<RealComm> {
        self.validate_members(members)?;
        if !members.contains(&p) {
            return Err(Error::InvalidRank {
                rank: i64::from(p),
                size: members.len(),
            });
        }
        if let Some(e) = self.entries.get_mut(p as usize) {
            *e += 1;
        }
        let key = (members.to_vec(), ordinal);
        let id = match self.state.create_registry.get(&key) {
            Some(&id) => id,
            None => {
                let id = self.push_comm(Actor::Process(p), members.to_vec());
                self.state.create_registry.insert(key, id);
                id
            }
        };
        Ok(RealComm {
            id,
            epoch: self.state.epoch,
        })
    }

    /// Unconditionally creates a communicator; used while rebuilding at restart.
    pub fn create_comm(&mut self, actor: Actor, members: &[Rank]) -> Result<RealComm> {
        self.validate_members(members)?;
        let id = self.push_comm(actor, members.to_vec());
        Ok(RealComm {
            id,
            epoch: self.state.epoch,
        })
    }

    /// Creates a communicator and registers it under `ordinal`, so members
    /// that reach the matching [`Self::comm_create_group_at`] later get it.
    pub fn create_comm_registered(&mut self, actor: Actor, members: &[Rank], ordinal: u64) -> Result<RealComm> {
        let key = (members.to_vec(), ordinal);
        if self.state.create_registry.contains_key(&key) {
            return Err(Error::InvalidOperation(format!(
                "communicator {members:?} #{ordinal} already exists"
            )));
        }
        let c = self.create_comm(actor, members)?;
        self.state.create_registry.insert(key, c.id);
        Ok(c)
    }

    pub fn group_create(&mut self, actor: Actor, members: &[Rank]) -> Result<RealGroup> {
        self.validate_members(members)?;
        if let Actor::Process(p) = actor {
            if let Some(e) = self.entries.get_mut(p as usize) {
                *e += 1;
            }
        }
        let id = self.state.groups.len() as u32;
        let mut args = vec![u64::from(id)];
        args.extend(members.iter().map(|&m| u64::from(m)));
        self.log(actor, EventOp::GroupCreate, &args);
        self.state.groups.push(members.to_vec());
        Ok(RealGroup {
            id,
            epoch: self.state.epoch,
        })
    }

    /// Ordinal under which `c` was created: 0 for the world, the
    /// registered ordinal otherwise, `None` for unregistered communicators.
    pub fn comm_ordinal(&self, c: RealComm) -> Option<u64> {
        if c.id == WORLD_ID {
            return Some(0);
        }
        self.state
            .create_registry
            .iter()
            .find(|(_, &id)| id == c.id)
            .map(|((_, ordinal), _)| *ordinal)
    }

    /// Number of communicators created in this epoch beyond the two built-in ones.
    pub fn created_comms(&self) -> usize {
        self.state.comms.len() - 2
    }
}

fn kind_code(kind: CollectiveKind) -> u64 {
    match kind {
        CollectiveKind::Barrier => 0,
        CollectiveKind::Bcast { root } => 1 | (u64::from(root) << 8),
        CollectiveKind::Allreduce(op) => 2 | (u64::from(op.code()) << 8),
        CollectiveKind::Alltoall => 3,
        CollectiveKind::Allgather => 4,
    }
}

/// Members sharing `color`, ordered by (key, world rank).
pub fn split_members(parent: &[Rank], entries: &[(i64, i64)], color: i64) -> Vec<Rank> {
    let mut chosen: Vec<(i64, Rank)> = parent
        .iter()
        .zip(entries)
        .filter(|(_, (c, _))| *c == color)
        .map(|(&rank, &(_, key))| (key, rank))
        .collect();
    chosen.sort();
    chosen.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests;
