//! In-flight point-to-point message store.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::{Rank, RealComm};

/// Source selector of a receive or probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Any,
    Rank(Rank),
}

impl Source {
    pub fn admits(self, src: Rank) -> bool {
        match self {
            Source::Any => true,
            Source::Rank(r) => r == src,
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Source::Any => u64::MAX,
            Source::Rank(r) => u64::from(r),
        }
    }
}

/// Tag selector. The wildcard only matches application tags (`>= 0`);
/// negative tags are reserved for wrapper-internal traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagSel {
    Any,
    Tag(i32),
}

impl TagSel {
    pub fn admits(self, tag: i32) -> bool {
        match self {
            TagSel::Any => tag >= 0,
            TagSel::Tag(t) => t == tag,
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            TagSel::Any => u64::MAX,
            TagSel::Tag(t) => t as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub src: Rank,
    pub dst: Rank,
    pub comm: u32,
    pub tag: i32,
    pub payload: Vec<u8>,
    /// Per-channel sequence number.
    pub seq: u64,
    /// Global arrival order.
    pub arrival: u64,
    /// Receive request that has matched this message, if any.
    pub claimed_by: Option<u32>,
}

impl Message {
    pub fn envelope(&self, epoch: u32) -> Envelope {
        Envelope {
            src: self.src,
            tag: self.tag,
            comm: RealComm { id: self.comm, epoch },
            bytes: self.payload.len(),
        }
    }
}

/// What a probe reports about a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub tag: i32,
    pub comm: RealComm,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Network {
    messages: BTreeMap<u64, Message>,
    next_arrival: u64,
    channel_seq: BTreeMap<(Rank, Rank, u32, i32), u64>,
    /// Unmatched posted receives, per destination, in post order.
    posted: BTreeMap<Rank, Vec<u32>>,
}

/// Arrival numbers are global counters whose values depend on the
/// schedule; only the relative order of the messages is observable.
impl Hash for Network {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.messages.len().hash(h);
        for m in self.messages.values() {
            (m.src, m.dst, m.comm, m.tag, &m.payload, m.seq, m.claimed_by).hash(h);
        }
        self.channel_seq.hash(h);
        self.posted.hash(h);
    }
}

impl Network {
    pub(crate) fn enqueue(&mut self, src: Rank, dst: Rank, comm: u32, tag: i32, payload: Vec<u8>) -> u64 {
        let seq = self.channel_seq.entry((src, dst, comm, tag)).or_insert(0);
        let msg = Message {
            src,
            dst,
            comm,
            tag,
            payload,
            seq: *seq,
            arrival: self.next_arrival,
            claimed_by: None,
        };
        *seq += 1;
        let arrival = self.next_arrival;
        self.next_arrival += 1;
        self.messages.insert(arrival, msg);
        arrival
    }

    pub(crate) fn get(&self, arrival: u64) -> Option<&Message> {
        self.messages.get(&arrival)
    }

    pub(crate) fn remove(&mut self, arrival: u64) -> Option<Message> {
        self.messages.remove(&arrival)
    }

    pub(crate) fn claim(&mut self, arrival: u64, req: u32) {
        if let Some(m) = self.messages.get_mut(&arrival) {
            m.claimed_by = Some(req);
        }
    }

    pub(crate) fn post(&mut self, dst: Rank, req: u32) {
        self.posted.entry(dst).or_default().push(req);
    }

    pub(crate) fn unpost(&mut self, dst: Rank, req: u32) {
        if let Some(list) = self.posted.get_mut(&dst) {
            list.retain(|&r| r != req);
        }
    }

    pub(crate) fn posted_for(&self, dst: Rank) -> Vec<u32> {
        self.posted.get(&dst).cloned().unwrap_or_default()
    }

    /// Lowest-arrival unclaimed message eligible for a receive. Within one
    /// channel arrival order equals sequence order, so this never overtakes.
    pub(crate) fn find_unclaimed(&self, dst: Rank, comm: u32, src: Source, tag: TagSel) -> Option<u64> {
        self.messages
            .values()
            .find(|m| {
                m.claimed_by.is_none() && m.dst == dst && m.comm == comm && src.admits(m.src) && tag.admits(m.tag)
            })
            .map(|m| m.arrival)
    }

    pub(crate) fn find_unclaimed_any(&self, dst: Rank, src: Rank) -> Option<u64> {
        self.messages
            .values()
            .find(|m| m.claimed_by.is_none() && m.dst == dst && m.src == src)
            .map(|m| m.arrival)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.values()
    }
}
