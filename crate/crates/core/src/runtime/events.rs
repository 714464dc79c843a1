//! Append-only event log.

use std::fmt;

use super::Rank;

/// Who produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    Process(Rank),
    Coordinator,
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventOp {
    Init,
    CommCreate,
    GroupCreate,
    Isend,
    Irecv,
    Test,
    Iprobe,
    CollectiveArrive,
    Translate,
    Phase,
    CheckpointRequest,
    Report,
}

impl EventOp {
    /// True for operations that touch the simulated network or a collective
    /// rendezvous.
    pub fn is_network(self) -> bool {
        matches!(
            self,
            EventOp::Isend | EventOp::Irecv | EventOp::Test | EventOp::Iprobe | EventOp::CollectiveArrive
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            EventOp::Init => "init",
            EventOp::CommCreate => "comm_create",
            EventOp::GroupCreate => "group_create",
            EventOp::Isend => "isend",
            EventOp::Irecv => "irecv",
            EventOp::Test => "test",
            EventOp::Iprobe => "iprobe",
            EventOp::CollectiveArrive => "collective_arrive",
            EventOp::Translate => "translate_group_ranks",
            EventOp::Phase => "phase",
            EventOp::CheckpointRequest => "checkpoint_request",
            EventOp::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub step: u64,
    pub actor: Actor,
    pub op: EventOp,
    /// First argument of the call (the communicator for collectives and
    /// communicator creation), 0 when there is none.
    pub subject: u64,
    pub digest: u64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actor = match self.actor {
            Actor::Process(r) => format!("p{r}"),
            Actor::Coordinator => "coord".to_string(),
            Actor::Restart => "restart".to_string(),
        };
        write!(f, "{} {} {} {:016x}", self.step, actor, self.op.name(), self.digest)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<Event>,
    enabled: bool,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        EventLog {
            events: Vec::new(),
            enabled,
        }
    }

    pub fn push(&mut self, event: Event) {
        if self.enabled {
            self.events.push(event);
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn take(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = Event>) {
        if self.enabled {
            self.events.extend(events);
        }
    }
}
