use std::collections::HashMap;
use std::fmt;

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};

/// Application-visible handle. Ids are never reused, across restarts too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtualId(pub u64);

impl fmt::Display for VirtualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl Encode for VirtualId {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
}

impl Decode for VirtualId {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(VirtualId(r.u64()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandleKind {
    Comm,
    Group,
    Request,
}

impl HandleKind {
    pub fn name(self) -> &'static str {
        match self {
            HandleKind::Comm => "comm",
            HandleKind::Group => "group",
            HandleKind::Request => "request",
        }
    }

    fn code(self) -> u8 {
        match self {
            HandleKind::Comm => 0,
            HandleKind::Group => 1,
            HandleKind::Request => 2,
        }
    }
}

/// The real side of a table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Binding<R> {
    Real(R),
    /// Completed request awaiting its second test.
    Null,
}

/// Virtual-to-real map. Hash-based so lookups stay O(1) as the table grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualTable<R> {
    kind: HandleKind,
    entries: HashMap<VirtualId, Binding<R>>,
    next: u64,
}

impl<R: Copy> VirtualTable<R> {
    pub fn new(kind: HandleKind) -> Self {
        VirtualTable {
            kind,
            entries: HashMap::new(),
            next: 1,
        }
    }

    pub fn kind(&self) -> HandleKind {
        self.kind
    }

    pub fn next_id(&self) -> u64 {
        self.next
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn unknown(&self, id: VirtualId) -> Error {
        Error::UnknownVirtualHandle {
            kind: self.kind.name(),
            id: id.0,
        }
    }

    fn fresh(&mut self) -> VirtualId {
        let id = VirtualId(self.next);
        self.next += 1;
        id
    }

    pub fn insert(&mut self, real: R) -> VirtualId {
        let id = self.fresh();
        self.entries.insert(id, Binding::Real(real));
        id
    }

    pub fn insert_null(&mut self) -> VirtualId {
        let id = self.fresh();
        self.entries.insert(id, Binding::Null);
        id
    }

    pub fn contains(&self, id: VirtualId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: VirtualId) -> Result<Binding<R>> {
        self.entries.get(&id).copied().ok_or_else(|| self.unknown(id))
    }

    /// The real handle; a null binding is an invalid use here.
    pub fn real(&self, id: VirtualId) -> Result<R> {
        match self.get(id)? {
            Binding::Real(r) => Ok(r),
            Binding::Null => Err(Error::InvalidOperation(format!(
                "{} {id} is bound to the null sentinel",
                self.kind.name()
            ))),
        }
    }

    pub fn set_null(&mut self, id: VirtualId) -> Result<()> {
        let unknown = self.unknown(id);
        *self.entries.get_mut(&id).ok_or(unknown)? = Binding::Null;
        Ok(())
    }

    pub fn remove(&mut self, id: VirtualId) -> Result<Binding<R>> {
        let unknown = self.unknown(id);
        self.entries.remove(&id).ok_or(unknown)
    }

    /// Points an existing id at a handle of the current epoch.
    pub fn rebind(&mut self, id: VirtualId, real: R) -> Result<()> {
        match self.entries.get_mut(&id) {
            Some(slot) => {
                *slot = Binding::Real(real);
                Ok(())
            }
            None => Err(Error::RestartInconsistency(format!(
                "rebind of unknown {} {id}",
                self.kind.name()
            ))),
        }
    }

    pub fn ids(&self) -> Vec<VirtualId> {
        let mut ids: Vec<VirtualId> = self.entries.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn iter_sorted(&self) -> Vec<(VirtualId, Binding<R>)> {
        self.ids().into_iter().map(|id| (id, self.entries[&id])).collect()
    }

    /// Serializable shape: real handles are epoch-scoped, so only whether an
    /// entry is live (to be rebound) or null survives.
    pub fn snapshot(&self) -> TableSnapshot {
        TableSnapshot {
            kind: self.kind,
            next: self.next,
            entries: self
                .iter_sorted()
                .into_iter()
                .map(|(id, b)| (id, matches!(b, Binding::Null)))
                .collect(),
        }
    }

    /// Table from a snapshot; live entries get `placeholder` until rebound.
    pub fn from_snapshot(s: &TableSnapshot, placeholder: R) -> Self {
        VirtualTable {
            kind: s.kind,
            next: s.next,
            entries: s
                .entries
                .iter()
                .map(|&(id, null)| {
                    (
                        id,
                        if null {
                            Binding::Null
                        } else {
                            Binding::Real(placeholder)
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<R: Copy + std::hash::Hash> std::hash::Hash for VirtualTable<R> {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.kind.hash(state);
        self.next.hash(state);
        for (id, b) in self.iter_sorted() {
            id.hash(state);
            b.hash(state);
        }
    }
}

/// Table contents as stored in an image: id plus a null flag per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSnapshot {
    pub kind: HandleKind,
    pub next: u64,
    pub entries: Vec<(VirtualId, bool)>,
}

impl Encode for TableSnapshot {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind.code()).u64(self.next).seq(&self.entries);
    }
}

impl Decode for TableSnapshot {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let kind = match r.u8()? {
            0 => HandleKind::Comm,
            1 => HandleKind::Group,
            2 => HandleKind::Request,
            v => return Err(r.invalid(format!("bad handle kind {v}"))),
        };
        let next = r.u64()?;
        let entries: Vec<(VirtualId, bool)> = r.seq()?;
        if entries.iter().any(|(id, _)| id.0 >= next) {
            return Err(r.invalid("virtual id at or beyond next-id counter"));
        }
        Ok(TableSnapshot { kind, next, entries })
    }
}
