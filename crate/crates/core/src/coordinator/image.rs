//! Checkpoint image format.
//!
//! ```text
//! "MANAKIN1" | version u32 | epoch u32 | world size u32 | rank u32
//! | section* (u64 length + bytes) in the order of `SECTIONS`
//! | CRC32 of everything before it
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::interpose::{
    ActiveCommList, CommDescriptor, DrainedBuffer, GroupDescriptor, HandleKind, P2pRecord, PairCounters, ReplayEntry,
    TableSnapshot, Upper, VirtualId, VirtualTable,
};
use crate::runtime::{Rank, RealComm, RealGroup, RealRequest};

pub const MAGIC: &[u8; 8] = b"MANAKIN1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

pub const SECTIONS: [&str; 7] = [
    "app-state",
    "vtables",
    "counters",
    "p2p-list",
    "replay-log",
    "active-comms",
    "drained-buffers",
];

/// Virtual handle tables plus results of collectives completed by the
/// pre-image sweep but not yet seen by the application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablesSection {
    pub requests: TableSnapshot,
    pub comms: TableSnapshot,
    pub groups: TableSnapshot,
    pub coll_results: Vec<(VirtualId, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommsSection {
    pub world: CommDescriptor,
    pub comms: Vec<CommDescriptor>,
    pub groups: Vec<GroupDescriptor>,
    pub coll_seq: Vec<((u64, u32), u64)>,
    pub gid_ordinals: Vec<(u64, u32)>,
    pub emulation_floor: Vec<((u64, u32), u64)>,
}

/// One process's checkpoint, decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointImage {
    pub version: u32,
    pub epoch: u32,
    pub world_size: u32,
    pub rank: Rank,
    pub round: u32,
    /// Opaque application state (workload program and its position).
    pub app: Vec<u8>,
    pub tables: TablesSection,
    pub counters: PairCounters,
    pub p2p: Vec<P2pRecord>,
    pub replay: Vec<ReplayEntry>,
    pub comms: CommsSection,
    pub drained: Vec<DrainedBuffer>,
}

impl Encode for TablesSection {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.requests)
            .put(&self.comms)
            .put(&self.groups)
            .seq(&self.coll_results);
    }
}

impl Decode for TablesSection {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let s = TablesSection {
            requests: r.get()?,
            comms: r.get()?,
            groups: r.get()?,
            coll_results: r.seq()?,
        };
        if s.requests.kind != HandleKind::Request
            || s.comms.kind != HandleKind::Comm
            || s.groups.kind != HandleKind::Group
        {
            return Err(r.invalid("handle tables out of order"));
        }
        Ok(s)
    }
}

impl Encode for CommsSection {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.world)
            .seq(&self.comms)
            .seq(&self.groups)
            .seq(&self.coll_seq)
            .seq(&self.gid_ordinals)
            .seq(&self.emulation_floor);
    }
}

impl Decode for CommsSection {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(CommsSection {
            world: r.get()?,
            comms: r.seq()?,
            groups: r.seq()?,
            coll_seq: r.seq()?,
            gid_ordinals: r.seq()?,
            emulation_floor: r.seq()?,
        })
    }
}

/// Sizes of each part of an encoded image, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageLayout {
    pub version: u32,
    pub epoch: u32,
    pub world_size: u32,
    pub rank: Rank,
    pub sections: Vec<(&'static str, usize)>,
    pub crc: u32,
    pub total: usize,
}

fn section<T: Encode>(w: &mut Writer, v: &T) {
    w.bytes(&v.to_bytes());
}

impl CheckpointImage {
    /// Captures the wrapper state of `up` together with its application blob.
    pub fn capture(up: &Upper, epoch: u32, round: u32, app: Vec<u8>) -> Self {
        CheckpointImage {
            version: FORMAT_VERSION,
            epoch,
            world_size: up.size() as u32,
            rank: up.rank(),
            round,
            app,
            tables: TablesSection {
                requests: up.requests.snapshot(),
                comms: up.comms.snapshot(),
                groups: up.groups.snapshot(),
                coll_results: up.coll_results.clone().into_iter().collect(),
            },
            counters: up.counters.clone(),
            p2p: up.p2p.values().cloned().collect(),
            replay: up.replay.iter().filter(|e| !e.completed).cloned().collect(),
            comms: CommsSection {
                world: up.active.world.clone(),
                comms: up.active.comms.values().cloned().collect(),
                groups: up.active.groups.values().cloned().collect(),
                coll_seq: up.coll_seq.clone().into_iter().collect(),
                gid_ordinals: up.gid_ordinals.clone().into_iter().collect(),
                emulation_floor: up.emulation_floor.clone().into_iter().collect(),
            },
            drained: up.drained.clone(),
        }
    }

    /// Wrapper state with every live handle unbound; the restart engine
    /// rebinds each one against the new lower half.
    pub fn restore_upper(&self) -> Result<Upper> {
        let placeholder_req = RealRequest::Null;
        let placeholder_comm = RealComm {
            id: u32::MAX,
            epoch: u32::MAX,
        };
        let placeholder_group = RealGroup {
            id: u32::MAX,
            epoch: u32::MAX,
        };
        let requests = VirtualTable::from_snapshot(&self.tables.requests, placeholder_req);
        let comms = VirtualTable::from_snapshot(&self.tables.comms, placeholder_comm);
        let groups = VirtualTable::from_snapshot(&self.tables.groups, placeholder_group);
        let inconsistent = |what: String| Error::RestartInconsistency(format!("rank {}: {what}", self.rank));

        for d in std::iter::once(&self.comms.world).chain(&self.comms.comms) {
            if !comms.contains(d.vid) {
                return Err(inconsistent(format!("communicator {} missing from table", d.vid)));
            }
        }
        if comms.len() != self.comms.comms.len() + 1 {
            return Err(inconsistent("communicator table and active list disagree".into()));
        }
        for g in &self.comms.groups {
            if !groups.contains(g.vid) {
                return Err(inconsistent(format!("group {} missing from table", g.vid)));
            }
        }
        for rec in &self.p2p {
            if !requests.contains(rec.vreq) {
                return Err(inconsistent(format!("p2p record {} missing from table", rec.vreq)));
            }
        }
        for e in &self.replay {
            if !requests.contains(e.vreq) {
                return Err(inconsistent(format!("replay entry {} missing from table", e.vreq)));
            }
        }
        let active = ActiveCommList {
            world: self.comms.world.clone(),
            comms: self.comms.comms.iter().map(|d| (d.vid, d.clone())).collect(),
            groups: self.comms.groups.iter().map(|g| (g.vid, g.clone())).collect(),
        };
        Ok(Upper::from_parts(
            self.rank,
            self.world_size as usize,
            requests,
            comms,
            groups,
            self.counters.clone(),
            self.p2p.iter().map(|r| (r.vreq, r.clone())).collect(),
            self.replay.clone(),
            active,
            self.drained.clone(),
            self.tables.coll_results.iter().cloned().collect(),
            self.comms.coll_seq.iter().copied().collect(),
            self.comms.gid_ordinals.iter().copied().collect(),
            self.comms.emulation_floor.iter().copied().collect::<BTreeMap<_, _>>(),
        ))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC)
            .u32(self.version)
            .u32(self.epoch)
            .u32(self.world_size)
            .u32(self.rank);
        let mut app = Writer::new();
        app.u32(self.round).raw(&self.app);
        w.bytes(&app.into_bytes());
        section(&mut w, &self.tables);
        section(&mut w, &self.counters);
        let mut p2p = Writer::new();
        p2p.seq(&self.p2p);
        w.bytes(&p2p.into_bytes());
        let mut replay = Writer::new();
        replay.seq(&self.replay);
        w.bytes(&replay.into_bytes());
        section(&mut w, &self.comms);
        let mut drained = Writer::new();
        drained.seq(&self.drained);
        w.bytes(&drained.into_bytes());
        let mut out = w.into_bytes();
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks framing, CRC and version, returning the header fields and
    /// the raw section bodies.
    fn split(bytes: &[u8]) -> Result<(ImageLayout, Vec<&[u8]>)> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::CorruptImage(format!(
                "{} bytes is shorter than a header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptImage("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::CorruptImage(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader::new(&body[8..], "image header");
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleImage(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let epoch = r.u32()?;
        let world_size = r.u32()?;
        let rank = r.u32()?;
        let mut sections = Vec::with_capacity(SECTIONS.len());
        let mut sizes = Vec::with_capacity(SECTIONS.len());
        for name in SECTIONS {
            let n = r
                .u64()
                .map_err(|_| Error::CorruptImage(format!("section {name} missing")))?;
            let body = r
                .take(usize::try_from(n).unwrap_or(usize::MAX))
                .map_err(|_| Error::CorruptImage(format!("section {name} truncated: declares {n} bytes")))?;
            sections.push(body);
            sizes.push((name, body.len()));
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptImage(format!(
                "{} stray bytes after sections",
                r.remaining()
            )));
        }
        Ok((
            ImageLayout {
                version,
                epoch,
                world_size,
                rank,
                sections: sizes,
                crc: stored,
                total: bytes.len(),
            },
            sections,
        ))
    }

    pub fn layout(bytes: &[u8]) -> Result<ImageLayout> {
        Self::split(bytes).map(|(l, _)| l)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (layout, s) = Self::split(bytes)?;
        let mut app = Reader::new(s[0], "app-state");
        let round = app.u32()?;
        let app_blob = app.take(app.remaining())?.to_vec();
        let mut p2p = Reader::new(s[3], "p2p-list");
        let p2p_records: Vec<P2pRecord> = p2p.seq()?;
        p2p.finish()?;
        let mut replay = Reader::new(s[4], "replay-log");
        let replay_entries: Vec<ReplayEntry> = replay.seq()?;
        replay.finish()?;
        let mut drained = Reader::new(s[6], "drained-buffers");
        let drained_buffers: Vec<DrainedBuffer> = drained.seq()?;
        drained.finish()?;
        let img = CheckpointImage {
            version: layout.version,
            epoch: layout.epoch,
            world_size: layout.world_size,
            rank: layout.rank,
            round,
            app: app_blob,
            tables: TablesSection::from_bytes(s[1], "vtables")?,
            counters: PairCounters::from_bytes(s[2], "counters")?,
            p2p: p2p_records,
            replay: replay_entries,
            comms: CommsSection::from_bytes(s[5], "active-comms")?,
            drained: drained_buffers,
        };
        if img.rank >= img.world_size || img.counters.sent_bytes.len() != img.world_size as usize {
            return Err(Error::CorruptImage(
                "rank or counter width disagrees with world size".into(),
            ));
        }
        Ok(img)
    }
}

pub fn round_dir(dir: &Path, round: u32) -> PathBuf {
    dir.join(format!("round_{round}"))
}

pub fn image_path(dir: &Path, round: u32, rank: Rank) -> PathBuf {
    round_dir(dir, round).join(format!("rank_{rank}.img"))
}

/// Writes one file per image. Files go to a scratch directory that is
/// renamed into place only after every write succeeded, so a round is
/// either complete on disk or absent.
pub fn write_images(dir: &Path, round: u32, images: &[CheckpointImage]) -> Result<Vec<PathBuf>> {
    let final_dir = round_dir(dir, round);
    let scratch = dir.join(format!(".round_{round}.partial"));
    let attempt = || -> Result<()> {
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        for img in images {
            fs::write(scratch.join(format!("rank_{}.img", img.rank)), img.encode())?;
        }
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&scratch, &final_dir)?;
        Ok(())
    };
    if let Err(e) = attempt() {
        let _ = fs::remove_dir_all(&scratch);
        return Err(Error::CheckpointAborted(format!("writing round {round}: {e}")));
    }
    Ok(images.iter().map(|img| image_path(dir, round, img.rank)).collect())
}

/// Reads every rank's image of a round.
pub fn read_images(dir: &Path, round: u32, world_size: usize) -> Result<Vec<CheckpointImage>> {
    (0..world_size as u32)
        .map(|rank| {
            let path = image_path(dir, round, rank);
            let bytes = fs::read(&path).map_err(|e| Error::RestartIncomplete(format!("{}: {e}", path.display())))?;
            CheckpointImage::decode(&bytes)
        })
        .collect()
}
