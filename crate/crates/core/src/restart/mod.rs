//! Restart engine: validates a round of images, starts a fresh lower half
//! one epoch later and rebinds every live virtual handle against it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::coordinator::{read_images, CheckpointImage, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::interpose::{Binding, Direction, Upper};
use crate::runtime::{Actor, LowerHalf, Rank, RealComm, RealRequest};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RestartReport {
    pub epoch: u32,
    pub round: u32,
    /// Communicators created by the restart itself.
    pub comms_created: usize,
    pub groups_created: usize,
    pub collectives_reissued: usize,
    pub receives_reposted: usize,
    pub buffers_restored: usize,
}

/// A restarted job, ready to resume its programs.
#[derive(Debug)]
pub struct Restarted {
    pub lh: LowerHalf,
    pub ups: Vec<Upper>,
    /// Application blobs, indexed by rank.
    pub apps: Vec<Vec<u8>>,
    pub report: RestartReport,
}

/// Checks that `images` form one complete, consistent round and returns
/// them ordered by rank.
pub fn validate(mut images: Vec<CheckpointImage>) -> Result<Vec<CheckpointImage>> {
    let Some(first) = images.first() else {
        return Err(Error::RestartIncomplete("no images".into()));
    };
    let (size, round, epoch) = (first.world_size as usize, first.round, first.epoch);
    for img in &images {
        if img.version != FORMAT_VERSION {
            return Err(Error::IncompatibleImage(format!(
                "rank {} has format version {}",
                img.rank, img.version
            )));
        }
        if img.world_size as usize != size || img.round != round || img.epoch != epoch {
            return Err(Error::RestartInconsistency(format!(
                "rank {} is from round {} epoch {} size {}, rank {} from round {round} epoch {epoch} size {size}",
                img.rank, img.round, img.epoch, img.world_size, first.rank
            )));
        }
    }
    images.sort_by_key(|i| i.rank);
    for (i, img) in images.iter().enumerate() {
        if img.rank as usize != i {
            return Err(Error::RestartIncomplete(format!(
                "image for rank {i} is missing or duplicated"
            )));
        }
    }
    if images.len() != size {
        return Err(Error::RestartIncomplete(format!(
            "{} of {size} images present",
            images.len()
        )));
    }
    Ok(images)
}

/// Every communicator live at some process, keyed by identity and ordered
/// smallest first. Two different member lists under one identity mean a
/// group-id collision.
fn communicators(images: &[CheckpointImage]) -> Result<Vec<((u64, u32), Vec<Rank>)>> {
    let mut seen: BTreeMap<(u64, u32), Vec<Rank>> = BTreeMap::new();
    for img in images {
        for d in &img.comms.comms {
            match seen.get(&d.identity()) {
                Some(m) if *m != d.members => {
                    return Err(Error::RestartInconsistency(format!(
                        "group id {:016x} names both {m:?} and {:?}",
                        d.gid, d.members
                    )))
                }
                Some(_) => {}
                None => {
                    seen.insert(d.identity(), d.members.clone());
                }
            }
        }
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_by_key(|(id, members)| (members.len(), *id));
    Ok(out)
}

/// Restarts from in-memory images.
pub fn restart(images: Vec<CheckpointImage>, record_events: bool) -> Result<Restarted> {
    let images = validate(images)?;
    let n = images.len();
    let epoch = images[0].epoch + 1;
    let mut lh = LowerHalf::with_events(n, epoch, record_events)?;
    let mut report = RestartReport {
        epoch,
        round: images[0].round,
        ..RestartReport::default()
    };

    let mut real: BTreeMap<(u64, u32), RealComm> = BTreeMap::new();
    for (id, members) in communicators(&images)? {
        let c = lh.create_comm_registered(Actor::Restart, &members, u64::from(id.1))?;
        real.insert(id, c);
    }
    report.comms_created = lh.created_comms();

    let mut ups = Vec::with_capacity(n);
    let mut apps = Vec::with_capacity(n);
    for img in images {
        let mut up = img.restore_upper()?;
        up.rebind_comm(img.comms.world.vid, lh.world())?;
        for d in &img.comms.comms {
            up.rebind_comm(d.vid, real[&d.identity()])?;
        }
        for g in &img.comms.groups {
            let rg = lh.group_create(Actor::Restart, &g.members)?;
            up.rebind_group(g.vid, rg)?;
            report.groups_created += 1;
        }
        for entry in img.replay.iter().filter(|e| !e.completed) {
            up.reissue(&mut lh, entry)?;
            report.collectives_reissued += 1;
        }
        report.buffers_restored += img.drained.len();
        for rec in img.p2p.iter().filter(|r| !r.completed) {
            if rec.dir == Direction::Send {
                return Err(Error::RestartInconsistency(format!(
                    "rank {}: send {} was not complete at checkpoint",
                    img.rank, rec.vreq
                )));
            }
            up.post_recv(&mut lh, rec.vreq)?;
            report.receives_reposted += 1;
        }
        for (vid, binding) in up.requests.iter_sorted() {
            if let Binding::Real(r) = binding {
                if !matches!(r, RealRequest::Live { epoch: e, .. } if e == epoch) {
                    return Err(Error::RestartInconsistency(format!(
                        "rank {}: request {vid} has no live record to rebuild from",
                        img.rank
                    )));
                }
            }
        }
        ups.push(up);
        apps.push(img.app);
    }
    Ok(Restarted { lh, ups, apps, report })
}

/// Restarts from the images of `round` under `dir`.
pub fn restart_from_dir(dir: &Path, round: u32, world_size: usize, record_events: bool) -> Result<Restarted> {
    restart(read_images(dir, round, world_size)?, record_events)
}
