//! Counter-based drain of in-flight point-to-point messages.

use crate::error::{Error, Result};
use crate::interpose::{gid_of, DrainedBuffer, Upper};
use crate::runtime::{CollectiveKind, LowerHalf, Rank, Source, TagSel};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrainReport {
    /// Probe/test rounds across all processes.
    pub iterations: u64,
    pub bytes_drained: u64,
    pub messages_drained: u64,
    /// Receives completed by testing posted requests instead of probing.
    pub completed_by_test: u64,
    pub network_empty: bool,
    /// Pairs (from, to) whose sent count differs from received + buffered.
    pub imbalances: Vec<(Rank, Rank)>,
}

impl DrainReport {
    pub fn balanced(&self) -> bool {
        self.network_empty && self.imbalances.is_empty()
    }
}

fn buffered_from(up: &Upper, src: Rank) -> (u64, u64) {
    up.drained()
        .iter()
        .filter(|b| b.src == src)
        .fold((0, 0), |(b, m), buf| (b + buf.payload.len() as u64, m + 1))
}

/// Bytes and messages `to` still expects from `from`.
fn missing(expected: (u64, u64), up: &Upper, from: Rank) -> Result<(u64, u64)> {
    let c = up.counters();
    let (bb, bm) = buffered_from(up, from);
    let have = (c.recv_bytes[from as usize] + bb, c.recv_msgs[from as usize] + bm);
    if have.0 > expected.0 || have.1 > expected.1 {
        return Err(Error::ProtocolViolation(format!(
            "rank {} accounts for more from rank {from} than was sent",
            up.rank()
        )));
    }
    Ok((expected.0 - have.0, expected.1 - have.1))
}

/// Exchanges sent counters with an alltoall among the processes, then has
/// every process pull what it is still owed into drained buffers: probe
/// and receive while something is visible, otherwise test the receives it
/// already posted (a message matched by a posted receive is invisible to
/// probes). A round with no progress while counts are unbalanced fails
/// with the offending pair.
pub fn drain(lh: &mut LowerHalf, ups: &mut [Upper]) -> Result<DrainReport> {
    let n = ups.len();
    let internal = lh.internal_world();
    let mut reqs = Vec::with_capacity(n);
    for up in ups.iter() {
        let c = up.counters();
        let mut row = Vec::with_capacity(16 * n);
        for j in 0..n {
            row.extend_from_slice(&c.sent_bytes[j].to_le_bytes());
            row.extend_from_slice(&c.sent_msgs[j].to_le_bytes());
        }
        reqs.push(lh.icollective(up.rank(), internal, CollectiveKind::Alltoall, row)?);
    }
    let mut expected = Vec::with_capacity(n);
    for (up, req) in ups.iter().zip(reqs) {
        let out = lh.test(up.rank(), req)?;
        let data = out
            .data
            .filter(|_| out.done)
            .ok_or_else(|| Error::ProtocolViolation("counter exchange did not complete".into()))?;
        let from: Vec<(u64, u64)> = data
            .chunks_exact(16)
            .map(|c| {
                (
                    u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    u64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        expected.push(from);
    }

    let mut report = DrainReport::default();
    for (p, up) in ups.iter_mut().enumerate() {
        let me = p as Rank;
        loop {
            let owed: Vec<(Rank, (u64, u64))> = (0..n as Rank)
                .map(|i| Ok((i, missing(expected[p][i as usize], up, i)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|(_, m)| *m != (0, 0))
                .collect();
            if owed.is_empty() {
                break;
            }
            report.iterations += 1;
            let mut progress = false;
            for &(i, _) in &owed {
                while missing(expected[p][i as usize], up, i)? != (0, 0) {
                    let Some(env) = lh.iprobe_any(me, i)? else {
                        break;
                    };
                    let r = lh.irecv(me, Source::Rank(i), TagSel::Tag(env.tag), env.comm)?;
                    let out = lh.test(me, r)?;
                    let payload = out
                        .data
                        .filter(|_| out.done)
                        .ok_or_else(|| Error::ProtocolViolation("probed message could not be received".into()))?;
                    let gid = gid_of(lh.comm_members(env.comm)?);
                    let ordinal = lh.comm_ordinal(env.comm).ok_or_else(|| {
                        Error::ProtocolViolation(format!("message on unregistered communicator {}", env.comm.id))
                    })?;
                    report.bytes_drained += payload.len() as u64;
                    report.messages_drained += 1;
                    up.push_drained(DrainedBuffer {
                        src: i,
                        tag: env.tag,
                        gid,
                        ordinal: u32::try_from(ordinal).map_err(|_| {
                            Error::ProtocolViolation(format!("communicator ordinal {ordinal} out of range"))
                        })?,
                        vcomm: up.vcomm_of_real(env.comm.id),
                        payload,
                    });
                    progress = true;
                }
            }
            if !progress {
                let done = up.sweep(lh, true)? as u64;
                report.completed_by_test += done;
                progress = done > 0;
            }
            if !progress {
                let (from, (b, m)) = owed[0];
                return Err(Error::DrainStuck {
                    from,
                    to: me,
                    missing_bytes: b,
                    missing_msgs: m,
                });
            }
        }
    }

    report.network_empty = lh.p2p_in_flight() == 0;
    for i in 0..n {
        for j in 0..n {
            let sent = (ups[i].counters().sent_bytes[j], ups[i].counters().sent_msgs[j]);
            let c = ups[j].counters();
            let (bb, bm) = buffered_from(&ups[j], i as Rank);
            if sent != (c.recv_bytes[i] + bb, c.recv_msgs[i] + bm) {
                report.imbalances.push((i as Rank, j as Rank));
            }
        }
    }
    Ok(report)
}
