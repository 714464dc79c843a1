//! Collective kinds and their result functions.
//!
//! Results are pure functions of the per-member contributions taken in local
//! rank order, so any implementation that gathers the same contributions
//! (the rendezvous engine here, or the point-to-point emulation in the
//! wrapper layer) produces bit-identical output.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReduceOp {
    Sum,
    Max,
    Xor,
}

impl ReduceOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Xor => a ^ b,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 0,
            ReduceOp::Max => 1,
            ReduceOp::Xor => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ReduceOp::Sum),
            1 => Some(ReduceOp::Max),
            2 => Some(ReduceOp::Xor),
            _ => None,
        }
    }
}

/// Collective operation kinds. `root` is a local rank in the communicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollectiveKind {
    Barrier,
    Bcast { root: u32 },
    Allreduce(ReduceOp),
    Alltoall,
    Allgather,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Barrier => "barrier",
            CollectiveKind::Bcast { .. } => "bcast",
            CollectiveKind::Allreduce(_) => "allreduce",
            CollectiveKind::Alltoall => "alltoall",
            CollectiveKind::Allgather => "allgather",
        }
    }

    /// Bcast root returns as soon as its payload is deposited.
    pub fn completes_on_arrival(self, local: u32) -> bool {
        matches!(self, CollectiveKind::Bcast { root } if root == local)
    }

    pub fn root(self) -> Option<u32> {
        match self {
            CollectiveKind::Bcast { root } => Some(root),
            _ => None,
        }
    }
}

/// Validates a single contribution against the kind and communicator size.
pub fn check_contribution(kind: CollectiveKind, size: usize, data: &[u8]) -> Result<()> {
    match kind {
        CollectiveKind::Allreduce(_) if !data.len().is_multiple_of(8) => Err(Error::ProtocolViolation(format!(
            "allreduce contribution of {} bytes is not a whole number of u64 lanes",
            data.len()
        ))),
        CollectiveKind::Alltoall if !data.len().is_multiple_of(size) => Err(Error::ProtocolViolation(format!(
            "alltoall contribution of {} bytes does not split into {size} blocks",
            data.len()
        ))),
        CollectiveKind::Bcast { root } if root as usize >= size => Err(Error::InvalidRank {
            rank: i64::from(root),
            size,
        }),
        _ => Ok(()),
    }
}

fn equal_lengths(kind: CollectiveKind, contributions: &[Vec<u8>]) -> Result<usize> {
    let len = contributions.first().map_or(0, Vec::len);
    if contributions.iter().any(|c| c.len() != len) {
        return Err(Error::ProtocolViolation(format!(
            "{} contributions have differing lengths",
            kind.name()
        )));
    }
    Ok(len)
}

/// Per-member results given every member's contribution, in local rank order.
pub fn results(kind: CollectiveKind, contributions: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    let size = contributions.len();
    match kind {
        CollectiveKind::Barrier => Ok(vec![Vec::new(); size]),
        CollectiveKind::Bcast { root } => {
            let payload = contributions
                .get(root as usize)
                .ok_or(Error::InvalidRank {
                    rank: i64::from(root),
                    size,
                })?
                .clone();
            Ok(vec![payload; size])
        }
        CollectiveKind::Allreduce(op) => {
            let reduced = reduce(op, contributions)?;
            Ok(vec![reduced; size])
        }
        CollectiveKind::Alltoall => {
            let len = equal_lengths(kind, contributions)?;
            let block = len / size.max(1);
            Ok((0..size)
                .map(|r| {
                    contributions
                        .iter()
                        .flat_map(|c| c[r * block..(r + 1) * block].iter().copied())
                        .collect()
                })
                .collect())
        }
        CollectiveKind::Allgather => {
            equal_lengths(kind, contributions)?;
            let all: Vec<u8> = contributions.concat();
            Ok(vec![all; size])
        }
    }
}

/// Lane-wise reduction of equal-length contributions in the given order.
pub fn reduce(op: ReduceOp, contributions: &[Vec<u8>]) -> Result<Vec<u8>> {
    let len = equal_lengths(CollectiveKind::Allreduce(op), contributions)?;
    if len % 8 != 0 {
        return Err(Error::ProtocolViolation(format!(
            "allreduce contribution of {len} bytes is not a whole number of u64 lanes"
        )));
    }
    let mut lanes: Vec<u64> = lanes_of(&contributions[0]);
    for c in &contributions[1..] {
        for (acc, v) in lanes.iter_mut().zip(lanes_of(c)) {
            *acc = op.apply(*acc, v);
        }
    }
    Ok(lanes.iter().flat_map(|l| l.to_le_bytes()).collect())
}

fn lanes_of(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte lane")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(v: u64) -> Vec<u8> {
        v.to_le_bytes().to_vec()
    }

    #[test]
    fn allreduce_sum_of_one_to_four() {
        let c: Vec<_> = (1..=4).map(word).collect();
        let r = results(CollectiveKind::Allreduce(ReduceOp::Sum), &c).unwrap();
        assert!(r.iter().all(|x| *x == word(10)));
    }

    #[test]
    fn max_and_xor() {
        let c = vec![word(5), word(9), word(3)];
        assert_eq!(reduce(ReduceOp::Max, &c).unwrap(), word(9));
        assert_eq!(reduce(ReduceOp::Xor, &c).unwrap(), word(5 ^ 9 ^ 3));
    }

    #[test]
    fn alltoall_transposes_blocks() {
        let c = vec![vec![0, 1], vec![10, 11]];
        let r = results(CollectiveKind::Alltoall, &c).unwrap();
        assert_eq!(r, vec![vec![0, 10], vec![1, 11]]);
    }

    #[test]
    fn bcast_copies_root() {
        let c = vec![vec![], vec![7, 7]];
        let r = results(CollectiveKind::Bcast { root: 1 }, &c).unwrap();
        assert_eq!(r, vec![vec![7, 7], vec![7, 7]]);
    }

    #[test]
    fn ragged_contributions_rejected() {
        let c = vec![word(1), vec![1, 2, 3, 4]];
        assert!(results(CollectiveKind::Allreduce(ReduceOp::Sum), &c).is_err());
        assert!(check_contribution(CollectiveKind::Alltoall, 3, &[1, 2]).is_err());
    }
}
