//! Workloads and their reference oracles.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hash::{fnv1a64_extend, splitmix64};
use crate::runtime::{CollectiveKind, Rank, ReduceOp};

use super::program::{Op, Program, RankOutput, Reg, WORLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorkloadKind {
    /// Ring exchange mixing blocking and non-blocking point-to-point calls.
    P2pRing,
    /// Allreduce, rotating bcast, alltoall and periodic communicator splits.
    CollectiveStorm,
    /// One slow rank arriving late at every collective.
    Straggler,
    /// A bcast whose root then sends to a rank that receives before its
    /// own bcast: fine natively, deadlocks behind an inserted barrier.
    BcastDeadlock,
    /// Creates 20 communicators and frees 15 in round 0, then uses the rest.
    CommChurn,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::P2pRing,
        WorkloadKind::CollectiveStorm,
        WorkloadKind::Straggler,
        WorkloadKind::BcastDeadlock,
        WorkloadKind::CommChurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::P2pRing => "p2p-ring",
            WorkloadKind::CollectiveStorm => "collective-storm",
            WorkloadKind::Straggler => "straggler",
            WorkloadKind::BcastDeadlock => "bcast-deadlock",
            WorkloadKind::CommChurn => "comm-churn",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfiguration(format!("unknown workload {s:?}")))
    }
}

/// Rounds between communicator splits in the collective storm.
pub const SPLIT_EVERY: u32 = 3;
/// Communicators created and freed by the churn workload.
pub const CHURN_CREATED: u32 = 20;
pub const CHURN_FREED: u32 = 15;

const SUB: Reg = 1;
const CHURN_BASE: Reg = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub n: usize,
    pub rounds: u32,
    /// Compute steps the straggler spends before each round's collectives.
    pub delay: u32,
}

fn u64s(vals: impl IntoIterator<Item = u64>) -> Vec<u8> {
    vals.into_iter().flat_map(u64::to_le_bytes).collect()
}

/// Ring payload from `src` in round `r`: a token plus 0–24 filler bytes.
pub fn ring_payload(src: Rank, r: u32) -> Vec<u8> {
    let token = u64::from(src + 1) * 1000 + u64::from(r);
    let mut out = token.to_le_bytes().to_vec();
    let mut state = token;
    for _ in 0..(r % 4) {
        out.extend_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// Bcast payload of `root` in round `r`.
fn bcast_payload(root: u32, r: u32) -> Vec<u8> {
    u64s([u64::from(root) << 32 | u64::from(r), 0x5eed ^ u64::from(r)])
}

impl Workload {
    pub fn new(kind: WorkloadKind, n: usize, rounds: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfiguration("at least one process is required".into()));
        }
        if kind == WorkloadKind::BcastDeadlock && n < 2 {
            return Err(Error::InvalidConfiguration(
                "bcast-deadlock needs at least two processes".into(),
            ));
        }
        if kind == WorkloadKind::CommChurn && rounds < 1 {
            return Err(Error::InvalidConfiguration(
                "comm-churn needs at least one round".into(),
            ));
        }
        Ok(Workload {
            kind,
            n,
            rounds,
            delay: 4 * n as u32 + 8,
        })
    }

    pub fn with_delay(mut self, delay: u32) -> Self {
        self.delay = delay;
        self
    }

    pub fn straggler(&self) -> Rank {
        self.n as Rank - 1
    }

    /// Ops of `rank` in `round`.
    pub fn ops(&self, rank: Rank, round: u32) -> Vec<Op> {
        match self.kind {
            WorkloadKind::P2pRing => self.ring(rank, round),
            WorkloadKind::CollectiveStorm => self.storm(rank, round),
            WorkloadKind::Straggler => self.straggle(rank, round),
            WorkloadKind::BcastDeadlock => self.bcast_deadlock(rank, round),
            WorkloadKind::CommChurn => self.churn(rank, round),
        }
    }

    fn ring(&self, i: Rank, r: u32) -> Vec<Op> {
        let n = self.n as Rank;
        let (next, prev) = ((i + 1) % n, (i + n - 1) % n);
        let tag = (r % 7) as i32;
        let payload = ring_payload(i, r);
        let expect = Some(ring_payload(prev, r));
        let send = Op::Send {
            dst: next,
            tag,
            comm: WORLD,
            payload: payload.clone(),
        };
        let recv = Op::Recv {
            src: prev,
            tag,
            comm: WORLD,
            expect,
        };
        match r % 3 {
            0 if i.is_multiple_of(2) => vec![send, recv],
            0 => vec![recv, send],
            1 => vec![
                Op::Irecv {
                    src: prev,
                    tag,
                    comm: WORLD,
                    req: 1,
                },
                Op::Isend {
                    dst: next,
                    tag,
                    comm: WORLD,
                    payload,
                    req: 2,
                },
                Op::Wait { req: 2 },
                Op::Wait { req: 1 },
            ],
            _ => vec![
                Op::Isend {
                    dst: next,
                    tag,
                    comm: WORLD,
                    payload,
                    req: 1,
                },
                recv,
                Op::Wait { req: 1 },
            ],
        }
    }

    /// Colour of `rank` for the split made at or before `round`.
    fn storm_color(rank: Rank, round: u32) -> i64 {
        i64::from((rank + round / SPLIT_EVERY) % 2)
    }

    fn storm(&self, i: Rank, r: u32) -> Vec<Op> {
        let n = self.n as u64;
        let root = r % self.n as u32;
        let mut ops = vec![
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Allreduce(ReduceOp::Sum),
                contribution: u64s([u64::from(i + r)]),
                expect: Some(u64s([n * (n - 1) / 2 + n * u64::from(r)])),
            },
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Bcast { root },
                contribution: if i == root { bcast_payload(root, r) } else { Vec::new() },
                expect: Some(bcast_payload(root, r)),
            },
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Alltoall,
                contribution: u64s((0..n).map(|j| u64::from(i) * n + j + u64::from(r))),
                expect: Some(u64s((0..n).map(|j| j * n + u64::from(i) + u64::from(r)))),
            },
        ];
        let color = Self::storm_color(i, r);
        if r.is_multiple_of(SPLIT_EVERY) {
            if r > 0 {
                ops.push(Op::Free { comm: SUB });
            }
            ops.push(Op::Split {
                parent: WORLD,
                color,
                key: -i64::from(i),
                out: SUB,
            });
        }
        let peers = (0..self.n as Rank).filter(|&m| Self::storm_color(m, r) == color);
        let top = peers.map(|m| u64::from(m) * 7 + u64::from(r)).max().unwrap_or(0);
        ops.extend([
            Op::Coll {
                comm: SUB,
                kind: CollectiveKind::Allreduce(ReduceOp::Max),
                contribution: u64s([u64::from(i) * 7 + u64::from(r)]),
                expect: Some(u64s([top])),
            },
            Op::Icoll {
                comm: SUB,
                kind: CollectiveKind::Allgather,
                contribution: u64s([u64::from(i)]),
                req: 2,
            },
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Barrier,
                contribution: Vec::new(),
                expect: Some(Vec::new()),
            },
            Op::Wait { req: 2 },
        ]);
        ops
    }

    fn straggle(&self, i: Rank, r: u32) -> Vec<Op> {
        let n = self.n as u64;
        let mut ops = Vec::new();
        if i == self.straggler() {
            ops.push(Op::Compute { steps: self.delay });
        }
        ops.extend([
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Barrier,
                contribution: Vec::new(),
                expect: Some(Vec::new()),
            },
            Op::Coll {
                comm: WORLD,
                kind: CollectiveKind::Allreduce(ReduceOp::Sum),
                contribution: u64s([u64::from(i + r)]),
                expect: Some(u64s([n * (n - 1) / 2 + n * u64::from(r)])),
            },
        ]);
        ops
    }

    fn bcast_deadlock(&self, i: Rank, r: u32) -> Vec<Op> {
        let token = bcast_payload(0, r);
        let bcast = Op::Coll {
            comm: WORLD,
            kind: CollectiveKind::Bcast { root: 0 },
            contribution: if i == 0 { token.clone() } else { Vec::new() },
            expect: Some(token),
        };
        let note = u64s([u64::from(r) + 77]);
        match i {
            0 => vec![
                bcast,
                Op::Send {
                    dst: 1,
                    tag: 5,
                    comm: WORLD,
                    payload: note,
                },
            ],
            1 => vec![
                Op::Recv {
                    src: 0,
                    tag: 5,
                    comm: WORLD,
                    expect: Some(note),
                },
                bcast,
            ],
            _ => vec![bcast],
        }
    }

    fn churn(&self, i: Rank, r: u32) -> Vec<Op> {
        let n = self.n as u64;
        if r == 0 {
            let all: Vec<u32> = (0..self.n as u32).collect();
            let creates = (0..CHURN_CREATED).map(|k| Op::Create {
                parent: WORLD,
                members: all.clone(),
                out: CHURN_BASE + k as Reg,
            });
            let frees = (0..CHURN_FREED).map(|k| Op::Free {
                comm: CHURN_BASE + k as Reg,
            });
            return creates.chain(frees).collect();
        }
        (CHURN_FREED..CHURN_CREATED)
            .map(|k| Op::Coll {
                comm: CHURN_BASE + k as Reg,
                kind: CollectiveKind::Allreduce(ReduceOp::Sum),
                contribution: u64s([u64::from(i + r + k)]),
                expect: Some(u64s([n * (n - 1) / 2 + n * u64::from(r + k)])),
            })
            .collect()
    }

    /// Closed-form expected outputs, for workloads that have one.
    pub fn reference(&self) -> Option<Vec<RankOutput>> {
        if self.kind != WorkloadKind::P2pRing {
            return None;
        }
        let n = self.n as Rank;
        Some(
            (0..n)
                .map(|i| {
                    let prev = (i + n - 1) % n;
                    let rounds = u64::from(self.rounds);
                    let mut out = RankOutput {
                        rank: i,
                        sum: rounds * u64::from(prev + 1) * 1000 + rounds * rounds.saturating_sub(1) / 2,
                        ..RankOutput::default()
                    };
                    out.results = (0..self.rounds)
                        .map(|r| completion_digest(&ring_payload(prev, r)))
                        .collect();
                    out
                })
                .collect(),
        )
    }
}

impl Program for Workload {
    fn rounds(&self) -> u32 {
        self.rounds
    }

    fn ops(&self, rank: Rank, round: u32) -> Vec<Op> {
        Workload::ops(self, rank, round)
    }
}

/// Digest recorded for one completion carrying `data`.
pub fn completion_digest(data: &[u8]) -> u64 {
    fnv1a64_extend(
        fnv1a64_extend(0xcbf2_9ce4_8422_2325, &(data.len() as u64).to_le_bytes()),
        data,
    )
}
