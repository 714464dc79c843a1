//! Exhaustive interleaving exploration of small programs.
//!
//! Every schedule of a program is enumerated by depth-first search over
//! complete job states (lower half, wrappers, interpreters, coordinator),
//! with states deduplicated by hash. In hybrid mode the search also branches
//! on when a checkpoint is requested, so every request point is covered.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::hash::{Hash, Hasher};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Encode;
use crate::coordinator::{Coordinator, Phase};
use crate::error::{Error, Result};
use crate::interpose::{CollKey, Mode, Upper};
use crate::runtime::{CollectiveKind, LowerHalf, Rank, ReduceOp};

use super::program::{Op, Proc, Program, RankOutput, WORLD};

/// A single-round program given op by op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub ops: Vec<Vec<Op>>,
}

impl Program for Script {
    fn rounds(&self) -> u32 {
        1
    }

    fn ops(&self, rank: Rank, _round: u32) -> Vec<Op> {
        self.ops.get(rank as usize).cloned().unwrap_or_default()
    }
}

impl Script {
    pub fn n(&self) -> usize {
        self.ops.len()
    }

    /// The bcast pattern that an inserted barrier turns into a deadlock:
    /// the root sends after its bcast to a rank that receives before it.
    pub fn bcast_then_send(n: usize) -> Script {
        let bcast = |i: usize| Op::Coll {
            comm: WORLD,
            kind: CollectiveKind::Bcast { root: 0 },
            contribution: if i == 0 { vec![7; 8] } else { Vec::new() },
            expect: None,
        };
        let ops = (0..n)
            .map(|i| match i {
                0 => vec![
                    bcast(0),
                    Op::Send {
                        dst: 1,
                        tag: 5,
                        comm: WORLD,
                        payload: vec![1; 8],
                    },
                ],
                1 => vec![
                    Op::Recv {
                        src: 0,
                        tag: 5,
                        comm: WORLD,
                        expect: None,
                    },
                    bcast(1),
                ],
                _ => vec![bcast(i)],
            })
            .collect();
        Script { ops }
    }

    /// A random program on `n` ranks with at most `max_ops` ops per rank:
    /// world barriers, bcasts and allreduces interleaved with matched
    /// blocking or non-blocking point-to-point messages. Ops are laid out
    /// in one global order, so the program cannot deadlock natively.
    pub fn random(n: usize, max_ops: usize, seed: u64) -> Script {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops: Vec<Vec<Op>> = vec![Vec::new(); n];
        // Requests per rank that still need a wait, oldest first.
        let mut owed: Vec<Vec<u8>> = vec![Vec::new(); n];
        let mut next_req = vec![1u8; n];
        let len = |ops: &Vec<Vec<Op>>, owed: &Vec<Vec<u8>>, r: usize| ops[r].len() + owed[r].len();
        for step in 0..(3 * max_ops) {
            let coll = n > 1 && rng.random_range(0..3) == 0;
            if coll || n == 1 {
                if (0..n).any(|r| len(&ops, &owed, r) + 1 > max_ops) {
                    continue;
                }
                let root = rng.random_range(0..n) as u32;
                let kind = match rng.random_range(0..4) {
                    0 => CollectiveKind::Barrier,
                    1 => CollectiveKind::Bcast { root },
                    2 => CollectiveKind::Allreduce(ReduceOp::Sum),
                    _ => CollectiveKind::Allreduce(ReduceOp::Max),
                };
                for (r, list) in ops.iter_mut().enumerate() {
                    let contribution = match kind {
                        CollectiveKind::Barrier => Vec::new(),
                        CollectiveKind::Bcast { root } if root as usize != r => Vec::new(),
                        _ => (r as u64 * 3 + step as u64).to_le_bytes().to_vec(),
                    };
                    list.push(Op::Coll {
                        comm: WORLD,
                        kind,
                        contribution,
                        expect: None,
                    });
                }
            } else {
                let src = rng.random_range(0..n);
                let dst = (src + rng.random_range(1..n)) % n;
                let nb_send = rng.random_range(0..2) == 0;
                let nb_recv = rng.random_range(0..2) == 0;
                let (ssize, rsize) = (1 + usize::from(nb_send), 1 + usize::from(nb_recv));
                if len(&ops, &owed, src) + ssize > max_ops || len(&ops, &owed, dst) + rsize > max_ops {
                    continue;
                }
                let tag = rng.random_range(0..2);
                let payload = ((src as u64) << 16 | step as u64).to_le_bytes().to_vec();
                if nb_send {
                    let req = next_req[src];
                    next_req[src] += 1;
                    ops[src].push(Op::Isend {
                        dst: dst as u32,
                        tag,
                        comm: WORLD,
                        payload,
                        req,
                    });
                    owed[src].push(req);
                } else {
                    ops[src].push(Op::Send {
                        dst: dst as u32,
                        tag,
                        comm: WORLD,
                        payload,
                    });
                }
                if nb_recv {
                    let req = next_req[dst];
                    next_req[dst] += 1;
                    ops[dst].push(Op::Irecv {
                        src: src as u32,
                        tag,
                        comm: WORLD,
                        req,
                    });
                    owed[dst].push(req);
                } else {
                    ops[dst].push(Op::Recv {
                        src: src as u32,
                        tag,
                        comm: WORLD,
                        expect: None,
                    });
                }
            }
            // Settle some outstanding requests now rather than at the end.
            for r in 0..n {
                if !owed[r].is_empty() && rng.random_range(0..3) == 0 {
                    let req = owed[r].remove(0);
                    ops[r].push(Op::Wait { req });
                }
            }
        }
        for (r, list) in owed.into_iter().enumerate() {
            ops[r].extend(list.into_iter().map(|req| Op::Wait { req }));
        }
        Script { ops }
    }
}

/// How collectives are executed during exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploration {
    /// Every collective on the lower half.
    Native,
    /// Every collective emulated with point-to-point messages.
    Emulated,
    /// Real collectives until a checkpoint is requested, which may happen
    /// at any state; the checkpoint is taken as soon as it is safe.
    Hybrid { checkpoints: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct ExploreReport {
    pub states: usize,
    /// Distinct final outputs over all completed schedules.
    pub outputs: BTreeSet<Vec<u8>>,
    /// Distinct states in which no process can move and some are not done.
    pub deadlocks: usize,
    pub completions: usize,
    pub checkpoints: usize,
}

#[derive(Clone)]
struct Node {
    lh: LowerHalf,
    ups: Vec<Upper>,
    procs: Vec<Proc>,
    coord: Coordinator,
    taken: u32,
}

impl Node {
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.lh.fingerprint().hash(&mut h);
        self.ups.hash(&mut h);
        self.procs.hash(&mut h);
        self.coord.phase().hash(&mut h);
        self.coord.active_keys().hash(&mut h);
        self.taken.hash(&mut h);
        h.finish()
    }

    fn pending(&self) -> bool {
        self.coord.phase() == Phase::CkptRequested
    }
}

/// Explores every schedule of `script`. Fails if more than `max_states`
/// distinct states are reached.
pub fn explore(script: &Script, how: Exploration, max_states: usize) -> Result<ExploreReport> {
    let n = script.n();
    let mode = match how {
        Exploration::Emulated => Mode::P2pEmulation,
        _ => Mode::Hybrid2pc,
    };
    let budget = match how {
        Exploration::Hybrid { checkpoints } => checkpoints,
        _ => 0,
    };
    let mut lh = LowerHalf::with_events(n, 0, false)?;
    let ups: Vec<Upper> = (0..n as Rank).map(|r| Upper::init(&mut lh, r)).collect::<Result<_>>()?;
    let procs = ups.iter().map(|u| Proc::new(u.rank(), u.world())).collect();
    let root = Node {
        lh,
        ups,
        procs,
        coord: Coordinator::new(),
        taken: 0,
    };
    let mut report = ExploreReport::default();
    let mut seen = HashSet::new();
    let mut stack = vec![root];
    while let Some(mut node) = stack.pop() {
        if node.pending() && node.coord.poll_safe(&node.lh, &mut node.ups) {
            // A safe pending checkpoint is taken before anything else moves.
            let apps = node.procs.iter().map(Encode::to_bytes).collect();
            let ck = node.coord.checkpoint(&mut node.lh, &mut node.ups, apps)?;
            if !ck.drain.balanced() || node.lh.p2p_in_flight() != 0 {
                return Err(Error::ProtocolViolation("drain left the network unbalanced".into()));
            }
            node.coord.resume(&mut node.lh, &mut node.ups)?;
            node.taken += 1;
            report.checkpoints += 1;
        }
        if !seen.insert(node.fingerprint()) {
            continue;
        }
        report.states += 1;
        if report.states > max_states {
            return Err(Error::InvalidConfiguration(format!(
                "exploration exceeded {max_states} states"
            )));
        }
        if node.procs.iter().all(|p| p.done) {
            report.completions += 1;
            let outputs: Vec<RankOutput> = node.procs.iter().map(|p| p.out.clone()).collect();
            report
                .outputs
                .insert(outputs.iter().map(RankOutput::render).collect::<String>().into_bytes());
            continue;
        }
        let mut moved = false;
        if node.taken < budget && !node.coord.phase().in_round() {
            let mut next = node.clone();
            next.coord.request_checkpoint(&mut next.lh, &mut next.ups)?;
            stack.push(next);
        }
        let active: BTreeSet<CollKey> = if node.pending() {
            node.coord.active_keys()
        } else {
            BTreeSet::new()
        };
        let is_active = |k: &CollKey| active.contains(k);
        for p in 0..n {
            if !node.procs[p].ready(&node.ups[p], &node.lh)? {
                continue;
            }
            moved = true;
            let mut next = node.clone();
            next.procs[p].step(script, &mut next.ups[p], &mut next.lh, mode, &is_active)?;
            stack.push(next);
        }
        if !moved {
            report.deadlocks += 1;
        }
    }
    Ok(report)
}

/// Outcome of comparing emulated and hybrid exploration against native.
#[derive(Debug, Clone)]
pub struct Equivalence {
    pub native: ExploreReport,
    pub emulated: ExploreReport,
    pub hybrid: ExploreReport,
}

impl Equivalence {
    /// Emulation produced exactly the native outputs and deadlocks nowhere
    /// the native program does not.
    pub fn holds(&self) -> bool {
        let same = |r: &ExploreReport| r.outputs == self.native.outputs && r.completions > 0;
        let no_new_deadlock = |r: &ExploreReport| r.deadlocks == 0 || self.native.deadlocks > 0;
        same(&self.emulated) && same(&self.hybrid) && no_new_deadlock(&self.emulated) && no_new_deadlock(&self.hybrid)
    }
}

pub fn check_equivalence(script: &Script, max_states: usize) -> Result<Equivalence> {
    Ok(Equivalence {
        native: explore(script, Exploration::Native, max_states)?,
        emulated: explore(script, Exploration::Emulated, max_states)?,
        hybrid: explore(script, Exploration::Hybrid { checkpoints: 1 }, max_states)?,
    })
}
