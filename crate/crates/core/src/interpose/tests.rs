use super::*;
use crate::error::Error;
use crate::runtime::{results, CollectiveKind, EventOp, LowerHalf, ReduceOp, Source, TagSel};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(n: usize) -> (LowerHalf, Vec<Upper>) {
    let mut lh = LowerHalf::init(n, 0).unwrap();
    let ups = (0..n as u32).map(|r| Upper::init(&mut lh, r).unwrap()).collect();
    (lh, ups)
}

/// Straight-line FNV-1a-64, written independently of `crate::hash`.
fn oracle_gid(members: &[u32]) -> u64 {
    let mut sorted = members.to_vec();
    sorted.sort();
    let mut h: u64 = 14695981039346656037;
    for m in sorted {
        for b in m.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
    }
    h
}

enum Call {
    Send(SendCall),
    Recv(RecvCall),
    Coll(CollectiveCall),
    Split(SplitCall),
}

#[derive(Debug, PartialEq)]
enum Out {
    Unit,
    Data(Vec<u8>),
    Comm(Option<VirtualId>),
}

fn ready(call: &Call, up: &Upper, lh: &LowerHalf) -> bool {
    match call {
        Call::Send(c) => c.ready(up, lh).unwrap(),
        Call::Recv(c) => c.ready(up, lh).unwrap(),
        Call::Coll(c) => c.ready(up, lh).unwrap(),
        Call::Split(c) => c.ready(up, lh).unwrap(),
    }
}

/// Runs one program (a queue of blocking calls) per process under a seeded
/// random pick among ready processes. Returns outputs, or `None` when no
/// process is ready while some still have calls left.
fn run(
    lh: &mut LowerHalf,
    ups: &mut [Upper],
    mut progs: Vec<Vec<Call>>,
    mode: Mode,
    seed: u64,
) -> Option<Vec<Vec<Out>>> {
    for p in &mut progs {
        p.reverse();
    }
    let mut outs: Vec<Vec<Out>> = ups.iter().map(|_| Vec::new()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let never = |_: &CollKey| false;
    loop {
        let live: Vec<usize> = (0..ups.len()).filter(|&i| !progs[i].is_empty()).collect();
        if live.is_empty() {
            return Some(outs);
        }
        let runnable: Vec<usize> = live
            .into_iter()
            .filter(|&i| ready(progs[i].last().unwrap(), &ups[i], lh))
            .collect();
        if runnable.is_empty() {
            return None;
        }
        let i = runnable[rng.random_range(0..runnable.len())];
        let up = &mut ups[i];
        let done = match progs[i].last_mut().unwrap() {
            Call::Send(c) => c.poll(up, lh).unwrap().map(|_| Out::Unit),
            Call::Recv(c) => c.poll(up, lh).unwrap().map(|d| Out::Data(d.data.unwrap_or_default())),
            Call::Coll(c) => c.poll(up, lh, mode, &never).unwrap().map(Out::Data),
            Call::Split(c) => c.poll(up, lh, mode, &never).unwrap().map(Out::Comm),
        };
        if let Some(o) = done {
            outs[i].push(o);
            progs[i].pop();
        }
    }
}

#[test]
fn send_counts_bytes_at_isend_time() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut call = SendCall::new(1, 5, w, vec![7; 100]);
    assert!(call.poll(&mut ups[0], &mut lh).unwrap().is_none());
    assert_eq!(ups[0].counters().sent_bytes[1], 100);
    assert_eq!(ups[0].counters().sent_msgs[1], 1);
    assert!(call.poll(&mut ups[0], &mut lh).unwrap().is_some());
}

#[test]
fn recv_counts_bytes_on_completion() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let progs = vec![
        vec![Call::Send(SendCall::new(1, 0, w, vec![1; 100]))],
        vec![Call::Recv(RecvCall::new(Source::Rank(0), TagSel::Tag(0), w))],
    ];
    let outs = run(&mut lh, &mut ups, progs, Mode::Hybrid2pc, 1).unwrap();
    assert_eq!(outs[1], vec![Out::Data(vec![1; 100])]);
    assert_eq!(ups[1].counters().recv_bytes[0], 100);
    assert_eq!(ups[0].counters().sent_bytes[1], 100);
}

#[test]
fn zero_byte_send_counts_an_envelope_only() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let progs = vec![
        vec![Call::Send(SendCall::new(1, 3, w, Vec::new()))],
        vec![Call::Recv(RecvCall::new(Source::Any, TagSel::Any, w))],
    ];
    let outs = run(&mut lh, &mut ups, progs, Mode::Hybrid2pc, 2).unwrap();
    assert_eq!(outs[1], vec![Out::Data(Vec::new())]);
    assert_eq!(ups[0].counters().sent_bytes[1], 0);
    assert_eq!(ups[0].counters().sent_msgs[1], 1);
    assert_eq!(ups[1].counters().recv_msgs[0], 1);
}

#[test]
fn unknown_vcomm_is_rejected() {
    let (mut lh, mut ups) = setup(2);
    let bogus = VirtualId(999);
    assert!(matches!(
        ups[0].isend(&mut lh, 1, 0, bogus, vec![]),
        Err(Error::UnknownVirtualHandle { kind: "comm", id: 999 })
    ));
    assert!(matches!(
        ups[0].irecv(&mut lh, Source::Any, TagSel::Any, bogus),
        Err(Error::UnknownVirtualHandle { .. })
    ));
    assert!(matches!(
        ups[0].comm_gid(bogus),
        Err(Error::UnknownVirtualHandle { .. })
    ));
}

#[test]
fn isends_get_distinct_ids() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let a = ups[0].isend(&mut lh, 1, 0, w, vec![1]).unwrap();
    let b = ups[0].isend(&mut lh, 1, 0, w, vec![2]).unwrap();
    assert_ne!(a, b);
    assert_eq!(ups[0].p2p_records().count(), 2);
}

#[test]
fn two_step_retirement_of_p2p_request() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut slot = Some(ups[0].isend(&mut lh, 1, 0, w, vec![9; 4]).unwrap());
    let v = slot.unwrap();

    let first = ups[0].test(&mut lh, &mut slot).unwrap().unwrap();
    assert!(first.first);
    assert_eq!(slot, Some(v), "step A leaves the application variable alone");
    assert_eq!(ups[0].request_binding(v).unwrap(), Binding::Null);
    assert_eq!(ups[0].request_table_len(), 1);

    let second = ups[0].test(&mut lh, &mut slot).unwrap().unwrap();
    assert!(!second.first);
    assert_eq!(slot, None);
    assert!(matches!(
        ups[0].request_binding(v),
        Err(Error::UnknownVirtualHandle { .. })
    ));
    assert_eq!(ups[0].request_table_len(), 0);
    assert_eq!(ups[0].p2p_records().count(), 0);

    // Testing the null sentinel again is trivially complete.
    assert!(ups[0].test(&mut lh, &mut slot).unwrap().is_some());
}

#[test]
fn receive_payload_is_delivered_once() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut rslot = Some(ups[1].irecv(&mut lh, Source::Rank(0), TagSel::Tag(4), w).unwrap());
    assert!(ups[1].test(&mut lh, &mut rslot).unwrap().is_none());
    ups[0].isend(&mut lh, 1, 4, w, vec![1, 2, 3]).unwrap();
    let a = ups[1].test(&mut lh, &mut rslot).unwrap().unwrap();
    assert_eq!(a.data, Some(vec![1, 2, 3]));
    assert_eq!(a.status.unwrap().src, 0);
    let b = ups[1].test(&mut lh, &mut rslot).unwrap().unwrap();
    assert_eq!(b.data, None);
    assert_eq!(rslot, None);
}

#[test]
fn wait_retires_in_one_call() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut slot = Some(ups[0].isend(&mut lh, 1, 0, w, vec![1]).unwrap());
    let done = ups[0].wait_step(&mut lh, &mut slot).unwrap().unwrap();
    assert!(done.first);
    assert_eq!(slot, None);
    assert_eq!(ups[0].request_table_len(), 0);
    let mut none = None;
    assert!(ups[0].wait_step(&mut lh, &mut none).unwrap().is_some());
}

#[test]
fn icollective_logged_then_retired_and_pruned() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut s0 = Some(ups[0].icollective(&mut lh, w, CollectiveKind::Barrier, vec![]).unwrap());
    assert_eq!(ups[0].replay_log().len(), 1);
    assert!(!ups[0].replay_log()[0].completed);
    assert!(ups[0].test(&mut lh, &mut s0).unwrap().is_none());
    let mut s1 = Some(ups[1].icollective(&mut lh, w, CollectiveKind::Barrier, vec![]).unwrap());
    assert!(ups[0].test(&mut lh, &mut s0).unwrap().is_some());
    assert_eq!(s0, None, "collective requests retire on the completing test");
    assert_eq!(ups[0].request_table_len(), 0);
    assert!(ups[0].replay_log().is_empty());
    assert!(ups[1].test(&mut lh, &mut s1).unwrap().is_some());
}

#[test]
fn drained_buffer_is_consumed_before_network() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[1].world();
    let gid = ups[1].comm_gid(w).unwrap();
    ups[1].push_drained(DrainedBuffer {
        src: 0,
        tag: 6,
        gid,
        ordinal: 0,
        vcomm: Some(w),
        payload: vec![42; 10],
    });
    // A newer message on the same channel must not overtake the buffer.
    ups[0].isend(&mut lh, 1, 6, w, vec![43; 10]).unwrap();
    let irecvs_before = count_ops(&lh, EventOp::Irecv);
    let mut call = RecvCall::new(Source::Rank(0), TagSel::Tag(6), w);
    assert!(call.ready(&ups[1], &lh).unwrap());
    assert!(call.poll(&mut ups[1], &mut lh).unwrap().is_none());
    let got = call.poll(&mut ups[1], &mut lh).unwrap().unwrap();
    assert_eq!(got.data, Some(vec![42; 10]));
    assert_eq!(
        count_ops(&lh, EventOp::Irecv),
        irecvs_before,
        "no lower-half receive issued"
    );
    assert_eq!(ups[1].counters().recv_bytes[0], 10);
    assert!(ups[1].drained().is_empty());
}

fn count_ops(lh: &LowerHalf, op: EventOp) -> usize {
    lh.events().events().iter().filter(|e| e.op == op).count()
}

#[test]
fn gid_matches_independent_fnv() {
    let (mut lh, mut ups) = setup(4);
    let w = ups[0].world();
    assert_eq!(ups[0].comm_gid(w).unwrap(), oracle_gid(&[0, 1, 2, 3]));
    let progs: Vec<Vec<Call>> = (0..4)
        .map(|r| vec![Call::Split(SplitCall::new(w, i64::from(r % 2), 0))])
        .collect();
    let outs = run(&mut lh, &mut ups, progs, Mode::Hybrid2pc, 3).unwrap();
    let Out::Comm(Some(even)) = outs[0][0] else { panic!() };
    let Out::Comm(Some(odd)) = outs[1][0] else { panic!() };
    let g_even = ups[0].comm_gid(even).unwrap();
    assert_eq!(g_even, oracle_gid(&[0, 2]));
    assert_eq!(ups[1].comm_gid(odd).unwrap(), oracle_gid(&[1, 3]));
    assert_ne!(g_even, ups[0].comm_gid(w).unwrap());
    // Same membership, same gid, at every member.
    let Out::Comm(Some(even2)) = outs[2][0] else { panic!() };
    assert_eq!(ups[2].comm_gid(even2).unwrap(), g_even);
    assert_eq!(ups[0].active_comms().comms.len(), 1);
}

#[test]
fn gid_and_translation_are_network_silent() {
    let (mut lh, mut ups) = setup(4);
    let w = ups[0].world();
    let before = lh.events().events().iter().filter(|e| e.op.is_network()).count();
    for u in &ups {
        u.comm_gid(w).unwrap();
        u.comm_rank(w).unwrap();
    }
    let g = ups[0].comm_group(&mut lh, w).unwrap();
    let sub = ups[0].group_incl(&mut lh, g, &[0, 2]).unwrap();
    assert_eq!(ups[0].group_descriptor(sub).unwrap().members, vec![0, 2]);
    let after = lh.events().events().iter().filter(|e| e.op.is_network()).count();
    assert_eq!(before, after);
}

#[test]
fn free_semantics() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    assert!(matches!(ups[0].comm_free(w), Err(Error::InvalidOperation(_))));
    let g = ups[0].comm_group(&mut lh, w).unwrap();
    let c = ups[0].comm_create(&mut lh, w, g).unwrap().unwrap();
    assert_eq!(ups[0].active_comms().comms.len(), 1);
    ups[0].comm_free(c).unwrap();
    assert!(ups[0].active_comms().comms.is_empty());
    assert!(matches!(
        ups[0].isend(&mut lh, 1, 0, c, vec![]),
        Err(Error::UnknownVirtualHandle { kind: "comm", .. })
    ));
    assert!(matches!(ups[0].comm_free(c), Err(Error::UnknownVirtualHandle { .. })));
    ups[0].group_free(g).unwrap();
    assert!(matches!(ups[0].group_free(g), Err(Error::UnknownVirtualHandle { .. })));
}

#[test]
fn comm_create_outside_group_returns_none() {
    let (mut lh, mut ups) = setup(3);
    let w = ups[0].world();
    let g = ups[2].comm_group(&mut lh, w).unwrap();
    let sub = ups[2].group_incl(&mut lh, g, &[0, 1]).unwrap();
    assert_eq!(ups[2].comm_create(&mut lh, w, sub).unwrap(), None);
}

fn contribution(kind: CollectiveKind, rank: u32, n: u32) -> Vec<u8> {
    match kind {
        CollectiveKind::Barrier => Vec::new(),
        CollectiveKind::Bcast { root } if root != rank => Vec::new(),
        CollectiveKind::Bcast { .. } => vec![0xb0 ^ rank as u8; 5],
        CollectiveKind::Allreduce(_) => {
            let mut v = Vec::new();
            v.extend_from_slice(&(u64::from(rank) * 3 + 1).to_le_bytes());
            v.extend_from_slice(&(u64::MAX - u64::from(rank)).to_le_bytes());
            v
        }
        CollectiveKind::Alltoall => (0..n * 2).map(|i| (rank * 16 + i) as u8).collect(),
        CollectiveKind::Allgather => vec![rank as u8; 3],
    }
}

fn all_kinds(n: u32) -> Vec<CollectiveKind> {
    let mut kinds = vec![
        CollectiveKind::Barrier,
        CollectiveKind::Allreduce(ReduceOp::Sum),
        CollectiveKind::Allreduce(ReduceOp::Max),
        CollectiveKind::Allreduce(ReduceOp::Xor),
        CollectiveKind::Alltoall,
        CollectiveKind::Allgather,
    ];
    kinds.extend((0..n).map(|root| CollectiveKind::Bcast { root }));
    kinds
}

#[test]
fn emulation_matches_lower_half_results() {
    for n in 1..=4u32 {
        for kind in all_kinds(n) {
            let contribs: Vec<Vec<u8>> = (0..n).map(|r| contribution(kind, r, n)).collect();
            // Non-root bcast contributions are ignored by both sides.
            let expected = results(kind, &contribs).unwrap();
            for mode in Mode::ALL {
                for seed in 0..5 {
                    let (mut lh, mut ups) = setup(n as usize);
                    let w = ups[0].world();
                    let progs = (0..n)
                        .map(|r| vec![Call::Coll(CollectiveCall::new(w, kind, contribs[r as usize].clone()))])
                        .collect();
                    let outs = run(&mut lh, &mut ups, progs, mode, seed)
                        .unwrap_or_else(|| panic!("{kind:?} n={n} {mode} deadlocked"));
                    for r in 0..n as usize {
                        assert_eq!(
                            outs[r],
                            vec![Out::Data(expected[r].clone())],
                            "{kind:?} n={n} {mode} rank {r}"
                        );
                    }
                    assert_eq!(lh.p2p_in_flight(), 0);
                    assert!(ups.iter().all(|u| u.request_table_len() == 0));
                }
            }
        }
    }
}

#[test]
fn allreduce_sum_same_in_every_mode() {
    for mode in Mode::ALL {
        let (mut lh, mut ups) = setup(4);
        let w = ups[0].world();
        let progs = (0..4u64)
            .map(|r| {
                vec![Call::Coll(CollectiveCall::new(
                    w,
                    CollectiveKind::Allreduce(ReduceOp::Sum),
                    (r + 1).to_le_bytes().to_vec(),
                ))]
            })
            .collect();
        let outs = run(&mut lh, &mut ups, progs, mode, 9).unwrap();
        for o in outs {
            assert_eq!(o, vec![Out::Data(10u64.to_le_bytes().to_vec())]);
        }
    }
}

/// Rank 0 roots a bcast and then sends; rank 1 receives and then joins the
/// bcast. Natively fine, since a bcast root does not wait.
fn deadlock_programs(w: VirtualId) -> Vec<Vec<Call>> {
    vec![
        vec![
            Call::Coll(CollectiveCall::new(w, CollectiveKind::Bcast { root: 0 }, vec![5; 8])),
            Call::Send(SendCall::new(1, 0, w, vec![1])),
        ],
        vec![
            Call::Recv(RecvCall::new(Source::Rank(0), TagSel::Tag(0), w)),
            Call::Coll(CollectiveCall::new(w, CollectiveKind::Bcast { root: 0 }, vec![])),
        ],
    ]
}

#[test]
fn inserted_barrier_deadlocks_bcast_scenario() {
    for seed in 0..20 {
        let (mut lh, mut ups) = setup(2);
        let w = ups[0].world();
        assert!(run(&mut lh, &mut ups, deadlock_programs(w), Mode::NaiveBarrier, seed).is_none());
        for mode in [Mode::P2pEmulation, Mode::Hybrid2pc] {
            let (mut lh, mut ups) = setup(2);
            let outs = run(&mut lh, &mut ups, deadlock_programs(w), mode, seed).unwrap();
            assert_eq!(outs[1][1], Out::Data(vec![5; 8]));
        }
    }
}

#[test]
fn hybrid_switches_to_emulation_when_pending() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    for u in &mut ups {
        u.ctx.ckpt_pending = true;
    }
    let progs = (0..2)
        .map(|_| vec![Call::Coll(CollectiveCall::new(w, CollectiveKind::Barrier, vec![]))])
        .collect();
    run(&mut lh, &mut ups, progs, Mode::Hybrid2pc, 0).unwrap();
    assert_eq!(count_ops(&lh, EventOp::CollectiveArrive), 0);
    assert!(ups.iter().all(|u| u.stats.emulated_collectives == 1));
}

#[test]
fn blocked_real_collective_is_reported() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut c = CollectiveCall::new(w, CollectiveKind::Barrier, vec![]);
    assert!(c
        .poll(&mut ups[0], &mut lh, Mode::Hybrid2pc, &|_| false)
        .unwrap()
        .is_none());
    let rep = ups[0].report(&lh);
    assert!(rep.in_collective && !rep.safe);
    assert_eq!(rep.gid, Some(oracle_gid(&[0, 1])));
    assert_eq!(rep.active.len(), 1);
    assert!(!c.ready(&ups[0], &lh).unwrap());
}

#[test]
fn unsettled_bcast_root_keeps_instance_active() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let mut root = CollectiveCall::new(w, CollectiveKind::Bcast { root: 0 }, vec![1]);
    assert!(root
        .poll(&mut ups[0], &mut lh, Mode::Hybrid2pc, &|_| false)
        .unwrap()
        .is_some());
    let rep = ups[0].report(&lh);
    assert!(rep.safe && !rep.in_collective);
    assert_eq!(rep.active.len(), 1);
    let key = rep.active[0];
    // The other member joins the real instance because it is active.
    ups[1].ctx.ckpt_pending = true;
    let mut leaf = CollectiveCall::new(w, CollectiveKind::Bcast { root: 0 }, vec![]);
    let got = leaf
        .poll(&mut ups[1], &mut lh, Mode::Hybrid2pc, &|k| *k == key)
        .unwrap();
    assert_eq!(got, Some(vec![1]));
    assert!(ups[0].report(&lh).active.is_empty());
}

#[test]
fn emulation_floor_forces_emulation() {
    let (mut lh, mut ups) = setup(2);
    let w = ups[0].world();
    let id = ups[0].active_comms().world.identity();
    let floors = std::collections::BTreeMap::from([(id, (1u64, vec![0, 1]))]);
    for u in &mut ups {
        u.set_emulation_floors(&floors);
    }
    let progs = (0..2)
        .map(|_| {
            vec![
                Call::Coll(CollectiveCall::new(w, CollectiveKind::Barrier, vec![])),
                Call::Coll(CollectiveCall::new(w, CollectiveKind::Barrier, vec![])),
            ]
        })
        .collect();
    run(&mut lh, &mut ups, progs, Mode::Hybrid2pc, 0).unwrap();
    // First instance emulated, second real.
    assert!(ups
        .iter()
        .all(|u| u.stats.emulated_collectives == 1 && u.stats.real_collectives == 1));
    assert!(ups[0].emulation_floors().is_empty());
}

#[test]
fn virtual_ids_are_never_reused() {
    let mut t: VirtualTable<u32> = VirtualTable::new(HandleKind::Request);
    let a = t.insert(1);
    t.remove(a).unwrap();
    let b = t.insert(2);
    assert_ne!(a, b);
    assert!(matches!(
        t.get(a),
        Err(Error::UnknownVirtualHandle { kind: "request", .. })
    ));
    assert!(matches!(t.rebind(a, 3), Err(Error::RestartInconsistency(_))));
    t.rebind(b, 4).unwrap();
    assert_eq!(t.real(b).unwrap(), 4);
}

#[test]
fn table_snapshot_round_trip() {
    use crate::codec::{Decode, Encode};
    let mut t: VirtualTable<u32> = VirtualTable::new(HandleKind::Comm);
    let a = t.insert(1);
    let b = t.insert_null();
    t.insert(3);
    t.remove(a).unwrap();
    let snap = t.snapshot();
    let back = TableSnapshot::from_bytes(&snap.to_bytes(), "test").unwrap();
    assert_eq!(back, snap);
    let rebuilt = VirtualTable::from_snapshot(&back, 0u32);
    assert_eq!(rebuilt.next_id(), t.next_id());
    assert_eq!(rebuilt.get(b).unwrap(), Binding::Null);
}

#[test]
fn calls_round_trip_through_codec() {
    use crate::codec::{Decode, Encode};
    let (mut lh, mut ups) = setup(3);
    let w = ups[0].world();
    let mut c = CollectiveCall::new(w, CollectiveKind::Allgather, vec![1, 2]);
    c.poll(&mut ups[1], &mut lh, Mode::P2pEmulation, &|_| false).unwrap();
    assert!(c.is_emulating());
    let back = CollectiveCall::from_bytes(&c.to_bytes(), "test").unwrap();
    assert_eq!(back, c);
    let s = SendCall::new(2, 1, w, vec![3; 3]);
    assert_eq!(SendCall::from_bytes(&s.to_bytes(), "test").unwrap(), s);
    let sp = SplitCall::new(w, 1, -4);
    assert_eq!(SplitCall::from_bytes(&sp.to_bytes(), "test").unwrap(), sp);
}
