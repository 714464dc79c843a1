use super::*;

fn lh(n: usize) -> LowerHalf {
    LowerHalf::init(n, 0).unwrap()
}

fn recv_now(lh: &mut LowerHalf, p: Rank, src: Source, tag: TagSel) -> TestOutcome {
    let w = lh.world();
    let r = lh.irecv(p, src, tag, w).unwrap();
    lh.test(p, r).unwrap()
}

#[test]
fn init_rejects_empty_world() {
    assert!(matches!(LowerHalf::init(0, 0), Err(Error::InvalidConfiguration(_))));
}

#[test]
fn init_builds_world() {
    let mut one = lh(1);
    let w = one.world();
    assert_eq!(one.translate_group_ranks(0, w).unwrap(), vec![0]);
    let four = lh(4);
    assert_eq!(four.comm_members(four.world()).unwrap(), &[0, 1, 2, 3]);
    assert_eq!(four.p2p_in_flight(), 0);
}

#[test]
fn isend_enqueues_and_completes_eagerly() {
    let mut l = lh(2);
    let w = l.world();
    let r = l.isend(0, 1, 0, w, vec![0; 100]).unwrap();
    assert_eq!(l.p2p_in_flight(), 1);
    assert!(l.is_complete(r).unwrap());
    assert!(l.test(0, r).unwrap().done);
}

#[test]
fn isend_out_of_range_rank() {
    let mut l = lh(4);
    let w = l.world();
    assert!(matches!(
        l.isend(0, 5, 0, w, vec![]),
        Err(Error::InvalidRank { rank: 5, .. })
    ));
}

#[test]
fn recv_pending_on_empty_network_then_matches() {
    let mut l = lh(2);
    let w = l.world();
    let r = l.irecv(1, Source::Rank(0), TagSel::Tag(3), w).unwrap();
    assert_eq!(l.test(1, r).unwrap(), TestOutcome::default());
    l.isend(0, 1, 3, w, vec![9; 100]).unwrap();
    let out = l.test(1, r).unwrap();
    assert!(out.done);
    assert_eq!(
        out.status,
        Some(Status {
            src: 0,
            tag: 3,
            bytes: 100
        })
    );
    assert_eq!(out.data.unwrap(), vec![9; 100]);
    assert_eq!(l.p2p_in_flight(), 0);
    // Completed requests keep reporting completion.
    assert!(l.test(1, r).unwrap().done);
}

#[test]
fn null_request_is_trivially_complete() {
    let mut l = lh(1);
    let out = l.test(0, RealRequest::Null).unwrap();
    assert!(out.done);
    assert!(out.status.is_none());
}

#[test]
fn probe_sees_unclaimed_only() {
    let mut l = lh(2);
    let w = l.world();
    assert_eq!(l.iprobe(1, Source::Any, TagSel::Any, w).unwrap(), None);
    l.isend(0, 1, 0, w, vec![1; 100]).unwrap();
    let env = l.iprobe(1, Source::Any, TagSel::Any, w).unwrap().unwrap();
    assert_eq!(env.bytes, 100);
    // A posted receive claims the message; probe can no longer see it.
    let r = l.irecv(1, Source::Rank(0), TagSel::Tag(0), w).unwrap();
    assert_eq!(l.iprobe(1, Source::Any, TagSel::Any, w).unwrap(), None);
    assert_eq!(l.p2p_in_flight(), 1);
    assert!(l.is_complete(r).unwrap());
}

#[test]
fn posted_receive_claims_later_arrival() {
    let mut l = lh(2);
    let w = l.world();
    let r = l.irecv(1, Source::Any, TagSel::Any, w).unwrap();
    l.isend(0, 1, 5, w, vec![4]).unwrap();
    assert_eq!(l.iprobe_any(1, 0).unwrap(), None);
    assert_eq!(l.test(1, r).unwrap().data, Some(vec![4]));
}

#[test]
fn wildcard_tag_ignores_internal_tags() {
    let mut l = lh(2);
    let w = l.world();
    l.isend(0, 1, -2, w, vec![1]).unwrap();
    assert!(!recv_now(&mut l, 1, Source::Any, TagSel::Any).done);
    // Still unclaimed, so the drain probe sees it.
    assert_eq!(l.iprobe_any(1, 0).unwrap().unwrap().tag, -2);
}

/// Exhaustive oracle: with two senders and every send order, an ANY_SOURCE
/// receive takes whichever message arrived first.
#[test]
fn any_source_takes_lowest_arrival() {
    for order in [[1u32, 2], [2, 1]] {
        let mut l = lh(3);
        let w = l.world();
        for &s in &order {
            l.isend(s, 0, 0, w, vec![s as u8]).unwrap();
        }
        let first = recv_now(&mut l, 0, Source::Any, TagSel::Any);
        let second = recv_now(&mut l, 0, Source::Any, TagSel::Any);
        assert_eq!(first.status.unwrap().src, order[0]);
        assert_eq!(second.status.unwrap().src, order[1]);
    }
}

#[test]
fn stale_handles_rejected_everywhere() {
    let mut old = lh(2);
    let ow = old.world();
    let oreq = old.isend(0, 1, 0, ow, vec![]).unwrap();
    let ogroup = old.group_create(Actor::Restart, &[0, 1]).unwrap();
    let mut new = LowerHalf::init(2, 1).unwrap();
    let stale = |e: Result<_>| matches!(e, Err(Error::StaleHandle { .. }));
    assert!(stale(new.isend(0, 1, 0, ow, vec![]).map(|_| ())));
    assert!(stale(new.irecv(0, Source::Any, TagSel::Any, ow).map(|_| ())));
    assert!(stale(new.test(0, oreq).map(|_| ())));
    assert!(stale(new.is_complete(oreq).map(|_| ())));
    assert!(stale(new.iprobe(0, Source::Any, TagSel::Any, ow).map(|_| ())));
    assert!(stale(
        new.collective(0, ow, CollectiveKind::Barrier, vec![]).map(|_| ())
    ));
    assert!(stale(
        new.icollective(0, ow, CollectiveKind::Barrier, vec![]).map(|_| ())
    ));
    assert!(stale(new.comm_split(0, ow, 0, 0).map(|_| ())));
    assert!(stale(new.translate_group_ranks(0, ow).map(|_| ())));
    assert!(stale(new.group_members(ogroup).map(|_| ())));
    assert!(stale(new.settled(oreq).map(|_| ())));
}

#[test]
fn barrier_blocks_until_all_arrive() {
    let mut l = lh(2);
    let w = l.world();
    let CollectiveStart::Blocked(r0) = l.collective(0, w, CollectiveKind::Barrier, vec![]).unwrap() else {
        panic!("first arrival must block");
    };
    assert!(!l.is_complete(r0).unwrap());
    assert!(matches!(
        l.collective(1, w, CollectiveKind::Barrier, vec![]).unwrap(),
        CollectiveStart::Completed(_)
    ));
    assert!(l.is_complete(r0).unwrap());
}

#[test]
fn bcast_root_returns_alone() {
    let mut l = lh(2);
    let w = l.world();
    let kind = CollectiveKind::Bcast { root: 0 };
    assert_eq!(
        l.collective(0, w, kind, vec![7]).unwrap(),
        CollectiveStart::Completed(vec![7])
    );
    assert_eq!(l.open_rendezvous().len(), 1);
    assert_eq!(
        l.collective(1, w, kind, vec![]).unwrap(),
        CollectiveStart::Completed(vec![7])
    );
    assert!(l.open_rendezvous().is_empty());
}

#[test]
fn bcast_nonroot_blocks_until_root() {
    let mut l = lh(2);
    let w = l.world();
    let kind = CollectiveKind::Bcast { root: 0 };
    let CollectiveStart::Blocked(r1) = l.collective(1, w, kind, vec![]).unwrap() else {
        panic!("non-root must wait for the root");
    };
    l.collective(0, w, kind, vec![3, 3]).unwrap();
    assert_eq!(l.test(1, r1).unwrap().data, Some(vec![3, 3]));
}

#[test]
fn bcast_root_settles_when_everyone_arrived() {
    let mut l = lh(3);
    let w = l.world();
    let kind = CollectiveKind::Bcast { root: 0 };
    let r0 = l.icollective(0, w, kind, vec![1]).unwrap();
    assert!(l.is_complete(r0).unwrap());
    assert!(!l.settled(r0).unwrap());
    l.icollective(1, w, kind, vec![]).unwrap();
    assert!(!l.settled(r0).unwrap());
    l.icollective(2, w, kind, vec![]).unwrap();
    assert!(l.settled(r0).unwrap());
}

#[test]
fn allreduce_sum_on_four() {
    let mut l = lh(4);
    let w = l.world();
    let kind = CollectiveKind::Allreduce(ReduceOp::Sum);
    let reqs: Vec<_> = (0..4)
        .map(|p| {
            l.icollective(p, w, kind, (p as u64 + 1).to_le_bytes().to_vec())
                .unwrap()
        })
        .collect();
    for (p, r) in reqs.into_iter().enumerate() {
        let out = l.test(p as Rank, r).unwrap();
        assert_eq!(out.data.unwrap(), 10u64.to_le_bytes().to_vec());
    }
}

#[test]
fn mismatched_kind_is_protocol_violation() {
    let mut l = lh(2);
    let w = l.world();
    l.icollective(0, w, CollectiveKind::Barrier, vec![]).unwrap();
    assert!(matches!(
        l.icollective(1, w, CollectiveKind::Alltoall, vec![0, 0]),
        Err(Error::ProtocolViolation(_))
    ));
}

#[test]
fn ibarrier_and_ibcast() {
    let mut l = lh(2);
    let w = l.world();
    let a = l.icollective(0, w, CollectiveKind::Barrier, vec![]).unwrap();
    assert!(!l.test(0, a).unwrap().done);
    let b = l.icollective(1, w, CollectiveKind::Barrier, vec![]).unwrap();
    assert!(l.test(0, a).unwrap().done);
    assert!(l.test(1, b).unwrap().done);

    // Non-blocking bcast delivers the same payload as the blocking one.
    let kind = CollectiveKind::Bcast { root: 1 };
    let r0 = l.icollective(0, w, kind, vec![]).unwrap();
    l.icollective(1, w, kind, b"xyz".to_vec()).unwrap();
    let mut blocking = lh(2);
    let bw = blocking.world();
    blocking.collective(1, bw, kind, b"xyz".to_vec()).unwrap();
    let CollectiveStart::Completed(expected) = blocking.collective(0, bw, kind, vec![]).unwrap() else {
        panic!()
    };
    assert_eq!(l.test(0, r0).unwrap().data, Some(expected));
}

fn split_all(l: &mut LowerHalf, c: RealComm, colors: &[(i64, i64)]) -> Vec<RealComm> {
    let reqs: Vec<_> = colors
        .iter()
        .enumerate()
        .map(|(p, &(color, key))| l.comm_split(p as Rank, c, color, key).unwrap())
        .collect();
    reqs.into_iter()
        .enumerate()
        .map(|(p, r)| l.split_result(p as Rank, r).unwrap().unwrap())
        .collect()
}

#[test]
fn split_by_parity() {
    let mut l = lh(4);
    let w = l.world();
    let comms = split_all(&mut l, w, &[(0, 0), (1, 0), (0, 0), (1, 0)]);
    assert_eq!(comms[0], comms[2]);
    assert_eq!(comms[1], comms[3]);
    assert_eq!(l.comm_members(comms[0]).unwrap(), &[0, 2]);
    assert_eq!(l.translate_group_ranks(1, comms[1]).unwrap(), vec![1, 3]);
    assert_eq!(l.created_comms(), 2);
}

#[test]
fn split_same_color_keeps_world_order_and_key_reorders() {
    let mut l = lh(3);
    let w = l.world();
    let same = split_all(&mut l, w, &[(0, 0), (0, 0), (0, 0)]);
    assert_eq!(l.comm_members(same[0]).unwrap(), &[0, 1, 2]);
    let rev = split_all(&mut l, w, &[(0, 2), (0, 1), (0, 0)]);
    assert_eq!(l.comm_members(rev[0]).unwrap(), &[2, 1, 0]);
}

#[test]
fn split_of_split_is_usable() {
    let mut l = lh(4);
    let w = l.world();
    let child = split_all(&mut l, w, &[(0, 0), (0, 0), (0, 0), (1, 0)]);
    let sub = child[0];
    let reqs: Vec<_> = [0u32, 1, 2]
        .iter()
        .map(|&p| l.comm_split(p, sub, i64::from(p % 2), 0).unwrap())
        .collect();
    let grand: Vec<_> = reqs
        .into_iter()
        .zip([0u32, 1, 2])
        .map(|(r, p)| l.split_result(p, r).unwrap().unwrap())
        .collect();
    assert_eq!(l.comm_members(grand[0]).unwrap(), &[0, 2]);
    l.isend(0, 2, 0, grand[0], vec![1]).unwrap();
    let r = l.irecv(2, Source::Rank(0), TagSel::Tag(0), grand[0]).unwrap();
    assert!(l.test(2, r).unwrap().done);
}

#[test]
fn create_group_shares_handles_per_ordinal() {
    let mut l = lh(2);
    let a0 = l.comm_create_group(0, &[1, 0]).unwrap();
    let a1 = l.comm_create_group(1, &[1, 0]).unwrap();
    assert_eq!(a0, a1);
    let b0 = l.comm_create_group(0, &[1, 0]).unwrap();
    assert_ne!(a0, b0);
    assert_eq!(l.created_comms(), 2);
    assert!(l.comm_create_group(0, &[1]).is_err());
}

#[test]
fn translate_generates_no_network_events() {
    let mut l = lh(4);
    let w = l.world();
    let before = l.events().len();
    l.translate_group_ranks(2, w).unwrap();
    assert!(l.events().events()[before..].iter().all(|e| !e.op.is_network()));
}

#[test]
fn fingerprint_ignores_event_log() {
    let mut a = LowerHalf::with_events(2, 0, true).unwrap();
    let mut b = LowerHalf::with_events(2, 0, false).unwrap();
    for l in [&mut a, &mut b] {
        let w = l.world();
        l.isend(0, 1, 0, w, vec![1, 2]).unwrap();
    }
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert!(b.events().is_empty());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Non-overtaking: on one channel, receives see sends in send order
        /// no matter how sends and receive posts interleave.
        #[test]
        fn channel_fifo(ops in proptest::collection::vec(any::<bool>(), 1..24)) {
            let mut l = lh(2);
            let w = l.world();
            let mut sent = 0u8;
            let mut reqs = Vec::new();
            for send in ops {
                if send {
                    l.isend(0, 1, 4, w, vec![sent]).unwrap();
                    sent += 1;
                } else {
                    reqs.push(l.irecv(1, Source::Rank(0), TagSel::Tag(4), w).unwrap());
                }
            }
            let mut got = Vec::new();
            for r in reqs {
                if let Some(d) = l.test(1, r).unwrap().data { got.push(d[0]); }
            }
            loop {
                let out = recv_now(&mut l, 1, Source::Rank(0), TagSel::Tag(4));
                match out.data { Some(d) => got.push(d[0]), None => break }
            }
            let expected: Vec<u8> = (0..sent).collect();
            prop_assert_eq!(got, expected);
        }

        /// Conservation: bytes removed by receives equal bytes enqueued, per
        /// channel, once everything is drained.
        #[test]
        fn conservation(sends in proptest::collection::vec((0u32..3, 0u32..3, 0usize..40), 0..30)) {
            let mut l = lh(3);
            let w = l.world();
            let mut sent = std::collections::BTreeMap::new();
            for &(s, d, len) in &sends {
                l.isend(s, d, 0, w, vec![0; len]).unwrap();
                *sent.entry((s, d)).or_insert(0usize) += len;
            }
            let mut recvd = std::collections::BTreeMap::new();
            for d in 0..3 {
                loop {
                    let out = recv_now(&mut l, d, Source::Any, TagSel::Any);
                    let Some(st) = out.status else { break };
                    *recvd.entry((st.src, d)).or_insert(0usize) += st.bytes;
                }
            }
            sent.retain(|_, v| *v > 0);
            recvd.retain(|_, v| *v > 0);
            prop_assert_eq!(sent, recvd);
            prop_assert_eq!(l.p2p_in_flight(), 0);
        }
    }
}
