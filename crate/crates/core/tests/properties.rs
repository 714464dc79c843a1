//! Harness-level properties: straggler handling, injection coverage,
//! workload oracles and deadlock detection.

use manakin::harness::{
    ckpt_sweep, run, Call, Outcome, PhaseClass, RunConfig, RunResult, Sim, SweepConfig, Workload, WorkloadKind,
};
use manakin::interpose::Mode;
use manakin::runtime::{Actor, Event, EventOp};

const INTERNAL_COMM: u64 = 1;
const DRAINING: u64 = 2;

/// Events of the first epoch between the checkpoint request and the start
/// of the drain.
fn pending_window(events: &[Event]) -> &[Event] {
    let start = events
        .iter()
        .position(|e| e.op == EventOp::CheckpointRequest)
        .expect("a checkpoint was requested");
    let len = events[start..]
        .iter()
        .position(|e| e.actor == Actor::Coordinator && e.op == EventOp::Phase && e.subject == DRAINING)
        .expect("the drain started");
    &events[start..start + len]
}

fn straggler_run(n: usize, delay: u32, request: impl FnMut(&Sim) -> bool) -> (Workload, Vec<Event>, RunResult) {
    let w = Workload::new(WorkloadKind::Straggler, n, 2).unwrap().with_delay(delay);
    let mut cfg = RunConfig::new(w, Mode::Hybrid2pc, 5);
    cfg.record_events = true;
    let mut sim = Sim::new(cfg).unwrap();
    assert!(sim.run_until(request).unwrap());
    sim.request_checkpoint().unwrap();
    let r = sim.run().unwrap();
    let first_epoch = r.events[0].clone();
    (w, first_epoch, r)
}

#[test]
fn straggler_is_waited_out_without_collective_steps_by_others() {
    let n = 4;
    let delay = 10_000;
    let straggler = n as u32 - 1;
    let native = run(RunConfig::new(
        Workload::new(WorkloadKind::Straggler, n, 2).unwrap().with_delay(delay),
        Mode::Hybrid2pc,
        5,
    ))
    .unwrap();
    // Request at the midpoint of the gap, and before anyone has moved. (A
    // request after some rank entered the real barrier would rightly let
    // the others join that instance on the real path.)
    let mid = |s: &Sim| matches!(s.procs[straggler as usize].call, Some(Call::Compute { left }) if left <= delay / 2);
    let early = |_: &Sim| true;
    for (name, request_mid) in [("midpoint", true), ("early", false)] {
        let (_, events, r) = if request_mid {
            straggler_run(n, delay, mid)
        } else {
            straggler_run(n, delay, early)
        };
        assert!(r.verified(), "{name}: {:?}", r.outcome);
        assert_eq!(r.output_bytes(), native.output_bytes(), "{name}");
        let window = pending_window(&events);
        let others_collective = window.iter().filter(|e| {
            e.op == EventOp::CollectiveArrive
                && e.subject != INTERNAL_COMM
                && matches!(e.actor, Actor::Process(p) if p != straggler)
        });
        assert_eq!(
            others_collective.count(),
            0,
            "{name}: non-straggler collective step while pending"
        );
        if request_mid {
            // The others sit in the real barrier, so the checkpoint can only
            // complete once the straggler has joined it.
            let joined = window
                .iter()
                .any(|e| e.actor == Actor::Process(straggler) && e.op == EventOp::CollectiveArrive);
            assert!(joined, "straggler never joined before the drain");
            let ck = &r.checkpoints[0];
            assert!(ck.committed_at - ck.requested_at >= u64::from(delay) / 2, "{ck:?}");
        }
    }
}

#[test]
fn straggler_without_delay_checkpoints_immediately() {
    let (_, _, r) = straggler_run(3, 0, |s| s.steps() >= 2);
    assert!(r.verified());
    assert_eq!(r.checkpoints.len(), 1);
}

#[test]
fn sweep_covers_every_phase_class() {
    let report = ckpt_sweep(&SweepConfig {
        procs: vec![2, 4],
        min_points: 30,
        ..SweepConfig::default()
    })
    .unwrap();
    assert!(report.passed());
    let cov = report.coverage();
    for c in PhaseClass::ALL {
        assert!(cov.contains(&c), "no injection in {}", c.name());
    }
}

#[test]
fn storm_allreduce_matches_closed_form() {
    // Every op of the storm carries its expected result; a wrong allreduce
    // would count as a mismatch.
    for n in [2, 3, 7, 16] {
        for mode in Mode::ALL {
            let r = run(RunConfig::new(
                Workload::new(WorkloadKind::CollectiveStorm, n, 7).unwrap(),
                mode,
                1,
            ))
            .unwrap();
            assert!(r.verified(), "n={n} {mode}");
            assert_eq!(r.mismatches(), 0);
        }
    }
    assert!(Workload::new(WorkloadKind::CollectiveStorm, 0, 1).is_err());
}

#[test]
fn storm_keeps_the_communicator_list_bounded() {
    let short = run(RunConfig::new(
        Workload::new(WorkloadKind::CollectiveStorm, 4, 12).unwrap(),
        Mode::Hybrid2pc,
        1,
    ))
    .unwrap();
    let long = run(RunConfig::new(
        Workload::new(WorkloadKind::CollectiveStorm, 4, 120).unwrap(),
        Mode::Hybrid2pc,
        1,
    ))
    .unwrap();
    assert_eq!(short.max_comms, long.max_comms);
}

#[test]
fn deadlock_detector_has_no_false_positives() {
    for kind in WorkloadKind::ALL {
        for mode in Mode::ALL {
            if kind == WorkloadKind::BcastDeadlock && mode == Mode::NaiveBarrier {
                continue;
            }
            for seed in 0..5 {
                let w = Workload::new(kind, 2 + seed as usize, 4).unwrap();
                let r = run(RunConfig::new(w, mode, seed)).unwrap();
                assert_eq!(r.outcome, Outcome::Completed, "{kind} {mode} seed {seed}");
            }
        }
    }
}

#[test]
fn deadlock_report_names_a_real_cycle() {
    for seed in 0..20 {
        let w = Workload::new(WorkloadKind::BcastDeadlock, 3, 1).unwrap();
        let mut sim = Sim::new(RunConfig::new(w, Mode::NaiveBarrier, seed)).unwrap();
        let outcome = loop {
            if let Some(o) = sim.step().unwrap() {
                break o;
            }
        };
        let Outcome::Deadlock(report) = outcome else {
            panic!("seed {seed}: expected a deadlock");
        };
        // Nobody can move, and every blocked process waits on someone.
        for (p, up) in sim.procs.iter().zip(&sim.ups) {
            assert!(!p.ready(up, &sim.lh).unwrap());
        }
        assert!(!report.blocked.is_empty());
        assert!(report.blocked.iter().all(|b| !b.waits_for.is_empty()));
        let text = report.to_string();
        assert!(text.contains("rank 1 blocked in recv"), "{text}");
    }
}
