//! Acceptance criteria. Each test prints one PASS/FAIL line for its
//! criterion (written straight to stderr so it shows even when the test
//! harness captures output).

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use manakin::coordinator::{image_path, CheckpointImage};
use manakin::harness::{
    check_equivalence, ckpt_sweep, endurance, par_map, run, EnduranceReport, Outcome, RunConfig, Script, Sim,
    SweepConfig, SweepReport, Workload, WorkloadKind, CHURN_CREATED, CHURN_FREED,
};
use manakin::interpose::Mode;
use manakin::runtime::{Actor, EventOp};
use manakin::Error;

fn verdict(criterion: u32, title: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[criterion {criterion}] {status}: {title} — {detail}"
    );
}

/// Sweeps shared by criteria 1 and 4, one per mode.
fn sweeps() -> &'static Vec<(Mode, SweepReport, Duration)> {
    static SWEEPS: OnceLock<Vec<(Mode, SweepReport, Duration)>> = OnceLock::new();
    SWEEPS.get_or_init(|| {
        Mode::ALL
            .into_iter()
            .map(|mode| {
                let t = Instant::now();
                let cfg = SweepConfig {
                    mode,
                    ..SweepConfig::default()
                };
                let report = ckpt_sweep(&cfg).expect("sweep runs");
                (mode, report, t.elapsed())
            })
            .collect()
    })
}

/// Endurance runs shared by criteria 2 and 4.
fn endurance_runs() -> &'static Vec<(EnduranceReport, Duration)> {
    static RUNS: OnceLock<Vec<(EnduranceReport, Duration)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        [(WorkloadKind::P2pRing, 2000), (WorkloadKind::CollectiveStorm, 300)]
            .into_iter()
            .map(|(kind, rounds)| {
                let t = Instant::now();
                let r = endurance(kind, 32, rounds, 10, Mode::Hybrid2pc, 2024).expect("endurance runs");
                (r, t.elapsed())
            })
            .collect()
    })
}

#[test]
fn criterion_1_transparency_sweep() {
    let mut ok = true;
    let mut details = Vec::new();
    let mut total = Duration::ZERO;
    for (mode, report, took) in sweeps() {
        total += *took;
        let configs = report.cases.len();
        let min_points = report.cases.iter().map(|c| c.points).min().unwrap_or(0);
        ok &= configs == 12 && min_points >= 50 && report.passed();
        for c in &report.cases {
            for (at, why) in c.failures.iter().take(2) {
                details.push(format!("{mode} {} n={} at {at}: {why}", c.workload.kind, c.workload.n));
            }
        }
        details.push(format!(
            "{mode}: {configs} configs, {} points (min {min_points}/config), {} failures",
            report.points(),
            report.failures()
        ));
    }
    ok &= total < Duration::from_secs(300);
    details.push(format!("{:.1}s", total.as_secs_f64()));
    verdict(
        1,
        "native and checkpointed outputs byte-identical",
        ok,
        &details.join("; "),
    );
    assert!(ok, "{details:?}");
}

#[test]
fn criterion_2_endurance() {
    let mut ok = true;
    let mut details = Vec::new();
    for (r, took) in endurance_runs() {
        let this = r.failure.is_none() && r.restarts == 10 && *took < Duration::from_secs(120);
        ok &= this;
        details.push(format!(
            "{} N={} rounds={}: {} restarts in {:.1}s{}",
            r.workload.kind,
            r.workload.n,
            r.workload.rounds,
            r.restarts,
            took.as_secs_f64(),
            r.failure.as_ref().map(|f| format!(", {f}")).unwrap_or_default()
        ));
    }
    verdict(
        2,
        "32 processes survive 10 checkpoint-kill-restart rounds",
        ok,
        &details.join("; "),
    );
    assert!(ok, "{details:?}");
}

#[test]
fn criterion_3_deadlock_reproduction() {
    let seeds: Vec<u64> = (0..100).collect();
    let results = par_map(&seeds, true, |&seed| -> Result<Vec<String>, Error> {
        let mut bad = Vec::new();
        let w = Workload::new(WorkloadKind::BcastDeadlock, 2, 1)?;
        for mode in Mode::ALL {
            let r = run(RunConfig::new(w, mode, seed))?;
            let expect_deadlock = mode == Mode::NaiveBarrier;
            let got_deadlock = matches!(r.outcome, Outcome::Deadlock(_));
            if got_deadlock != expect_deadlock || (!expect_deadlock && !r.verified()) {
                bad.push(format!("seed {seed} {mode}: {:?}", r.outcome));
            }
        }
        Ok(bad)
    });
    let bad: Vec<String> = results.into_iter().flat_map(|r| r.expect("runs")).collect();
    let ok = bad.is_empty();
    verdict(
        3,
        "bcast-deadlock: naive-barrier deadlocks, p2p-emulation and hybrid-2pc complete",
        ok,
        &format!("100 seeds x 3 modes, {} unexpected outcomes", bad.len()),
    );
    assert!(ok, "{:?}", &bad[..bad.len().min(5)]);
}

#[test]
fn criterion_4_drain_invariant() {
    let mut drains = 0;
    let mut drained = 0;
    let mut ok = true;
    for (_, report, _) in sweeps() {
        for c in &report.cases {
            drains += c.drains;
            drained += c.drained_messages;
            ok &= c.drains_ok;
        }
    }
    for (r, _) in endurance_runs() {
        drains += r.restarts;
        ok &= r.drains_ok;
    }
    // The check must not be vacuous: in-flight messages were really drained.
    ok &= drains > 0 && drained > 0;
    verdict(
        4,
        "after every drain the network is empty and sent = received + buffered per pair",
        ok,
        &format!("{drains} drains checked, {drained} in-flight messages buffered"),
    );
    assert!(ok);
}

#[test]
fn criterion_5_retirement() {
    let mut ok = true;
    let mut details = Vec::new();
    for kind in WorkloadKind::ALL {
        for mode in Mode::ALL {
            if kind == WorkloadKind::BcastDeadlock && mode == Mode::NaiveBarrier {
                continue;
            }
            let w = Workload::new(kind, 5, 9).unwrap();
            let native = run(RunConfig::new(w, mode, 3)).unwrap();
            let ckpt = run(RunConfig::new(w, mode, 3).with_ckpts([native.steps / 3, native.steps / 2])).unwrap();
            for r in [&native, &ckpt] {
                if !r.verified() || r.final_requests.iter().any(|&n| n != 0) {
                    ok = false;
                    details.push(format!("{kind} {mode}: final entries {:?}", r.final_requests));
                }
            }
        }
    }
    let mut marks = Vec::new();
    for rounds in [10, 100, 1000] {
        let w = Workload::new(WorkloadKind::P2pRing, 4, rounds).unwrap();
        let r = run(RunConfig::new(w, Mode::Hybrid2pc, 1)).unwrap();
        let hw = r.high_water.iter().copied().max().unwrap_or(0);
        ok &= hw <= 4;
        marks.push(format!("{rounds} rounds: {hw}"));
    }
    details.push(format!("p2p-ring request high-water {}", marks.join(", ")));
    verdict(
        5,
        "request tables empty at exit, bounded high-water",
        ok,
        &details.join("; "),
    );
    assert!(ok, "{details:?}");
}

#[test]
fn criterion_6_restart_frugality() {
    let n = 4;
    let w = Workload::new(WorkloadKind::CommChurn, n, 3).unwrap();
    let native = run(RunConfig::new(w, Mode::Hybrid2pc, 8)).unwrap();
    let mut cfg = RunConfig::new(w, Mode::Hybrid2pc, 8);
    cfg.record_events = true;
    let mut sim = Sim::new(cfg).unwrap();
    // Every process is past the 20 creations and 15 frees.
    sim.run_until(|s| s.procs.iter().all(|p| p.round >= 1)).unwrap();
    let before: usize = sim
        .ups
        .iter()
        .map(|u| u.active_comms().all_comms().count())
        .max()
        .unwrap();
    sim.request_checkpoint().unwrap();
    let r = sim.run().unwrap();
    let restart_creates = r
        .events
        .iter()
        .flatten()
        .filter(|e| e.actor == Actor::Restart && e.op == EventOp::CommCreate)
        .count();
    let expected = (CHURN_CREATED - CHURN_FREED) as usize;
    let ok = r.verified()
        && r.output_bytes() == native.output_bytes()
        && r.checkpoints.len() == 1
        && restart_creates == expected
        && r.checkpoints[0].restart.as_ref().map(|x| x.comms_created) == Some(expected);
    verdict(
        6,
        "restart recreates only live communicators",
        ok,
        &format!(
            "{CHURN_CREATED} created, {CHURN_FREED} freed, {before} live (incl. world); restart logged {restart_creates} comm creations"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_emulation_equivalence() {
    let mut scripts = vec![Script::bcast_then_send(2), Script::bcast_then_send(3)];
    for seed in 0..60 {
        scripts.push(Script::random(2 + (seed % 2) as usize, 6, seed));
    }
    let results = par_map(&scripts, true, |s| check_equivalence(s, 2_000_000));
    let mut ok = true;
    let mut states = 0;
    let mut ckpts = 0;
    let mut bad = Vec::new();
    for (s, r) in scripts.iter().zip(results) {
        match r {
            Ok(eq) => {
                states += eq.native.states + eq.emulated.states + eq.hybrid.states;
                ckpts += eq.hybrid.checkpoints;
                if !eq.holds() || s.ops.iter().any(|o| o.len() > 6) {
                    ok = false;
                    bad.push(format!("{s:?}"));
                }
            }
            Err(e) => {
                ok = false;
                bad.push(e.to_string());
            }
        }
    }
    verdict(
        7,
        "emulated collectives equivalent to the lower half under every interleaving",
        ok,
        &format!(
            "{} programs (N<=3, <=6 ops/rank), {states} states explored, {ckpts} hybrid checkpoints, {} failures",
            scripts.len(),
            bad.len()
        ),
    );
    assert!(ok, "{:?}", &bad[..bad.len().min(3)]);
}

/// One image from a checkpoint at a random point of a random run.
fn random_image(seed: u64, dir: &std::path::Path) -> Result<Vec<u8>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = WorkloadKind::ALL[rng.random_range(0..WorkloadKind::ALL.len())];
    let mode = if kind == WorkloadKind::BcastDeadlock {
        Mode::P2pEmulation
    } else {
        Mode::ALL[rng.random_range(0..3)]
    };
    let n = rng.random_range(2..=6);
    let w = Workload::new(kind, n, rng.random_range(1..=6))?;
    let native = run(RunConfig::new(w, mode, seed))?;
    let mut cfg = RunConfig::new(w, mode, seed).with_ckpts([rng.random_range(0..=native.steps)]);
    cfg.restart = false;
    cfg.ckpt_dir = Some(dir.join(seed.to_string()));
    run(cfg)?;
    let rank = rng.random_range(0..n as u32);
    Ok(std::fs::read(image_path(&dir.join(seed.to_string()), 1, rank))?)
}

#[test]
fn criterion_8_image_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..1000).collect();
    let images = par_map(&seeds, true, |&s| random_image(s, dir.path()));
    let mut ok = true;
    let mut round_trips = 0;
    let mut corrupt_rejected = 0;
    let mut truncated_rejected = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for bytes in images {
        let bytes = bytes.expect("image written");
        let img = CheckpointImage::decode(&bytes).expect("valid image decodes");
        let again = img.encode();
        if again == bytes && CheckpointImage::decode(&again).as_ref() == Ok(&img) {
            round_trips += 1;
        } else {
            ok = false;
        }
        let mut corrupt = bytes.clone();
        let at = rng.random_range(0..corrupt.len());
        corrupt[at] ^= 1 << rng.random_range(0..8);
        if CheckpointImage::decode(&corrupt).is_err() {
            corrupt_rejected += 1;
        }
        let layout = CheckpointImage::layout(&bytes).unwrap();
        let cut = rng.random_range(1..layout.total);
        if CheckpointImage::decode(&bytes[..cut]).is_err() {
            truncated_rejected += 1;
        }
    }
    ok &= round_trips == 1000 && corrupt_rejected == 1000 && truncated_rejected == 1000;
    verdict(
        8,
        "images round-trip; corrupted and truncated images rejected",
        ok,
        &format!(
            "{round_trips}/1000 round-trips, {corrupt_rejected}/1000 bit flips rejected, {truncated_rejected}/1000 truncations rejected"
        ),
    );
    assert!(ok);
}
