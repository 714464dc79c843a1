//! Command-line driver: single runs, checkpoint sweeps, fuzzing and image
//! inspection.
//!
//! Exit codes: 0 when every check passes, 1 on a verification failure,
//! 2 on a usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use manakin::coordinator::CheckpointImage;
use manakin::harness::{
    ckpt_sweep, first_divergence, fuzz, run, Metrics, Outcome, PhaseClass, RunConfig, SweepConfig, Workload,
    WorkloadKind,
};
use manakin::interpose::Mode;

#[derive(Parser)]
#[command(
    name = "manakin",
    version,
    about = "Transparent checkpoint-restart of a simulated MPI job"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload, optionally checkpointing, and compare with a native run.
    Run(RunArgs),
    /// Checkpoint at every multiple of --every steps and compare each run with native.
    CkptSweep(SweepArgs),
    /// Random workloads, modes and checkpoint points.
    Fuzz(FuzzArgs),
    /// Print the header, section sizes and checksum status of an image file.
    InspectImage { path: PathBuf },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "hybrid-2pc", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "p2p-ring", value_parser = parse_workload)]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 4)]
    procs: usize,
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    /// Steps at which checkpoints are requested.
    #[arg(long, value_delimiter = ',')]
    ckpt_at: Vec<u64>,
    /// Also write every checkpoint's images under this directory.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Keep running after a checkpoint instead of killing and restarting.
    #[arg(long)]
    no_restart: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "p2p-ring,collective-storm,straggler", value_parser = parse_workload)]
    workload: Vec<WorkloadKind>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    procs: Vec<usize>,
    /// Starting round count, doubled until there are enough injection points.
    #[arg(long, default_value_t = 4)]
    rounds: u32,
    #[arg(long, default_value_t = 10)]
    every: u64,
    #[arg(long, default_value_t = 50)]
    min_points: usize,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Largest process count tried.
    #[arg(long, default_value_t = 8)]
    procs: usize,
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: manakin::Error| e.to_string())
}

fn parse_workload(s: &str) -> Result<WorkloadKind, String> {
    s.parse().map_err(|e: manakin::Error| e.to_string())
}

/// Outcome of a subcommand: a verdict, or an error with its exit code.
enum Failure {
    Verification(String),
    Usage(String),
}

impl From<manakin::Error> for Failure {
    fn from(e: manakin::Error) -> Self {
        match e {
            manakin::Error::InvalidConfiguration(_) => Failure::Usage(e.to_string()),
            _ => Failure::Verification(e.to_string()),
        }
    }
}

fn emit(metrics: &Metrics, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => metrics
            .write(path)
            .map_err(|e| Failure::Usage(format!("writing metrics: {e}"))),
        None => {
            print!("{metrics}");
            Ok(())
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let w = Workload::new(a.workload, a.procs, a.rounds)?;
    let mut cfg = RunConfig::new(w, a.common.mode, a.common.seed).with_ckpts(a.ckpt_at.iter().copied());
    cfg.ckpt_dir = a.ckpt_dir;
    cfg.restart = !a.no_restart;
    let result = run(cfg.clone())?;
    let mut metrics = result.metrics(&cfg);
    let mut verdict = Ok(());
    if let Outcome::Deadlock(report) = &result.outcome {
        eprintln!("{report}");
        verdict = Err(Failure::Verification("deadlock".into()));
    } else if result.mismatches() > 0 {
        let first = result.outputs.iter().find_map(|o| o.first_mismatch.clone());
        verdict = Err(Failure::Verification(first.unwrap_or_default()));
    } else if !result.drains_ok() {
        verdict = Err(Failure::Verification("drain left the network unbalanced".into()));
    } else if !cfg.ckpt_at.is_empty() {
        let native = run(RunConfig::new(w, a.common.mode, a.common.seed))?;
        let same = native.output_bytes() == result.output_bytes();
        metrics.push("native_equivalent", same);
        if !same {
            let diff = first_divergence(&native.outputs, &result.outputs).unwrap_or_default();
            verdict = Err(Failure::Verification(format!("output differs from native run: {diff}")));
        }
    }
    emit(&metrics, a.common.metrics_out.as_deref())?;
    verdict
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfg = SweepConfig {
        workloads: a.workload,
        procs: a.procs,
        rounds: a.rounds,
        every: a.every.max(1),
        min_points: a.min_points,
        mode: a.common.mode,
        seed: a.common.seed,
        parallel: !a.sequential,
    };
    let report = ckpt_sweep(&cfg)?;
    let mut m = Metrics::new();
    m.push("mode", cfg.mode);
    m.push("cases", report.cases.len());
    m.push("points", report.points());
    m.push("failures", report.failures());
    for c in &report.cases {
        let key = format!("case.{}.n{}", c.workload.kind, c.workload.n);
        m.push(&format!("{key}.rounds"), c.workload.rounds);
        m.push(&format!("{key}.points"), c.points);
        m.push(&format!("{key}.failures"), c.failures.len());
        m.push(&format!("{key}.drained_messages"), c.drained_messages);
        m.push(&format!("{key}.drains_ok"), c.drains_ok);
        for (at, why) in c.failures.iter().take(3) {
            eprintln!("FAIL {} n={} at step {at}: {why}", c.workload.kind, c.workload.n);
        }
    }
    let cov = report.coverage();
    for c in PhaseClass::ALL {
        m.push(&format!("coverage.{}", c.name()), cov.contains(&c));
    }
    emit(&m, a.common.metrics_out.as_deref())?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} of {} injection points failed",
            report.failures(),
            report.points()
        )))
    }
}

fn cmd_fuzz(a: FuzzArgs) -> Result<(), Failure> {
    let report = fuzz(a.seed, a.iterations, a.procs, !a.sequential)?;
    let bad = report.failures();
    let mut m = Metrics::new();
    m.push("seed", a.seed);
    m.push("iterations", report.cases.len());
    m.push("failures", bad.len());
    for c in bad.iter().take(5) {
        eprintln!(
            "FAIL seed={} {} n={} rounds={} {} ckpt_at={:?}: {}",
            c.seed,
            c.workload.kind,
            c.workload.n,
            c.workload.rounds,
            c.mode,
            c.ckpt_at,
            c.failure.as_deref().unwrap_or_default()
        );
    }
    emit(&m, a.metrics_out.as_deref())?;
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} fuzz cases failed", bad.len())))
    }
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let layout = CheckpointImage::layout(&bytes).map_err(|e| Failure::Verification(e.to_string()))?;
    println!("image={}", path.display());
    println!("version={}", layout.version);
    println!("epoch={}", layout.epoch);
    println!("world_size={}", layout.world_size);
    println!("rank={}", layout.rank);
    for (name, size) in &layout.sections {
        println!("section.{name}={size}");
    }
    println!("total_bytes={}", layout.total);
    CheckpointImage::decode(&bytes).map_err(|e| Failure::Verification(e.to_string()))?;
    println!("crc={:08x} CRC OK", layout.crc);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::CkptSweep(a) => cmd_sweep(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::InspectImage { path } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
