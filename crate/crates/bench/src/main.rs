use std::process::ExitCode;
use std::time::Instant;

use cake_bench::{emit_table, run_scenario, BenchError, Format, ScenarioSpec, Scenario, Scheme, SEED_ENV};
use clap::Parser;

/// Runs one scenario, or a sweep over member counts, and prints measured vs predicted sizes.
#[derive(Parser, Debug)]
#[command(name = "bench")]
struct Args {
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    scenario: Scenario,
    /// Member count `N`, or an inclusive range `A..B` for a sweep.
    #[arg(long)]
    members: String,
    /// Joiners or leavers; groups for merge, parts for split.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, env = SEED_ENV, default_value_t = cake_bench::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    /// Adds elapsed microseconds to each report.
    #[arg(long)]
    wall_clock: bool,
}

fn parse_members(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("invalid member count {s:?}");
    match s.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.parse().map_err(|_| bad())?]),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let members = match parse_members(&args.members) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let mut reports = Vec::new();
    for n in members {
        let spec = ScenarioSpec::new(args.scheme, args.scenario, n)
            .with_p(args.batch)
            .with_seed(args.seed);
        let t = Instant::now();
        match run_scenario(&spec) {
            Ok(mut r) => {
                if args.wall_clock {
                    r.wall_clock_us = Some(t.elapsed().as_micros() as u64);
                }
                reports.push(r);
            }
            Err(e @ (BenchError::CapacityExceeded(..) | BenchError::Unsupported(..) | BenchError::InvalidSpec(_))) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            Err(e) => {
                eprintln!("run failed: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let table = emit_table(&reports, args.format);
    match &args.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &table) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(1);
            }
        }
        None => print!("{table}"),
    }
    if reports.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        for r in reports.iter().filter(|r| !r.passed()) {
            for c in r.checks.iter().filter(|c| !c.passed) {
                eprintln!("check failed: n={} {}", r.n, c.name);
            }
        }
        ExitCode::from(2)
    }
}
