//! `dsms`: run scenarios and sweeps, replay stored traces and embed graphs.
//!
//! Exit status is 0 when every check passes, 2 when a check fails and 1 for
//! usage or input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use dsms_core::checker::{check_trace, replay_states};
use dsms_core::embed::{embed_frt, mean_stretch, stretch_extremes};
use dsms_core::experiment::{run_experiment, ExperimentConfig};
use dsms_core::gaps::analyze;
use dsms_core::graph::{metric_closure, normalize_weights, WeightedGraph};
use dsms_core::rational::{self, Rational};
use dsms_core::sim::{run_checked, CheckMode, Scenario, SimError, Trace};

#[derive(Parser)]
#[command(name = "dsms", version, about = "Mobile-server scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace and reports.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `inline`, `off`, or a sampling period such as `10`.
        #[arg(long, default_value = "inline")]
        check: String,
    },
    /// Run a sweep described by a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-check a stored trace and print the report.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Embed a weighted graph into an HST and print it.
    Embed {
        #[arg(long)]
        graph: PathBuf,
        /// Rational such as `2` or `3/2`.
        #[arg(long, default_value = "2")]
        alpha: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure of a check, as opposed to bad input.
struct Violation;

fn parse_check(s: &str) -> Result<CheckMode> {
    match s {
        "inline" => Ok(CheckMode::Inline),
        "off" => Ok(CheckMode::Off),
        n => n.parse().map(CheckMode::Sampled).map_err(|_| anyhow!("unknown check mode {n:?}")),
    }
}

fn parse_rational(s: &str) -> Result<Rational> {
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim().parse::<i128>()?, d.trim().parse::<i128>()?),
        None => (s.trim().parse::<i128>()?, 1),
    };
    rational::from_pair(num, den).map_err(|e| anyhow!(e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Trace checks, replayed state checks and, for one-shot traces, the gap
/// analysis.
fn full_report(trace: &Trace) -> Result<(Value, bool)> {
    let checks = check_trace(trace);
    let replay = replay_states(trace, CheckMode::Inline);
    let analysis = if trace.scenario.is_one_shot() { Some(analyze(trace)?) } else { None };
    let passed = checks.passed() && replay.passed() && analysis.as_ref().is_none_or(|a| a.report.passed());
    let edges: Vec<(u32, u32)> = trace.forest.edges.iter().map(|e| (e.pred, e.succ)).collect();
    let report = json!({
        "cost": rational::to_pair(&trace.total_cost()),
        "forest": edges,
        "serving_order": trace.forest.paths().ok(),
        "trace_checks": checks,
        "state_checks": replay,
        "analysis": analysis.map(|a| a.to_json(trace)),
        "passed": passed,
    });
    Ok((report, passed))
}

fn simulate(scenario: &Path, out: &Path, check: &str) -> Result<Result<(), Violation>> {
    let mode = parse_check(check)?;
    let s = Scenario::from_json(&read_json(scenario)?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace = match run_checked(&s, mode) {
        Ok(t) => t,
        Err(SimError::Invariant { event_index, report }) => {
            let body = json!({ "invariant_violation_after_event": event_index, "report": report });
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&body)? + "\n")?;
            eprintln!("invariant violated after event {event_index}: {report}");
            return Ok(Err(Violation));
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(out.join("trace.jsonl"), trace.to_jsonl())?;
    fs::write(out.join("edges.csv"), trace.summary_csv())?;
    let (report, passed) = full_report(&trace)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "cost {} over {} requests; checks {}",
        rational::display(&trace.total_cost()),
        s.invoked().len(),
        if passed { "passed" } else { "FAILED" }
    );
    Ok(if passed { Ok(()) } else { Err(Violation) })
}

fn experiment(config: &Path) -> Result<Result<(), Violation>> {
    let cfg = ExperimentConfig::from_file(config)?;
    let report = run_experiment(&cfg)?;
    report.write(&cfg.output)?;
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    Ok(if report.summary.violations == 0 { Ok(()) } else { Err(Violation) })
}

fn replay(path: &Path) -> Result<Result<(), Violation>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = Trace::from_jsonl(&text)?;
    let (report, passed) = full_report(&trace)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if passed { Ok(()) } else { Err(Violation) })
}

fn embed(graph: &Path, alpha: &str, seed: u64) -> Result<Result<(), Violation>> {
    let g = WeightedGraph::from_json(&read_json(graph)?)?;
    let metric = metric_closure(&normalize_weights(&g)?);
    let hst = embed_frt(&metric, parse_rational(alpha)?, seed)?;
    let (lo, hi) = stretch_extremes(&metric, &hst);
    let body = json!({
        "hst": hst.to_json(),
        "min_stretch": rational::to_pair(&lo),
        "max_stretch": rational::to_pair(&hi),
        "mean_stretch": mean_stretch(&metric, &hst),
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(if lo >= rational::one() { Ok(()) } else { Err(Violation) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate { scenario, out, check } => simulate(scenario, out, check),
        Command::Experiment { config } => experiment(config),
        Command::Replay { trace } => replay(trace),
        Command::Embed { graph, alpha, seed } => embed(graph, alpha, *seed),
    };
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Violation)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
