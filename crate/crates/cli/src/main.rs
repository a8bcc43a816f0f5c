//! Scenario runner: executes fixtures, writes traces and metrics, validates
//! fixture files, and aggregates metrics across runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use v2x_sentinel::metrics::RunMetrics;
use v2x_sentinel::runner::{load_fixture_file, run_scenario};
use v2x_sentinel::world::trace::{Trace, TraceEvent};

/// Environment variable consulted for the seed when neither the fixture nor
/// an override provides one (lowest precedence).
const SEED_ENV: &str = "V2X_SENTINEL_SEED";

/// Exit code for fixture validation failures.
const EXIT_BAD_FIXTURE: u8 = 2;

#[derive(Parser)]
#[command(name = "v2x-sentinel", version, about = "Cooperative-intersection attack/detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: CommandLine,
}

#[derive(Subcommand)]
enum CommandLine {
    /// Execute a scenario fixture and write trace.jsonl plus metrics.json.
    Run(RunArgs),
    /// Parse and validate a fixture without running it.
    Validate {
        fixture: PathBuf,
        /// key=value overrides applied before validation.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Aggregate metrics across traces of one fixture version.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    fixture: PathBuf,
    /// key=value overrides, e.g. --set sim.seed=42.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for trace.jsonl and metrics.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Trace file name within the output directory.
    #[arg(long, default_value = "trace.jsonl")]
    trace: String,
    /// Metrics file name within the output directory.
    #[arg(long, default_value = "metrics.json")]
    metrics: String,
    /// Print per-run summary lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace files produced by `run`.
    traces: Vec<PathBuf>,
    /// Write the aggregate table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write plot-ready timeline JSON (positions, events) here.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

fn parse_overrides(set: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("override `{kv}` is not key=value"))
        })
        .collect()
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let overrides = parse_overrides(&args.set)?;
    let scenario = match load_fixture_file(&args.fixture, &overrides, env_seed()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", args.fixture.display());
            return Ok(ExitCode::from(EXIT_BAD_FIXTURE));
        }
    };
    let out = run_scenario(scenario).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(&args.out_dir)?;
    let trace_path = args.out_dir.join(&args.trace);
    let metrics_path = args.out_dir.join(&args.metrics);
    out.trace.write_jsonl(&trace_path)?;
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&out.metrics)?)?;
    if !args.quiet {
        let m = &out.metrics;
        println!(
            "{} seed={} reports={} fp={} latency={} collision={} -> {}, {}",
            m.fixture,
            m.seed,
            m.report_count,
            m.false_positive_count,
            m.designated_first_latency
                .map(|l| l.to_string())
                .unwrap_or_else(|| "-".into()),
            m.collision_occurred,
            trace_path.display(),
            metrics_path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(fixture: &Path, set: &[String]) -> anyhow::Result<ExitCode> {
    let overrides = parse_overrides(set)?;
    match load_fixture_file(fixture, &overrides, env_seed()) {
        Ok(s) => {
            println!(
                "{}: ok ({}, {} steps, {} vehicles, {} pedestrians)",
                fixture.display(),
                s.kind.label(),
                s.step_count(),
                s.vehicles.len(),
                s.vrus.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{}: {e}", fixture.display());
            Ok(ExitCode::from(EXIT_BAD_FIXTURE))
        }
    }
}

#[derive(Default)]
struct Aggregate {
    latencies: Vec<u64>,
    undetected: u64,
    runs: u64,
    false_positives: u64,
    overrides_delivered: u64,
    overrides_ignored: u64,
    collisions: u64,
}

fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((sorted.len() as f64 - 1.0) * p).ceil() as usize;
    Some(sorted[rank.min(sorted.len() - 1)])
}

fn metrics_path_for(trace: &Path) -> PathBuf {
    // `run` writes metrics.json next to trace.jsonl; mirror that here.
    let name = trace
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.replace("trace", "metrics").replace(".jsonl", ".json"))
        .unwrap_or_else(|| "metrics.json".into());
    trace.with_file_name(name)
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<ExitCode> {
    if args.traces.is_empty() {
        bail!("no trace files given");
    }
    let mut per_scenario: BTreeMap<String, Aggregate> = BTreeMap::new();
    let mut fixture_version: Option<String> = None;
    let mut timeline_rows: Vec<serde_json::Value> = Vec::new();

    for path in &args.traces {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let trace = Trace::from_jsonl(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        match &fixture_version {
            None => fixture_version = Some(trace.header.schema.clone()),
            Some(v) if *v != trace.header.schema => {
                bail!(
                    "schema mismatch across traces: {} vs {}",
                    v,
                    trace.header.schema
                );
            }
            _ => {}
        }
        let metrics_text = std::fs::read_to_string(metrics_path_for(path)).with_context(|| {
            format!("metrics file for {} (expected next to it)", path.display())
        })?;
        let metrics: RunMetrics = serde_json::from_str(&metrics_text)?;
        let agg = per_scenario.entry(metrics.scenario.clone()).or_default();
        agg.runs += 1;
        agg.false_positives += metrics.false_positive_count;
        match metrics.designated_first_latency {
            Some(l) => agg.latencies.push(l),
            None if metrics.onset_step.is_some() => agg.undetected += 1,
            None => {}
        }
        if metrics.collision_occurred {
            agg.collisions += 1;
        }
        for (kind, counts) in &metrics.mitigation_outcomes {
            if kind.starts_with("request_light_override") {
                agg.overrides_delivered += counts.delivered;
                agg.overrides_ignored += counts.ignored;
            }
        }
        if args.timeline.is_some() {
            for e in &trace.events {
                if let TraceEvent::State { step, t_ms, station, x, y, speed, .. } = e {
                    timeline_rows.push(serde_json::json!({
                        "fixture": trace.header.fixture,
                        "seed": trace.header.seed,
                        "step": step, "t_ms": t_ms,
                        "station": station, "x": x, "y": y, "speed": speed,
                    }));
                }
            }
        }
    }

    let mut csv = String::from(
        "scenario,runs,detected,undetected,mean_latency_steps,p95_latency_steps,false_positives,override_delivered,override_ignored,collisions\n",
    );
    for (scenario, agg) in &mut per_scenario {
        agg.latencies.sort_unstable();
        let mean = if agg.latencies.is_empty() {
            String::from("-")
        } else {
            format!(
                "{:.2}",
                agg.latencies.iter().sum::<u64>() as f64 / agg.latencies.len() as f64
            )
        };
        let p95 = percentile(&agg.latencies, 0.95)
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        let row = format!(
            "{scenario},{},{},{},{mean},{p95},{},{},{},{}\n",
            agg.runs,
            agg.latencies.len(),
            agg.undetected,
            agg.false_positives,
            agg.overrides_delivered,
            agg.overrides_ignored,
            agg.collisions,
        );
        csv.push_str(&row);
        print!("{row}");
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, &csv)?;
    }
    if let Some(path) = &args.timeline {
        std::fs::write(path, serde_json::to_string_pretty(&timeline_rows)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        CommandLine::Run(args) => cmd_run(args),
        CommandLine::Validate { fixture, set } => cmd_validate(fixture, set),
        CommandLine::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
