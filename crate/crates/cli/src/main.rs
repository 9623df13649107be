//! Command-line front end: play scenarios, dump planned schedules, sweep
//! shared-slot transmit power, and summarize guaranteed-slot latency.
//!
//! Exit codes: 0 on success, 1 when a simulation runs but fails its checks
//! (schedule violations, trace audit findings, latency bound misses), 2 for
//! usage errors (missing/invalid scenario files, bad flags).

use clap::{Parser, Subcommand, ValueEnum};
use dsmac_core::engine::{fnv1a64, TraceBody, World};
use dsmac_core::harness::{
    audit_trace, estimate_crossover, estimate_window, latency_stats, run_sgts_sweep, HarnessError,
    SweepResult,
};
use dsmac_core::scenario::{parse_scenario, Scenario};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dsmac", version, about = "deterministic slot-scheduled MAC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the scenario's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write result files into this directory instead of stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Summary)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    /// Full event trace with the resolved scenario embedded as comments.
    Trace,
    /// Aggregate counters and checks.
    Summary,
    /// Per-node table.
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and report what happened on the air.
    Run { scenario: PathBuf },
    /// Print the planned slot table and check its invariants.
    Schedule { scenario: PathBuf },
    /// Shared-slot power sweep: success curves, window, crossover.
    Sweep { scenario: PathBuf },
    /// Queue-to-air latency statistics for guaranteed traffic.
    Latency { scenario: PathBuf },
}

enum CliError {
    /// Unreadable or invalid input: exit 2.
    Usage(String),
    /// The scenario ran but something went wrong: exit 1.
    Run(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(clean) => {
            if clean {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    let sink = Sink::new(cli.out)?;
    match cli.command {
        Command::Run { scenario } => cmd_run(&load(&scenario, cli.seed)?, cli.format, &sink),
        Command::Schedule { scenario } => cmd_schedule(&load(&scenario, cli.seed)?, &sink),
        Command::Sweep { scenario } => cmd_sweep(&load(&scenario, cli.seed)?, cli.format, &sink),
        Command::Latency { scenario } => cmd_latency(&load(&scenario, cli.seed)?, &sink),
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut scenario = parse_scenario(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

/// Where results go: one file per artifact under `--out`, or stdout.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(dir: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)
                .map_err(|e| CliError::Usage(format!("{}: {e}", d.display())))?;
        }
        Ok(Sink { dir })
    }

    fn emit(&self, name: &str, content: &str) -> Result<(), CliError> {
        match &self.dir {
            Some(d) => {
                let path = d.join(name);
                fs::write(&path, content)
                    .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
            }
            None => {
                print!("{content}");
                Ok(())
            }
        }
    }
}

/// Resolved scenario as `# `-prefixed header lines.
fn config_header(scenario: &Scenario) -> String {
    let mut out = String::new();
    for line in scenario.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    out
}

fn cmd_run(scenario: &Scenario, format: Format, sink: &Sink) -> Result<bool, CliError> {
    let mut world =
        World::new(scenario.world_config()).map_err(|e| CliError::Usage(e.to_string()))?;
    world
        .run_superframes(scenario.run_superframes)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let problems = audit_trace(world.trace());

    match format {
        Format::Trace => {
            let body = world.trace().render();
            let mut out = config_header(scenario);
            out.push_str(&body);
            let _ = writeln!(out, "# trace_hash={:016x}", fnv1a64(body.as_bytes()));
            sink.emit("trace.txt", &out)?;
        }
        Format::Summary | Format::Table => {
            let mut out = String::new();
            let mut counts: std::collections::BTreeMap<&'static str, u64> =
                std::collections::BTreeMap::new();
            for e in world.trace().events() {
                *counts.entry(category(&e.body)).or_insert(0) += 1;
            }
            let _ = writeln!(
                out,
                "superframes={} events={} now={}",
                scenario.run_superframes,
                world.trace().len(),
                world.now()
            );
            let mut line = String::from("counts");
            for (cat, n) in &counts {
                let _ = write!(line, " {cat}={n}");
            }
            let _ = writeln!(out, "{line}");
            let cap = world.cap_stats();
            let _ = writeln!(
                out,
                "cap enqueued={} tx_started={} failures={} delivered={} collisions={}",
                cap.enqueued, cap.tx_started, cap.failures, cap.delivered, cap.collisions
            );
            if format == Format::Table {
                let _ = writeln!(out, "{:>5}  {:<16} {:>10} {:>12}", "node", "role", "delivered", "charge_uah");
                for (id, m) in world.machines() {
                    let _ = writeln!(
                        out,
                        "{:>5}  {:<16} {:>10} {:>12.4}",
                        id,
                        m.role.to_string(),
                        world.delivered(*id),
                        m.energy.charge_uah(&world.config().energy)
                    );
                }
            } else {
                for (id, m) in world.machines() {
                    let _ = writeln!(
                        out,
                        "node={} role={} delivered={} charge_uah={:.4}",
                        id,
                        m.role,
                        world.delivered(*id),
                        m.energy.charge_uah(&world.config().energy)
                    );
                }
            }
            let _ = writeln!(out, "audit_violations={}", problems.len());
            for p in &problems {
                let _ = writeln!(out, "violation: {p}");
            }
            sink.emit("summary.txt", &out)?;
        }
    }
    Ok(problems.is_empty())
}

fn category(body: &TraceBody) -> &'static str {
    match body {
        TraceBody::Tx { .. } => "tx",
        TraceBody::RxDecoded { .. } => "rx",
        TraceBody::RxCollision { .. } => "collision",
        TraceBody::Sync { .. } => "sync",
        TraceBody::Grant { .. } => "grant",
        TraceBody::Refusal { .. } => "refusal",
        TraceBody::Merge { .. } => "merge",
        TraceBody::MergeRefused { .. } => "merge-refused",
        TraceBody::Boundary { .. } => "boundary",
        TraceBody::Energy { .. } => "energy",
        TraceBody::CsmaFailure { .. } => "csma-failure",
        TraceBody::CsmaTxStart { .. } => "csma-tx",
    }
}

fn cmd_schedule(scenario: &Scenario, sink: &Sink) -> Result<bool, CliError> {
    // Building the world applies beacon-slot assignments and every request
    // installed before the run starts; its table is the planned schedule.
    let world =
        World::new(scenario.world_config()).map_err(|e| CliError::Usage(e.to_string()))?;
    let table = &world.pan().active;
    let mut out = table.dump();
    let violations = table.validate_schedule();
    let _ = writeln!(out, "violations={}", violations.len());
    for v in &violations {
        let _ = writeln!(out, "violation: {v}");
    }
    sink.emit("schedule.txt", &out)?;
    Ok(violations.is_empty())
}

fn sweep_csv(result: &SweepResult) -> String {
    let mut csv = String::from("node,power_dbm,delta_db,trials,positives,rate\n");
    for (node, points) in &result.curves {
        for p in points {
            let _ = writeln!(
                csv,
                "{},{:.4},{:.4},{},{},{:.6}",
                node, p.power_dbm, p.delta_db, p.trials, p.positives,
                p.rate()
            );
        }
    }
    csv
}

fn cmd_sweep(scenario: &Scenario, format: Format, sink: &Sink) -> Result<bool, CliError> {
    let result = run_sgts_sweep(scenario).map_err(|e| match e {
        HarnessError::BadTopology(_) => CliError::Usage(e.to_string()),
        other => CliError::Run(other.to_string()),
    })?;
    let csv = sweep_csv(&result);

    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "sweep swept={} fixed={} common_receiver={} seed={}",
        result.swept, result.fixed, result.common_receiver, scenario.seed
    );
    match estimate_window(&result, 0.05, 0.95) {
        Ok(est) => {
            for (node, (lo, hi)) in &est.bands {
                let _ = writeln!(
                    summary,
                    "band node={node} rises_at_db={lo:.4} clears_at_db={hi:.4}"
                );
            }
            let _ = writeln!(summary, "window_db={:.4}", est.window_db);
            let _ = writeln!(summary, "crossover_db={:.4}", est.crossover_db);
        }
        Err(e) => {
            let _ = writeln!(summary, "window_db=unavailable ({e})");
            match estimate_crossover(&result) {
                Ok(x) => {
                    let _ = writeln!(summary, "crossover_db={x:.4}");
                }
                Err(e) => {
                    let _ = writeln!(summary, "crossover_db=unavailable ({e})");
                }
            }
        }
    }
    let _ = writeln!(summary, "csv_hash={:016x}", fnv1a64(csv.as_bytes()));

    if sink.dir.is_some() {
        sink.emit("sweep.csv", &csv)?;
        sink.emit("summary.txt", &summary)?;
    } else if format == Format::Table {
        sink.emit("sweep.csv", &csv)?;
    } else {
        sink.emit("summary.txt", &summary)?;
    }
    Ok(true)
}

fn cmd_latency(scenario: &Scenario, sink: &Sink) -> Result<bool, CliError> {
    let mut world =
        World::new(scenario.world_config()).map_err(|e| CliError::Usage(e.to_string()))?;
    world
        .run_superframes(scenario.run_superframes)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let stats = latency_stats(&world);
    let mut out = String::new();
    for (node, n) in &stats.per_node {
        let mut hist = String::new();
        for (bucket, count) in &n.histogram {
            if !hist.is_empty() {
                hist.push(',');
            }
            let _ = write!(hist, "{bucket}:{count}");
        }
        let _ = writeln!(
            out,
            "node={} frames={} mean_us={:.1} max_us={} bound_us={} hist={}",
            node, n.frames, n.mean_us, n.max_us, n.bound_us, hist
        );
    }
    let _ = writeln!(out, "violations={}", stats.violations.len());
    for (node, lat) in &stats.violations {
        let _ = writeln!(out, "violation: node={node} latency_us={lat}");
    }
    sink.emit("latency.txt", &out)?;
    Ok(stats.violations.is_empty())
}
