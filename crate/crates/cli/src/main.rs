//! `dualcast` — run scenarios, sweep parameters, check traces, and evaluate
//! the analytic performance model.
//!
//! Exit codes are a contract: 0 all checks pass, 1 a property check failed,
//! 2 scenario/config/usage error, 3 the simulated-time bound was hit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dualcast_core::analysis::checks::{check_all, check_eon_barrier, CheckReport};
use dualcast_core::analysis::metrics::{summarize, summarize_window, MetricsError, Summary};
use dualcast_core::analysis::model::{
    expected_performance, worst_case_latency, worst_case_throughput, PerfModel, WorstCaseVariant,
};
use dualcast_core::protocol::TransitionKind;
use dualcast_core::sim::scenario::Scenario;
use dualcast_core::sim::trace::{EndReason, Trace};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TIME_BOUND: u8 = 3;

#[derive(Parser)]
#[command(name = "dualcast", version, about = "dual-overlay atomic broadcast simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (default: $DUALCAST_OUT or ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress per-run console output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario: writes trace, metrics, and check reports.
    Run(RunArgs),
    /// Run a scenario template across parameter variations and seeds.
    Sweep(SweepArgs),
    /// Re-check exported trace files.
    Check(CheckArgs),
    /// Evaluate the closed-form expected-performance model.
    Model(ModelArgs),
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    template: PathBuf,
    /// Vary one key across values, e.g. --vary n=4,8,16 (repeatable).
    #[arg(long)]
    vary: Vec<String>,
    /// Seeds per variation (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args)]
struct CheckArgs {
    traces: Vec<PathBuf>,
    /// Also assert the eon barrier for this eon number.
    #[arg(long)]
    eon: Option<u32>,
}

#[derive(Args)]
struct ModelArgs {
    /// Expected unreliable round duration.
    #[arg(long)]
    du: f64,
    /// Expected reliable round duration.
    #[arg(long)]
    dr: f64,
    /// Unreliable-sequence lengths to tabulate: LO:HI or a single value.
    #[arg(long)]
    lambda: Option<String>,
    /// Worst-case variant: baseline | rerun-reliably | merged
    #[arg(long)]
    worst_case: Option<String>,
    /// Merged reliable-round duration for the merged variant.
    #[arg(long)]
    dr_merged: Option<f64>,
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("DUALCAST_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run(args) => cmd_run(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::Check(args) => cmd_check(&cli, args),
        Command::Model(args) => cmd_model(&cli, args),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load_scenario(path: &Path, seed_override: Option<u64>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let mut sc = Scenario::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if let Some(seed) = seed_override {
        sc.seed = seed;
    }
    Ok(sc)
}

/// Best metrics window the trace supports: the standard one, or the longest
/// available prefix window for short runs.
fn best_summary(trace: &Trace) -> Result<Summary, MetricsError> {
    match summarize(trace) {
        Ok(s) => Ok(s),
        Err(MetricsError::WindowNotReached { reached, .. }) if reached >= 2 => {
            summarize_window(trace, reached / 6, reached)
        }
        Err(e) => Err(e),
    }
}

fn write_outputs(dir: &Path, stem: &str, trace: &Trace) -> Result<Vec<CheckReport>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.trace.tsv")), trace.export())?;
    let reports = check_all(trace);
    let mut report_text = String::new();
    report_text.push_str(&format!("end: {:?} at {} us\n", trace.end, trace.end_time));
    for r in &reports {
        report_text.push_str(&format!("{r}\n"));
    }
    std::fs::write(dir.join(format!("{stem}.checks.txt")), &report_text)?;
    match best_summary(trace) {
        Ok(summary) => {
            std::fs::write(dir.join(format!("{stem}.metrics.csv")), summary.csv())?;
        }
        Err(e) => {
            std::fs::write(
                dir.join(format!("{stem}.metrics.csv")),
                format!("server,median_latency_us,ci_lo,ci_hi,throughput_msgs_per_s,rounds,transmissions\n# unavailable: {e}\n"),
            )?;
        }
    }
    Ok(reports)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<u8> {
    let sc = load_scenario(&args.scenario, cli.seed)?;
    let trace = dualcast_core::sim::run(&sc)?;
    let dir = out_dir(cli);
    let stem = args
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let reports = write_outputs(&dir, &stem, &trace)?;
    if !cli.quiet {
        println!("end: {:?} at {} us", trace.end, trace.end_time);
        for r in &reports {
            println!("{r}");
        }
        println!("outputs in {}", dir.display());
    }
    if trace.end == EndReason::TimeBound {
        return Ok(EXIT_TIME_BOUND);
    }
    if reports.iter().any(|r| !r.ok()) {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(0)
}

struct SweepRow {
    label: String,
    seed: u64,
    end: String,
    checks_ok: bool,
    rounds: u32,
    mean_latency_us: f64,
    mean_throughput: f64,
    fail_transitions: u64,
    first_failure: Option<String>,
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<u8> {
    let base = load_scenario(&args.template, cli.seed)?;
    // Cartesian product over the varied keys.
    let mut variations: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for vary in &args.vary {
        let (key, values) = vary
            .split_once('=')
            .ok_or_else(|| anyhow!("--vary needs key=v1,v2,..."))?;
        let mut next = Vec::new();
        for combo in &variations {
            for v in values.split(',') {
                let mut c = combo.clone();
                c.push((key.to_string(), v.to_string()));
                next.push(c);
            }
        }
        variations = next;
    }
    // Validate the variations eagerly so config errors exit 2 up front.
    let mut jobs = Vec::new();
    for combo in &variations {
        for k in 0..args.seeds {
            let mut sc = base.clone();
            for (key, value) in combo {
                sc.apply(key, value, 0)
                    .map_err(|e| anyhow!("--vary {key}={value}: {e}"))?;
            }
            sc.seed = base.seed.wrapping_add(k);
            sc.resolve(0).map_err(|e| anyhow!("variation {combo:?}: {e}"))?;
            let label = combo
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            jobs.push((label, sc));
        }
    }

    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|(label, sc)| match dualcast_core::sim::run(sc) {
            Ok(trace) => {
                let reports = check_all(&trace);
                let failed = reports.iter().find(|r| !r.ok());
                let live = trace.live_servers();
                let rounds = live
                    .iter()
                    .map(|&s| trace.logs[s].last().map_or(0, |d| d.round))
                    .min()
                    .unwrap_or(0);
                let (lat, thr) = best_summary(&trace)
                    .map(|s| {
                        let m = s
                            .per_server
                            .iter()
                            .map(|p| p.median_latency_us)
                            .sum::<f64>()
                            / s.per_server.len().max(1) as f64;
                        (m, s.mean_throughput_msgs_per_s)
                    })
                    .unwrap_or((f64::NAN, f64::NAN));
                let fails = trace.transition_count(TransitionKind::Tur)
                    + trace.transition_count(TransitionKind::Tfr)
                    + trace.transition_count(TransitionKind::Trr);
                SweepRow {
                    label: label.clone(),
                    seed: sc.seed,
                    end: format!("{:?}", trace.end),
                    checks_ok: failed.is_none(),
                    rounds,
                    mean_latency_us: lat,
                    mean_throughput: thr,
                    fail_transitions: fails,
                    first_failure: failed.map(|r| r.to_string()),
                }
            }
            Err(e) => SweepRow {
                label: label.clone(),
                seed: sc.seed,
                end: format!("error: {e}"),
                checks_ok: false,
                rounds: 0,
                mean_latency_us: f64::NAN,
                mean_throughput: f64::NAN,
                fail_transitions: 0,
                first_failure: Some(e.to_string()),
            },
        })
        .collect();

    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from(
        "variation,seed,end,checks_ok,rounds,mean_latency_us,mean_throughput_msgs_per_s,fail_transitions\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.1},{:.1},{}\n",
            r.label, r.seed, r.end, r.checks_ok, r.rounds, r.mean_latency_us, r.mean_throughput,
            r.fail_transitions
        ));
    }
    std::fs::write(dir.join("sweep.csv"), &csv)?;
    if !cli.quiet {
        println!("{} runs -> {}", rows.len(), dir.join("sweep.csv").display());
    }
    if let Some(first) = rows.iter().find_map(|r| r.first_failure.as_ref()) {
        eprintln!("first failure: {first}");
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(0)
}

fn cmd_check(cli: &Cli, args: &CheckArgs) -> Result<u8> {
    if args.traces.is_empty() {
        return Err(anyhow!("no trace files given"));
    }
    let mut any_fail = false;
    for path in &args.traces {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let trace = Trace::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        let mut reports = check_all(&trace);
        if let Some(eon) = args.eon {
            reports.push(check_eon_barrier(&trace, eon));
        }
        if !cli.quiet {
            println!("{}:", path.display());
            for r in &reports {
                println!("  {r}");
            }
        }
        any_fail |= reports.iter().any(|r| !r.ok());
    }
    Ok(if any_fail { EXIT_CHECK_FAILED } else { 0 })
}

fn cmd_model(_cli: &Cli, args: &ModelArgs) -> Result<u8> {
    let model = match PerfModel::new(args.du, args.dr) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CONFIG);
        }
    };
    if let Some(variant) = &args.worst_case {
        let v = match variant.as_str() {
            "baseline" => WorstCaseVariant::Baseline,
            "rerun-reliably" => WorstCaseVariant::RerunReliably,
            "merged" => WorstCaseVariant::MergedRerun {
                merged_delta_r: args.dr_merged.unwrap_or(0.0),
            },
            other => return Err(anyhow!("unknown worst-case variant {other:?}")),
        };
        let lat = match worst_case_latency(&model, v) {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(EXIT_CONFIG);
            }
        };
        let thr = worst_case_throughput(&model);
        println!("variant\tlatency\tlatency/dr\tthroughput\tthroughput*dr");
        println!(
            "{variant}\t{lat:.4}\t{:.4}\t{thr:.4}\t{:.4}",
            lat / args.dr,
            thr * args.dr
        );
        return Ok(0);
    }
    let spec = args.lambda.clone().unwrap_or_else(|| "3:20".into());
    let (lo, hi) = match spec.split_once(':') {
        Some((a, b)) => (
            a.parse::<u64>().map_err(|_| anyhow!("bad lambda {spec}"))?,
            b.parse::<u64>().map_err(|_| anyhow!("bad lambda {spec}"))?,
        ),
        None => {
            let v = spec.parse::<u64>().map_err(|_| anyhow!("bad lambda {spec}"))?;
            (v, v)
        }
    };
    println!("lambda\tlatency\tlatency/dr\tthroughput\tthroughput*dr");
    for l in lo..=hi {
        match expected_performance(&model, l as f64) {
            Ok(e) => println!(
                "{l}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                e.latency,
                e.latency / args.dr,
                e.throughput,
                e.throughput * args.dr
            ),
            Err(err) => {
                eprintln!("error: {err}");
                return Ok(EXIT_CONFIG);
            }
        }
    }
    Ok(0)
}
