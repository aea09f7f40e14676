use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bcm::checker::{
    all_hold, check_all, growing_join_threshold, t_condition_timeline, violation_thresholds, Verdict, PROPERTIES,
};
use bcm::config::ScenarioConfig;
use bcm::golden;
use bcm::sim::{parse_trace, render_trace, run, SimOutcome};
use bcm::Action;
use bcm_analysis::{emit_fig7_sweep, emit_table1, verify_table1};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bcm", version, about = "Byzantine-tolerant causal broadcast for mobile networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed
        #[arg(long, env = "BCM_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Per-broadcast message counts as CSV
        #[arg(long)]
        accounting_out: Option<PathBuf>,
    },
    /// Run the built-in handoff example and check its 37 milestones
    #[command(name = "replay-437")]
    Replay437 {
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Also write the scenario, for use with `check`
        #[arg(long)]
        scenario_out: Option<PathBuf>,
    },
    /// Check a trace against the thirteen properties
    Check {
        trace: PathBuf,
        scenario: PathBuf,
        /// Verdict table; printed to stdout when absent
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Verdicts and t-condition timeline as JSON
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Emit the violation/loss table for rate 8
    Table1 {
        /// Compare against the published values and fail on a mismatch
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit P(E >= k3) over a grid of rates
    Fig7 {
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        k3s: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run and check one scenario over a range of seeds
    Sweep {
        scenario: PathBuf,
        /// Half-open range `a..b`
        #[arg(long, value_parser = parse_range, default_value = "0..100")]
        seeds: Range<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Honest leaves and Byzantine joins that break a group
    Thresholds { nmh: u32, t: u32 },
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got `{s}`"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScenarioConfig::from_toml(&text).with_context(|| format!("scenario {}", path.display()))
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_out(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn simulate(config: &ScenarioConfig) -> Result<SimOutcome> {
    run(config).context("simulation failed")
}

fn delivery_count(out: &SimOutcome) -> usize {
    out.trace.iter().filter(|e| matches!(e.action, Action::BcmHDeliver | Action::BcmSDeliver)).count()
}

fn verdict_table(verdicts: &[Verdict]) -> String {
    let mut s = String::from("property,holds,detail\n");
    for v in verdicts {
        s.push_str(&format!("{},{},{}\n", v.property, v.holds, v.detail.replace(',', ";")));
    }
    s
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    trace_out: Option<&Path>,
    accounting_out: Option<&Path>,
) -> Result<ExitCode> {
    let mut config = load_scenario(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let out = simulate(&config)?;
    if let Some(p) = trace_out {
        write_out(p, &render_trace(&config, &out.trace))?;
    }
    if let Some(p) = accounting_out {
        write_out(p, &out.accounting.to_csv())?;
    }
    let last = out.trace.last().map_or(0, |e| e.tick);
    println!(
        "seed {}: {} events, {} deliveries, last tick {last}, quiescent {}",
        config.seed,
        out.trace.len(),
        delivery_count(&out),
        out.quiescent
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(trace_out: Option<&Path>, scenario_out: Option<&Path>) -> Result<ExitCode> {
    let config = golden::config();
    let out = simulate(&config)?;
    if let Some(p) = trace_out {
        write_out(p, &render_trace(&config, &out.trace))?;
    }
    if let Some(p) = scenario_out {
        write_out(p, &config.to_toml())?;
    }
    let at = match golden::check_milestones(&out.trace, &config) {
        Ok(at) => at,
        Err(e) => {
            eprintln!("milestones: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    for (m, i) in golden::MILESTONES.iter().zip(&at) {
        println!("{:>2}  tick {:>3}  {}", m.step, out.trace[*i].tick, m.what);
    }
    let verdicts = check_all(&out.trace, &config)?;
    for v in verdicts.iter().filter(|v| !v.holds) {
        eprintln!("{v}");
    }
    Ok(status(all_hold(&verdicts)))
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    all_hold: bool,
    verdicts: &'a [Verdict],
    first_violation: BTreeMap<String, Option<u64>>,
}

fn cmd_check(trace: &Path, scenario: &Path, report_out: Option<&Path>, summary_out: Option<&Path>) -> Result<ExitCode> {
    let mut config = load_scenario(scenario)?;
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let (hash, seed, events) = parse_trace(&text).with_context(|| format!("trace {}", trace.display()))?;
    config.seed = seed;
    if hash != config.hash() {
        bail!("trace {} was not produced by scenario {} with seed {seed}", trace.display(), scenario.display());
    }
    let verdicts = check_all(&events, &config).with_context(|| format!("trace {}", trace.display()))?;
    emit(report_out, &verdict_table(&verdicts))?;
    for v in verdicts.iter().filter(|v| !v.holds) {
        eprintln!("{v}");
    }
    if let Some(p) = summary_out {
        let timeline = t_condition_timeline(&events, &config);
        let summary = CheckSummary {
            config_hash: &hash,
            seed,
            all_hold: all_hold(&verdicts),
            verdicts: &verdicts,
            first_violation: timeline.first_violation.iter().map(|(s, t)| (s.to_string(), *t)).collect(),
        };
        write_out(p, &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(status(all_hold(&verdicts)))
}

fn cmd_table1(verify: bool, out: Option<&Path>) -> Result<ExitCode> {
    let table = emit_table1();
    emit(out, &table.to_csv())?;
    if !verify {
        return Ok(ExitCode::SUCCESS);
    }
    let mismatches = verify_table1(&table, 1e-6);
    for m in &mismatches {
        eprintln!("row {} column {}: expected {:.6}, got {:.6}", m.row + 1, m.col + 1, m.expected, m.actual);
    }
    Ok(status(mismatches.is_empty()))
}

fn cmd_fig7(rates: &[f64], k3s: &[u64], out: Option<&Path>) -> Result<ExitCode> {
    if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        bail!("invalid `rates`: {r} is not a positive rate");
    }
    emit(out, &emit_fig7_sweep(rates, k3s).to_csv())?;
    Ok(ExitCode::SUCCESS)
}

struct SeedResult {
    seed: u64,
    failed: Vec<&'static str>,
    deliveries: u64,
    events: u64,
    violated: bool,
}

#[derive(Serialize)]
struct SweepSummary {
    runs: u64,
    passing: u64,
    failures_by_property: BTreeMap<&'static str, u64>,
    failing_seeds: Vec<u64>,
    t_condition_violated: u64,
    mean_deliveries: f64,
    mean_events: f64,
}

fn sweep_one(config: &ScenarioConfig, seed: u64) -> Result<SeedResult> {
    let mut c = config.clone();
    c.seed = seed;
    let out = run(&c).with_context(|| format!("seed {seed}"))?;
    let verdicts = check_all(&out.trace, &c).with_context(|| format!("seed {seed}"))?;
    let violated = t_condition_timeline(&out.trace, &c).first_violation.values().any(Option::is_some);
    Ok(SeedResult {
        seed,
        failed: verdicts.iter().filter(|v| !v.holds).map(|v| v.property).collect(),
        deliveries: delivery_count(&out) as u64,
        events: out.trace.len() as u64,
        violated,
    })
}

fn summarize(results: &[SeedResult]) -> SweepSummary {
    let runs = results.len() as u64;
    let mut failures_by_property: BTreeMap<&'static str, u64> = PROPERTIES.iter().map(|p| (*p, 0)).collect();
    let mut failing_seeds = Vec::new();
    for r in results {
        for p in &r.failed {
            *failures_by_property.entry(p).or_default() += 1;
        }
        if !r.failed.is_empty() {
            failing_seeds.push(r.seed);
        }
    }
    failing_seeds.sort_unstable();
    let mean = |f: fn(&SeedResult) -> u64| results.iter().map(f).sum::<u64>() as f64 / runs.max(1) as f64;
    SweepSummary {
        runs,
        passing: runs - failing_seeds.len() as u64,
        failures_by_property,
        failing_seeds,
        t_condition_violated: results.iter().filter(|r| r.violated).count() as u64,
        mean_deliveries: mean(|r| r.deliveries),
        mean_events: mean(|r| r.events),
    }
}

fn cmd_sweep(scenario: &Path, seeds: Range<u64>, workers: usize, summary_out: Option<&Path>) -> Result<ExitCode> {
    if workers == 0 {
        bail!("invalid `workers`: must be at least 1");
    }
    let config = load_scenario(scenario)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let results: Vec<SeedResult> =
        pool.install(|| seeds.into_par_iter().map(|seed| sweep_one(&config, seed)).collect::<Result<_>>())?;
    let summary = summarize(&results);
    emit(summary_out, &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    if !summary.failing_seeds.is_empty() {
        eprintln!("{} of {} runs fail some property", summary.failing_seeds.len(), summary.runs);
    }
    Ok(status(summary.failing_seeds.is_empty()))
}

fn cmd_thresholds(nmh: u32, t: u32) -> Result<ExitCode> {
    let fixed = violation_thresholds(nmh, t)?;
    let growing = growing_join_threshold(nmh, t)?;
    println!("nmh {nmh}, t {t}");
    println!("honest leaves to violate:            {}", fixed.leave_k2);
    println!("byzantine joins to violate (fixed):  {}", fixed.join_k3);
    println!("byzantine joins to violate (growing): {growing}");
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, seed, trace_out, accounting_out } => {
            cmd_run(&scenario, seed, trace_out.as_deref(), accounting_out.as_deref())
        }
        Command::Replay437 { trace_out, scenario_out } => cmd_replay(trace_out.as_deref(), scenario_out.as_deref()),
        Command::Check { trace, scenario, report_out, summary_out } => {
            cmd_check(&trace, &scenario, report_out.as_deref(), summary_out.as_deref())
        }
        Command::Table1 { verify, out } => cmd_table1(verify, out.as_deref()),
        Command::Fig7 { rates, k3s, out } => cmd_fig7(&rates, &k3s, out.as_deref()),
        Command::Sweep { scenario, seeds, workers, summary_out } => {
            cmd_sweep(&scenario, seeds, workers, summary_out.as_deref())
        }
        Command::Thresholds { nmh, t } => cmd_thresholds(nmh, t),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
