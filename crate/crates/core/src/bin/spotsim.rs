use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spotsim::allocation::PolicyKind;
use spotsim::error::Error;
use spotsim::report::{self, Format};
use spotsim::scenario::{
    comparison_csv, compare_policies, run_scenario, Overrides, RunOptions, ScenarioConfig, ScenarioRun, TraceSection,
    TraceSource,
};
use spotsim::trace::{SpotInjection, TraceOptions, UnresolvedMode};

/// Spot and on-demand VM simulator.
///
/// Log verbosity follows SPOTSIM_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "spotsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and export its report.
    Run(RunArgs),
    /// Run several policies on identical workloads and print a side-by-side table.
    Compare(CompareArgs),
    /// Simulate a cluster trace.
    Trace(TraceArgs),
}

#[derive(Args)]
struct Output {
    /// Directory for report tables; the summary is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Check conservation invariants after every event.
    #[arg(long)]
    audit: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or bundled:<name>.
    #[arg(long)]
    config: String,
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Spot-load weight of the adjusted score.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: String,
    #[arg(long, value_delimiter = ',', default_value = "first-fit,hlem,hlem-adjusted")]
    policies: Vec<PolicyKind>,
    /// Defaults to the scenario's own seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Overrides the scenario's scale factor.
    #[arg(long)]
    scale: Option<f64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Machine-events table.
    #[arg(long)]
    machines: PathBuf,
    /// Task-events table.
    #[arg(long)]
    tasks: PathBuf,
    /// JSON column map for non-standard layouts.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Keep only the first H hours.
    #[arg(long)]
    slice_hours: Option<f64>,
    #[arg(long)]
    max_machines: Option<usize>,
    /// Spot VMs injected on top of the trace.
    #[arg(long, default_value_t = 0)]
    spot_count: u32,
    /// Runtimes the injected spot VMs draw from, seconds.
    #[arg(long, value_delimiter = ',', default_value = "72000,144000")]
    spot_durations: Vec<f64>,
    /// Let the policy place tasks whose machine is unknown instead of dropping them.
    #[arg(long)]
    policy_unresolved: bool,
    #[arg(long, default_value = "hlem-adjusted")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    scheduling_interval: f64,
    #[command(flatten)]
    output: Output,
}

fn print_run(run: &ScenarioRun, output: &Output) -> Result<(), Error> {
    if let Some(dir) = &output.out {
        let written = report::export(&run.report, output.format, dir)?;
        if let Some(stats) = &run.trace_stats {
            let p = dir.join("trace_stats.json");
            let body = serde_json::to_string_pretty(stats).expect("stats serialize") + "\n";
            std::fs::write(&p, body).map_err(|source| Error::Io { path: p.clone(), source })?;
        }
        if !run.result.log.scorecards.is_empty() {
            report::write_scorecards(&run.result.log.scorecards, &dir.join("scorecards.jsonl"))?;
        }
        log::info!("wrote {} files to {}", written.len(), dir.display());
    }
    println!("{}", serde_json::to_string_pretty(&run.report.summary).expect("summary serializes"));
    if let Some(stats) = &run.trace_stats {
        println!("{}", serde_json::to_string_pretty(stats).expect("stats serialize"));
    }
    if !run.result.log.violations.is_empty() {
        for v in &run.result.log.violations {
            eprintln!("invariant violation: {v}");
        }
        return Err(Error::Usage(format!("{} invariant violations", run.result.log.violations.len())));
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let overrides = Overrides { policy: args.policy, alpha: args.alpha, seed: args.seed };
    let run = run_scenario(&cfg, overrides, RunOptions { audit: args.output.audit })?;
    print_run(&run, &args.output)
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(s) = args.scale {
        cfg.scale = s;
        cfg.validate()?;
    }
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds };
    let rows = compare_policies(&cfg, &args.policies, &seeds)?;
    let table = comparison_csv(&rows).map_err(|e| Error::Usage(e.to_string()))?;
    match args.out {
        Some(p) => std::fs::write(&p, table).map_err(|source| Error::Io { path: p, source })?,
        None => print!("{table}"),
    }
    Ok(())
}

fn trace(args: TraceArgs) -> Result<(), Error> {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let options = TraceOptions {
        slice_hours: args.slice_hours,
        max_machines: args.max_machines,
        unresolved: if args.policy_unresolved { UnresolvedMode::Policy } else { UnresolvedMode::Exclude },
        spot: SpotInjection { count: args.spot_count, durations: args.spot_durations, ..Default::default() },
        ..Default::default()
    };
    let text = serde_json::json!({
        "version": 1,
        "name": "trace",
        "seed": args.seed,
        "policy": args.policy,
        "engine": { "scheduling_interval": args.scheduling_interval },
        "trace": {
            "source": { "files": {
                "machines": abs(&args.machines),
                "tasks": abs(&args.tasks),
                "schema": args.schema.as_deref().map(abs),
            } },
            "options": options,
        },
    })
    .to_string();
    let cfg = ScenarioConfig::from_json(&text)?;
    debug_assert!(matches!(cfg.trace, Some(TraceSection { source: TraceSource::Files { .. }, .. })));
    let run = run_scenario(&cfg, Overrides::default(), RunOptions { audit: args.output.audit })?;
    print_run(&run, &args.output)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPOTSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Trace(a) => trace(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(e)) => {
            eprintln!("invalid configuration:");
            for f in &e.0 {
                eprintln!("  {}: {}", f.path, f.message);
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
