//! `kappa`: run, compare, sweep and plot decoding strategies.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 3 when a
//! backend fails, 1 for anything else.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kappa_core::engine::{RunConfig, Strategy};
use kappa_core::harness::report::{build_report, instantiate_suite, run_suite, CompareOptions, Report, SweepGrid};
use kappa_core::harness::{compare_strategies, load_tasks, sweep, HarnessError};

#[derive(Debug, Parser)]
#[command(name = "kappa", version, about = "Best-of-N decoding with progressive branch pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one strategy over a task file, writing metrics and per-task traces.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Output directory for metrics.json, timing.json and traces/.
        #[arg(long, default_value = "kappa-run")]
        out_dir: PathBuf,
    },
    /// Run several strategies over the same tasks and compare their costs.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',', default_value = "greedy,bon,stbon_proxy,kappa")]
        strategies: Vec<Strategy>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Grid search over the signal hyperparameters.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// JSON grid: {"ema_alpha": [...], "window_w": [...], "mom_buckets_m": [...], "weights": [[kl, conf, ent], ...]}.
        #[arg(long)]
        grid: PathBuf,
        /// Also run greedy and full best-of-N references.
        #[arg(long)]
        baselines: bool,
        #[arg(long, default_value = "sweep.json")]
        out: PathBuf,
    },
    /// Render reduction-ratio bar charts from report files.
    Plot {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "reduction.svg")]
        out: PathBuf,
    },
}

/// Task file, base configuration and flag overrides.
#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    tasks: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_branches: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    c_max: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

/// Configuration problem found by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n_branches {
            cfg.n_branches = v;
        }
        if let Some(v) = self.tau {
            cfg.horizon_tau = v;
        }
        if let Some(v) = self.c_max {
            cfg.c_max = v;
        }
        if let Some(v) = self.max_new_tokens {
            cfg.sampler.max_new_tokens = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        Ok(cfg)
    }
}

fn with_strategy(cfg: &RunConfig, strategy: Strategy) -> RunConfig {
    RunConfig { strategy, ..cfg.clone() }
}

/// Report with wall times zeroed, so reruns produce identical files.
fn without_timing(report: &Report) -> Report {
    let mut r = report.clone();
    for row in &mut r.rows {
        row.aggregate.mean_wall_time_s = 0.0;
        for run in &mut row.runs {
            run.metrics.wall_time_s = 0.0;
        }
    }
    r
}

fn cmd_run(common: &Common, strategy: Option<Strategy>, out_dir: &Path) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    let tasks = load_tasks(&common.tasks)?;
    let (kind, models) = instantiate_suite(&tasks)?;
    let label = cfg.strategy.to_string();
    let suite = run_suite(&models, &tasks, &cfg, &label, true)?;
    for (i, trace) in suite.traces.iter().enumerate() {
        write(&out_dir.join("traces").join(format!("task_{i:03}.jsonl")), &trace.to_jsonl())?;
    }
    let report = build_report(kind, std::slice::from_ref(&suite), &CompareOptions::default())?;
    let timing: Vec<serde_json::Value> = suite
        .outcomes
        .iter()
        .map(|o| serde_json::json!({"task": o.task, "wall_time_s": o.metrics.wall_time_s}))
        .collect();
    write(&out_dir.join("metrics.json"), &without_timing(&report).to_json())?;
    write(&out_dir.join("timing.json"), &serde_json::to_string_pretty(&timing)?)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_compare(common: &Common, strategies: &[Strategy], out: &Path) -> Result<()> {
    if strategies.is_empty() {
        return Err(usage("--strategies is empty"));
    }
    let cfg = common.config()?;
    let tasks = load_tasks(&common.tasks)?;
    let configs: Vec<(String, RunConfig)> =
        strategies.iter().map(|&s| (s.to_string(), with_strategy(&cfg, s))).collect();
    let report = compare_strategies(&tasks, &configs, &CompareOptions::default())?;
    write(out, &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_sweep(common: &Common, grid: &Path, baselines: bool, out: &Path) -> Result<()> {
    let cfg = common.config()?;
    let grid: SweepGrid = serde_json::from_str(&read(grid)?).map_err(|e| usage(format!("{}: {e}", grid.display())))?;
    let tasks = load_tasks(&common.tasks)?;
    let report = sweep(&tasks, &cfg, &grid, baselines)?;
    write(out, &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_plot(reports: &[PathBuf], out: &Path) -> Result<()> {
    let reports = reports
        .iter()
        .map(|p| Report::from_json(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    plot::reduction_chart(&reports, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<HarnessError>() {
        Some(h) if h.is_usage() => 2,
        Some(h) if h.is_backend_fault() => 3,
        _ => 1,
    }
}

/// Error chain joined with `: `, skipping causes already quoted by their
/// parent's message.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            out = format!("{out}: {msg}");
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { common, strategy, out_dir } => cmd_run(common, *strategy, out_dir),
        Command::Compare { common, strategies, out } => cmd_compare(common, strategies, out),
        Command::Sweep { common, grid, baselines, out } => cmd_sweep(common, grid, *baselines, out),
        Command::Plot { reports, out } => cmd_plot(reports, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
