//! Suite runs, strategy comparison and hyperparameter sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_accuracy, compute_mcost, RunMetrics};
use super::task::{suite_backend_kind, Instantiator, Task, TaskModel};
use super::trace::RunTrace;
use super::HarnessError;
use crate::engine::{run, RunConfig, Strategy};
use crate::signals::SignalWeights;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Seed of task `index` in a suite run with base seed `base`.
pub fn task_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: usize,
    pub seed: u64,
    pub final_branch: usize,
    pub cutoff_c: Option<usize>,
    pub metrics: RunMetrics,
}

/// One configuration run over a whole suite.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub label: String,
    pub config: RunConfig,
    pub outcomes: Vec<TaskOutcome>,
    /// Kept only when requested.
    pub traces: Vec<RunTrace>,
}

pub fn run_suite(
    models: &[TaskModel],
    tasks: &[Task],
    cfg: &RunConfig,
    label: &str,
    keep_traces: bool,
) -> Result<SuiteRun, HarnessError> {
    let mut outcomes = Vec::with_capacity(tasks.len());
    let mut traces = Vec::new();
    for (i, (model, task)) in models.iter().zip(tasks).enumerate() {
        let seed = task_seed(cfg.seed, i);
        let task_cfg = RunConfig { seed, ..cfg.clone() };
        let result =
            run(model, &task_cfg).map_err(|source| HarnessError::Run { label: label.into(), task: i, source })?;
        let generated: usize = result.branches.iter().map(|b| b.tokens.len()).sum();
        if generated != result.metrics.total_tokens || !result.trace.is_strictly_increasing() {
            return Err(HarnessError::Invariant(format!(
                "{label}, task {i}: trace records {} sampled tokens, branches hold {generated}",
                result.metrics.total_tokens
            )));
        }
        let mut metrics = result.metrics.clone();
        metrics.accuracy_hit = Some(model.is_hit(&result.final_tokens, &task.answer));
        outcomes.push(TaskOutcome {
            task: i,
            seed,
            final_branch: result.final_branch,
            cutoff_c: result.cutoff_c,
            metrics,
        });
        if keep_traces {
            traces.push(result.trace);
        }
    }
    Ok(SuiteRun { label: label.into(), config: cfg.clone(), outcomes, traces })
}

pub fn instantiate_suite(tasks: &[Task]) -> Result<(&'static str, Vec<TaskModel>), HarnessError> {
    let kind = suite_backend_kind(tasks)?;
    let mut inst = Instantiator::new();
    let models = tasks.iter().map(|t| inst.instantiate(t)).collect::<Result<_, _>>()?;
    Ok((kind, models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    pub accuracy: f64,
    pub mean_total_tokens: f64,
    pub mean_final_branch_tokens: f64,
    pub mean_peak_mem_proxy: f64,
    pub mean_wall_time_s: f64,
}

impl Aggregate {
    fn of(outcomes: &[TaskOutcome]) -> Result<Self, HarnessError> {
        let n = outcomes.len() as f64;
        let mean = |f: fn(&RunMetrics) -> f64| outcomes.iter().map(|o| f(&o.metrics)).sum::<f64>() / n;
        let hits: Vec<bool> = outcomes.iter().map(|o| o.metrics.accuracy_hit.unwrap_or(false)).collect();
        Ok(Self {
            tasks: outcomes.len(),
            accuracy: compute_accuracy(&hits).map_err(|e| HarnessError::Config(e.to_string()))?,
            mean_total_tokens: mean(|m| m.total_tokens as f64),
            mean_final_branch_tokens: mean(|m| m.final_branch_tokens as f64),
            mean_peak_mem_proxy: mean(|m| m.peak_mem_proxy as f64),
            mean_wall_time_s: mean(|m| m.wall_time_s),
        })
    }
}

/// This row's mean cost over a reference row's; `reduction = 1 - ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub reference: String,
    pub token_ratio: f64,
    pub token_reduction: f64,
    pub peak_ratio: f64,
    pub peak_reduction: f64,
}

impl Ratios {
    fn between(row: &Aggregate, reference: &Aggregate, name: &str) -> Self {
        let token_ratio = row.mean_total_tokens / reference.mean_total_tokens;
        let peak_ratio = row.mean_peak_mem_proxy / reference.mean_peak_mem_proxy;
        Self {
            reference: name.into(),
            token_ratio,
            token_reduction: 1.0 - token_ratio,
            peak_ratio,
            peak_reduction: 1.0 - peak_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Strategy,
    pub config: RunConfig,
    pub aggregate: Aggregate,
    pub vs_bon: Option<Ratios>,
    pub vs_greedy: Option<Ratios>,
    /// Mean peak over the greedy reference's mean peak.
    pub m_cost: Option<f64>,
    pub runs: Vec<TaskOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub backend: String,
    pub tasks: usize,
    pub bon_reference: Option<String>,
    pub greedy_reference: Option<String>,
    pub rows: Vec<ReportRow>,
}

/// Reference rows for the ratio columns. Unset references default to the
/// first `bon` and first `greedy` rows.
#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    pub bon_reference: Option<String>,
    pub greedy_reference: Option<String>,
}

fn pick_reference(
    runs: &[SuiteRun],
    named: &Option<String>,
    strategy: Strategy,
) -> Result<Option<usize>, HarnessError> {
    match named {
        Some(name) => runs
            .iter()
            .position(|r| &r.label == name)
            .map(Some)
            .ok_or_else(|| HarnessError::Config(format!("reference row {name:?} is not in the comparison"))),
        None => Ok(runs.iter().position(|r| r.config.strategy == strategy)),
    }
}

/// Fewer tokens than full best-of-N on every task where the survivor ran past
/// the gating window.
fn check_token_inequality(runs: &[SuiteRun]) -> Result<(), HarnessError> {
    for k in runs.iter().filter(|r| r.config.strategy == Strategy::Kappa && r.config.n_branches >= 2) {
        for b in runs.iter().filter(|r| {
            r.config.strategy == Strategy::Bon
                && r.config.n_branches == k.config.n_branches
                && r.config.seed == k.config.seed
        }) {
            for (ko, bo) in k.outcomes.iter().zip(&b.outcomes) {
                let window_end = ko.cutoff_c.unwrap_or(0) + k.config.horizon_tau;
                if ko.metrics.final_branch_tokens > window_end && ko.metrics.total_tokens >= bo.metrics.total_tokens {
                    return Err(HarnessError::Invariant(format!(
                        "task {}: {} used {} tokens, {} used {}",
                        ko.task, k.label, ko.metrics.total_tokens, b.label, bo.metrics.total_tokens
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn build_report(backend: &str, runs: &[SuiteRun], opts: &CompareOptions) -> Result<Report, HarnessError> {
    check_token_inequality(runs)?;
    let aggregates = runs.iter().map(|r| Aggregate::of(&r.outcomes)).collect::<Result<Vec<_>, _>>()?;
    let bon = pick_reference(runs, &opts.bon_reference, Strategy::Bon)?;
    let greedy = pick_reference(runs, &opts.greedy_reference, Strategy::Greedy)?;
    let rows = runs
        .iter()
        .zip(&aggregates)
        .map(|(r, agg)| {
            let vs = |reference: Option<usize>| reference.map(|i| Ratios::between(agg, &aggregates[i], &runs[i].label));
            let m_cost =
                greedy.and_then(|g| compute_mcost(agg.mean_peak_mem_proxy, aggregates[g].mean_peak_mem_proxy).ok());
            ReportRow {
                label: r.label.clone(),
                strategy: r.config.strategy,
                config: r.config.clone(),
                aggregate: agg.clone(),
                vs_bon: vs(bon),
                vs_greedy: vs(greedy),
                m_cost,
                runs: r.outcomes.clone(),
            }
        })
        .collect();
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        backend: backend.into(),
        tasks: runs.first().map_or(0, |r| r.outcomes.len()),
        bon_reference: bon.map(|i| runs[i].label.clone()),
        greedy_reference: greedy.map(|i| runs[i].label.clone()),
        rows,
    })
}

/// Runs every labelled configuration over the suite and compares them.
pub fn compare_strategies(
    tasks: &[Task],
    configs: &[(String, RunConfig)],
    opts: &CompareOptions,
) -> Result<Report, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::Config("nothing to compare".into()));
    }
    let (kind, models) = instantiate_suite(tasks)?;
    let runs = configs
        .iter()
        .map(|(label, cfg)| run_suite(&models, tasks, cfg, label, false))
        .collect::<Result<Vec<_>, _>>()?;
    build_report(kind, &runs, opts)
}

/// Hyperparameter grid; an empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub ema_alpha: Vec<f64>,
    pub window_w: Vec<usize>,
    pub mom_buckets_m: Vec<usize>,
    /// `[w_kl, w_conf, w_ent]` triples.
    pub weights: Vec<[f64; 3]>,
}

impl SweepGrid {
    /// Labelled kappa configurations, one per grid point.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>, HarnessError> {
        fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let b = &base.signal;
        let bw = base.weights;
        let mut out = Vec::new();
        for alpha in axis(&self.ema_alpha, b.ema_alpha) {
            for w in axis(&self.window_w, b.window_w) {
                for m in axis(&self.mom_buckets_m, b.mom_buckets_m) {
                    for [wk, wc, wh] in axis(&self.weights, [bw.w_kl, bw.w_conf, bw.w_ent]) {
                        let mut cfg = base.clone();
                        cfg.strategy = Strategy::Kappa;
                        cfg.signal.ema_alpha = alpha;
                        cfg.signal.window_w = w;
                        cfg.signal.mom_buckets_m = m;
                        cfg.weights = SignalWeights::new(wk, wc, wh);
                        cfg.signal.validate().and_then(|_| cfg.weights.validate()).map_err(HarnessError::Config)?;
                        out.push((format!("kappa a={alpha} w={w} m={m} wts=({wk},{wc},{wh})"), cfg));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs every grid point, optionally alongside greedy and full best-of-N
/// references built from the base configuration.
pub fn sweep(tasks: &[Task], base: &RunConfig, grid: &SweepGrid, with_baselines: bool) -> Result<Report, HarnessError> {
    let mut configs = Vec::new();
    if with_baselines {
        configs.push(("greedy".to_string(), RunConfig { strategy: Strategy::Greedy, ..base.clone() }));
        configs.push(("bon".to_string(), RunConfig { strategy: Strategy::Bon, ..base.clone() }));
    }
    configs.extend(grid.expand(base)?);
    compare_strategies(tasks, &configs, &CompareOptions::default())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let report: Report = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table of the aggregate columns.
    pub fn to_table(&self) -> String {
        let headers = ["strategy", "acc", "total tok", "final tok", "peak", "tok red/bon", "peak red/bon", "M_cost"];
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                let a = &r.aggregate;
                [
                    r.label.clone(),
                    format!("{:.3}", a.accuracy),
                    format!("{:.1}", a.mean_total_tokens),
                    format!("{:.1}", a.mean_final_branch_tokens),
                    format!("{:.1}", a.mean_peak_mem_proxy),
                    fmt_opt(r.vs_bon.as_ref().map(|v| v.token_reduction)),
                    fmt_opt(r.vs_bon.as_ref().map(|v| v.peak_reduction)),
                    fmt_opt(r.m_cost),
                ]
            })
            .collect();
        let widths: Vec<usize> =
            (0..8).map(|c| body.iter().map(|row| row[c].len()).chain([headers[c].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&headers);
        for row in &body {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}
