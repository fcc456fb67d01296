//! Decoding strategies.
//!
//! | strategy      | branches | selection                                                  |
//! |---------------|----------|------------------------------------------------------------|
//! | `greedy`      | 1        | argmax every step                                          |
//! | `bon`         | N        | all decoded to the end, best negative perplexity wins      |
//! | `stbon_proxy` | N        | all decoded to `c + tau`, best mean log-prob over the buffer |
//! | `kappa`       | N        | pruned linearly over `[c, c + tau)` by trajectory score    |
//!
//! Every strategy is deterministic in `(config, backend)`; the number of
//! worker threads only changes how fast branches are stepped.

mod baselines;
mod branch;
mod kappa;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, TokenModel};
use crate::distributions::{DistError, SamplerConfig, TokenId};
use crate::harness::metrics::RunMetrics;
use crate::harness::trace::{RunTrace, TraceHeader};
use crate::scheduler::ScheduleError;
use crate::signals::{SignalConfig, SignalWeights};

pub use baselines::{run_bon, run_greedy, run_stbon_proxy};
pub use branch::Branch;
pub use kappa::run_kappa;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Bon,
    StbonProxy,
    Kappa,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Greedy, Strategy::Bon, Strategy::StbonProxy, Strategy::Kappa];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Bon => "bon",
            Strategy::StbonProxy => "stbon_proxy",
            Strategy::Kappa => "kappa",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected greedy, bon, stbon_proxy or kappa)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub n_branches: usize,
    /// Gating horizon for `kappa`, buffer length for `stbon_proxy`.
    pub horizon_tau: usize,
    /// Longest draft phase before the cutoff is forced.
    pub c_max: usize,
    pub sampler: SamplerConfig,
    pub signal: SignalConfig,
    pub weights: SignalWeights,
    pub seed: u64,
    /// Threads stepping branches between barriers; 1 steps them inline.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Kappa,
            n_branches: 20,
            horizon_tau: 40,
            c_max: 64,
            sampler: SamplerConfig::default(),
            signal: SignalConfig::default(),
            weights: SignalWeights::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::Config(msg));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.sampler.validate(vocab_size).map_err(EngineError::Config)?;
        if self.strategy == Strategy::Greedy {
            return Ok(());
        }
        if self.n_branches == 0 {
            return bad("n_branches must be at least 1".into());
        }
        if self.c_max == 0 || self.c_max > self.sampler.max_new_tokens {
            return bad(format!(
                "c_max must be in [1, max_new_tokens={}], got {}",
                self.sampler.max_new_tokens, self.c_max
            ));
        }
        if matches!(self.strategy, Strategy::Kappa | Strategy::StbonProxy) && self.horizon_tau == 0 {
            return bad("horizon_tau must be at least 1".into());
        }
        if self.strategy == Strategy::Kappa {
            self.signal.validate().map_err(EngineError::Config)?;
            self.weights.validate().map_err(EngineError::Config)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("distribution error: {0}")]
    Dist(#[from] DistError),
    #[error("scheduler invariant violated: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// A failed run. Steps recorded before the failure are kept.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct RunError {
    #[source]
    pub source: EngineError,
    pub partial: Option<Box<RunTrace>>,
}

impl RunError {
    pub fn is_backend_fault(&self) -> bool {
        matches!(self.source, EngineError::Backend(_) | EngineError::Dist(_))
    }
}

impl From<EngineError> for RunError {
    fn from(source: EngineError) -> Self {
        Self { source, partial: None }
    }
}

/// What became of one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub logprob_sum: f64,
    /// Timestep of the step that pruned the branch, if any.
    pub pruned_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub final_tokens: Vec<TokenId>,
    pub final_branch: usize,
    pub cutoff_c: Option<usize>,
    pub branches: Vec<BranchOutcome>,
    pub trace: RunTrace,
    pub metrics: RunMetrics,
}

impl RunResult {
    /// Copy with wall time zeroed; two runs of the same configuration compare
    /// equal on this.
    pub fn without_timing(&self) -> Self {
        Self { metrics: self.metrics.without_timing(), ..self.clone() }
    }
}

/// `-exp(-mean log-probability)`; higher is better.
pub fn negative_perplexity(branch: &Branch) -> f64 {
    assert!(!branch.tokens.is_empty(), "negative perplexity of an empty branch");
    -(-branch.logprob_sum / branch.tokens.len() as f64).exp()
}

/// Runs `cfg.strategy` against `model`.
pub fn run(model: &dyn TokenModel, cfg: &RunConfig) -> Result<RunResult, RunError> {
    match cfg.strategy {
        Strategy::Greedy => run_greedy(model, cfg),
        Strategy::Bon => run_bon(model, cfg),
        Strategy::StbonProxy => run_stbon_proxy(model, cfg),
        Strategy::Kappa => run_kappa(model, cfg),
    }
}

/// State shared by every strategy while a run is in flight.
pub(crate) struct Decoder<'a> {
    pub model: &'a dyn TokenModel,
    pub cfg: &'a RunConfig,
    pub trace: RunTrace,
    pool: Option<rayon::ThreadPool>,
    started: Instant,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a dyn TokenModel, cfg: &'a RunConfig, expected: Strategy) -> Result<Self, RunError> {
        if cfg.strategy != expected {
            return Err(EngineError::Config(format!("{expected} runner called with strategy {}", cfg.strategy)).into());
        }
        cfg.validate(model.vocab_size())?;
        let pool = if cfg.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| EngineError::Pool(e.to_string()))?;
            Some(pool)
        } else {
            None
        };
        let header =
            TraceHeader { strategy: cfg.strategy, config: cfg.clone(), vocab_size: model.vocab_size(), cutoff_c: None };
        Ok(Self { model, cfg, trace: RunTrace::new(header), pool, started: Instant::now() })
    }

    pub fn branches(&self, n: usize) -> Vec<Branch> {
        (0..n).map(|i| Branch::new(i, self.cfg)).collect()
    }

    /// Wraps an error with the steps recorded so far.
    pub fn fail(&mut self, err: impl Into<EngineError>) -> RunError {
        let trace = RunTrace::new(self.trace.header.clone());
        RunError { source: err.into(), partial: Some(Box::new(std::mem::replace(&mut self.trace, trace))) }
    }

    /// Applies `f` to every branch in `active` (ascending indices), in
    /// parallel when the pool exists. Outputs come back in index order.
    pub fn par_each<T, F>(&self, branches: &mut [Branch], active: &[usize], f: F) -> Result<Vec<T>, EngineError>
    where
        T: Send,
        F: Fn(&mut Branch) -> Result<T, EngineError> + Sync,
    {
        let mut targets: Vec<&mut Branch> =
            branches.iter_mut().filter(|b| active.binary_search(&b.index).is_ok()).collect();
        let results: Vec<Result<T, EngineError>> = match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| targets.par_iter_mut().map(|b| f(b)).collect())
            }
            None => targets.iter_mut().map(|b| f(b)).collect(),
        };
        results.into_iter().collect()
    }

    /// Decodes the single surviving branch to the end.
    pub fn continue_alone(&mut self, branches: &mut [Branch], survivor: usize) -> Result<(), EngineError> {
        use crate::harness::trace::{Phase, StepRecord};
        let model = self.model;
        let sampler = &self.cfg.sampler;
        while !branches[survivor].finished {
            let token = branches[survivor].sample_step(model, sampler, None)?.token;
            self.trace.push(StepRecord {
                timestep: branches[survivor].tokens.len(),
                phase: Phase::Continuation,
                score_timestep: None,
                alive: vec![survivor],
                signals: Vec::new(),
                sampled: vec![(survivor, token)],
                pruned: Vec::new(),
                resident_tokens: branches[survivor].tokens.len(),
            });
        }
        Ok(())
    }

    pub fn finish(self, branches: Vec<Branch>, winner: usize, cutoff_c: Option<usize>) -> RunResult {
        let mut trace = self.trace;
        trace.header.cutoff_c = cutoff_c;
        let final_tokens = branches[winner].tokens.clone();
        let metrics = RunMetrics {
            accuracy_hit: None,
            total_tokens: trace.sampled_tokens(),
            final_branch_tokens: final_tokens.len(),
            peak_mem_proxy: trace.peak_resident(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let branches = branches
            .into_iter()
            .map(|b| BranchOutcome {
                index: b.index,
                tokens: b.tokens,
                logprob_sum: b.logprob_sum,
                pruned_at: b.pruned_at,
            })
            .collect();
        RunResult {
            strategy: self.cfg.strategy,
            final_tokens,
            final_branch: winner,
            cutoff_c,
            branches,
            trace,
            metrics,
        }
    }
}

/// Sum of generated-token counts over the given branches.
pub(crate) fn resident(branches: &[Branch], alive: impl IntoIterator<Item = usize>) -> usize {
    alive.into_iter().map(|i| branches[i].tokens.len()).sum()
}
