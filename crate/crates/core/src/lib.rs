//! Best-of-N decoding with progressive, signal-driven branch pruning.
//!
//! N branches are sampled in lockstep until their prefixes all differ (the
//! draft cutoff `c`). Over the next `tau` steps each branch is scored on how
//! quickly it moves away from the model's unconditional distribution, how
//! confident it is and how much entropy it carries; the alive set shrinks
//! linearly until one branch remains, which then decodes alone.
//!
//! The crate also provides the usual baselines (greedy, full best-of-N with
//! negative-perplexity selection, and an early-truncation proxy), three token
//! model backends and a benchmark harness.
//!
//! ```
//! use kappa_core::backends::{PlantedTask, SyntheticParams};
//! use kappa_core::engine::{run, RunConfig, Strategy};
//!
//! let params = SyntheticParams { min_len: 60, max_len: 80, ..Default::default() };
//! let task = PlantedTask::new(params, vec![5, 6, 7], "42").unwrap();
//! let cfg = RunConfig { strategy: Strategy::Kappa, n_branches: 4, horizon_tau: 8, ..Default::default() };
//! let result = run(&task, &cfg).unwrap();
//! assert!(result.metrics.total_tokens >= result.final_tokens.len());
//! ```

pub mod backends;
pub mod distributions;
pub mod engine;
pub mod harness;
pub mod scheduler;
pub mod signals;

pub use backends::{BackendError, TokenModel};
pub use distributions::{LogitVec, SamplerConfig, TokenDist, TokenId};
pub use engine::{run, EngineError, RunConfig, RunError, RunResult, Strategy};
pub use signals::{SignalConfig, SignalWeights};
