//! Benchmark harness: tasks, metrics, traces and strategy comparison.

pub mod answer;
pub mod metrics;
pub mod report;
pub mod task;
pub mod trace;
pub mod truncation;

use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;
use crate::engine::{EngineError, RunError};

pub use answer::extract_answer;
pub use metrics::{compute_accuracy, compute_mcost, RunMetrics};
pub use report::{compare_strategies, run_suite, sweep, CompareOptions, Report, SweepGrid};
pub use task::{load_tasks, parse_tasks, BackendParams, Task, TaskModel};
pub use trace::{Phase, RunTrace, StepRecord};
pub use truncation::{truncation_sweep, TruncationRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("suite mixes {0} and {1} backends")]
    MixedBackends(&'static str, &'static str),
    #[error("backend: {0}")]
    Backend(#[source] BackendError),
    #[error("{label}, task {task}: {source}")]
    Run { label: String, task: usize, source: RunError },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
}

impl HarnessError {
    /// Bad or unreadable input rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        match self {
            HarnessError::Io { .. }
            | HarnessError::Config(_)
            | HarnessError::Task(_)
            | HarnessError::MixedBackends(..) => true,
            HarnessError::Run { source, .. } => matches!(source.source, EngineError::Config(_)),
            _ => false,
        }
    }

    pub fn is_backend_fault(&self) -> bool {
        match self {
            HarnessError::Backend(_) => true,
            HarnessError::Run { source, .. } => source.is_backend_fault(),
            _ => false,
        }
    }
}
