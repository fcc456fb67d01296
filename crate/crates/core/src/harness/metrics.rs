use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("greedy peak must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("accuracy over an empty task list")]
    NoTasks,
}

/// Cost figures for one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Filled in by the harness once the answer is checked.
    pub accuracy_hit: Option<bool>,
    /// Every sampled token across all branches.
    pub total_tokens: usize,
    pub final_branch_tokens: usize,
    /// Largest number of generated tokens held by resident branches at once.
    pub peak_mem_proxy: usize,
    pub wall_time_s: f64,
}

impl RunMetrics {
    /// Copy with wall time zeroed, for comparisons that must ignore timing.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }
}

/// Peak memory relative to greedy decoding.
pub fn compute_mcost(peak: f64, peak_greedy: f64) -> Result<f64, MetricsError> {
    if peak_greedy.is_nan() || peak_greedy <= 0.0 {
        return Err(MetricsError::ZeroBaseline(peak_greedy));
    }
    Ok(peak / peak_greedy)
}

/// Fraction of hits.
pub fn compute_accuracy(hits: &[bool]) -> Result<f64, MetricsError> {
    if hits.is_empty() {
        return Err(MetricsError::NoTasks);
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
