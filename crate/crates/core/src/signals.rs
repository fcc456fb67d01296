//! Per-branch scoring signals and their cross-branch aggregation.
//!
//! Each gating step a branch turns its next-token distribution into three raw
//! signals: a smoothed KL trend (information gain), confidence, and entropy.
//! The engine then z-normalizes every signal across the alive branches,
//! combines them linearly, and folds the result into a recency-weighted
//! trajectory score.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distributions::{confidence, entropy, kl_divergence, DistError, TokenDist};

/// Stabilizer added to the population standard deviation.
pub const ZSCORE_EPS: f64 = 1e-8;
/// Below this spread every z-score is 0.
pub const ZSCORE_MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalWeights {
    pub w_kl: f64,
    pub w_conf: f64,
    pub w_ent: f64,
}

impl Default for SignalWeights {
    fn default() -> Self {
        Self { w_kl: 0.7, w_conf: 0.2, w_ent: 0.1 }
    }
}

impl SignalWeights {
    pub fn new(w_kl: f64, w_conf: f64, w_ent: f64) -> Self {
        Self { w_kl, w_conf, w_ent }
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.w_kl, self.w_conf, self.w_ent].iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(format!("signal weights must be finite: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    /// Length of the information-gain history used for median-of-means.
    pub window_w: usize,
    pub mom_buckets_m: usize,
    pub ema_alpha: f64,
    pub clamp_bound: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self { window_w: 16, mom_buckets_m: 4, ema_alpha: 0.5, clamp_bound: 3.0 }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_w == 0 {
            return Err("window_w must be positive".into());
        }
        if self.mom_buckets_m == 0 || self.mom_buckets_m > self.window_w {
            return Err(format!(
                "mom_buckets_m must be in [1, window_w={}], got {}",
                self.window_w, self.mom_buckets_m
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(format!("ema_alpha must be in (0, 1), got {}", self.ema_alpha));
        }
        if !(self.clamp_bound.is_finite() && self.clamp_bound > 0.0) {
            return Err(format!("clamp_bound must be positive, got {}", self.clamp_bound));
        }
        Ok(())
    }
}

/// Raw per-branch signals for one gating step, before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSignals {
    pub kl: f64,
    pub delta: f64,
    pub delta_smoothed: f64,
    pub ema: f64,
    pub confidence: f64,
    pub entropy: f64,
}

/// Running statistics owned by one branch during gating.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    prev_kl: f64,
    delta_window: VecDeque<f64>,
    window_w: usize,
    ema_raw: f64,
    steps_since_c: usize,
    score_history: Vec<(usize, f64)>,
}

impl SignalState {
    /// Fresh state: previous KL and EMA accumulator both start at 0.
    pub fn new(window_w: usize) -> Self {
        assert!(window_w > 0);
        Self {
            prev_kl: 0.0,
            delta_window: VecDeque::with_capacity(window_w),
            window_w,
            ema_raw: 0.0,
            steps_since_c: 0,
            score_history: Vec::new(),
        }
    }

    /// Records the current KL and returns its change since the previous step.
    pub fn update_kl_delta(&mut self, d_now: f64) -> f64 {
        let delta = d_now - self.prev_kl;
        if self.delta_window.len() == self.window_w {
            self.delta_window.pop_front();
        }
        self.delta_window.push_back(delta);
        self.prev_kl = d_now;
        delta
    }

    /// Information-gain history, oldest first.
    pub fn delta_window(&self) -> Vec<f64> {
        self.delta_window.iter().copied().collect()
    }

    /// Advances the gating step counter, folds `smoothed` into the raw
    /// accumulator and returns the bias-corrected read
    /// `raw / (1 - (1 - alpha)^k)`.
    pub fn ema_update_and_read(&mut self, smoothed: f64, alpha: f64) -> f64 {
        self.steps_since_c += 1;
        self.ema_raw = alpha * smoothed + (1.0 - alpha) * self.ema_raw;
        self.ema_raw / (1.0 - (1.0 - alpha).powi(self.steps_since_c as i32))
    }

    pub fn steps_since_c(&self) -> usize {
        self.steps_since_c
    }

    pub fn push_score(&mut self, timestep: usize, score: f64) {
        if let Some(&(last, _)) = self.score_history.last() {
            debug_assert_eq!(timestep, last + 1, "score timesteps must be consecutive");
        }
        self.score_history.push((timestep, score));
    }

    pub fn score_history(&self) -> &[(usize, f64)] {
        &self.score_history
    }

    /// Runs one step of the raw signal pipeline on `p` against reference `q`.
    pub fn observe(&mut self, p: &TokenDist, q: &TokenDist, cfg: &SignalConfig) -> Result<RawSignals, DistError> {
        let kl = kl_divergence(p, q)?;
        let delta = self.update_kl_delta(kl);
        let delta_smoothed = mom_smooth(self.delta_window.make_contiguous(), cfg.mom_buckets_m);
        let ema = self.ema_update_and_read(delta_smoothed, cfg.ema_alpha);
        Ok(RawSignals { kl, delta, delta_smoothed, ema, confidence: confidence(p), entropy: entropy(p) })
    }
}

/// Median of bucket means. The window (oldest to newest) is cut into
/// `min(m, len)` contiguous buckets whose sizes differ by at most one, the
/// longer buckets first.
pub fn mom_smooth(window: &[f64], m: usize) -> f64 {
    assert!(!window.is_empty(), "median-of-means needs a nonempty window");
    assert!(m > 0);
    let n = window.len();
    let buckets = m.min(n);
    let (size, extra) = (n / buckets, n % buckets);
    let mut means = Vec::with_capacity(buckets);
    let mut lo = 0;
    for b in 0..buckets {
        let hi = lo + size + usize::from(b < extra);
        means.push(window[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        lo = hi;
    }
    median(&mut means)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Population z-scores clamped to `[-clamp_bound, clamp_bound]`; all zero when
/// the spread is degenerate.
pub fn zscore_normalize(values: &[f64], clamp_bound: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZSCORE_MIN_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - mean) / (std + ZSCORE_EPS)).clamp(-clamp_bound, clamp_bound)).collect()
}

pub fn instantaneous_score(ema_z: f64, conf_z: f64, ent_z: f64, wts: &SignalWeights) -> f64 {
    wts.w_kl * ema_z + wts.w_conf * conf_z + wts.w_ent * ent_z
}

/// Weighted mean of the history with weight proportional to the timestep,
/// normalized over timesteps `c..=t`.
pub fn trajectory_score(history: &[(usize, f64)], c: usize) -> f64 {
    assert!(!history.is_empty(), "trajectory score needs at least one step");
    debug_assert_eq!(history[0].0, c, "history must start at the draft cutoff");
    let norm: f64 = history.iter().map(|&(t, _)| t as f64).sum();
    history.iter().map(|&(t, s)| t as f64 / norm * s).sum()
}
