//! Probability-vector primitives shared by scoring and sampling.
//!
//! Everything here works in nats. Signals (KL, entropy, confidence) are computed
//! on the raw softmax of the backend logits; sampling goes through
//! temperature, then top-k, then top-p, then renormalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier in the backend's vocabulary.
pub type TokenId = u32;

/// Floor substituted for zero entries of the reference distribution in KL.
pub const KL_Q_FLOOR: f64 = 1e-12;
/// Offset inside the entropy logarithm.
pub const ENTROPY_EPS: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("non-finite logit {value} at token {index}")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("invalid probability {value} at token {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    BadMass(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty distribution")]
    Empty,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
}

/// Unnormalized per-token scores as produced by a backend. Finite entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(logits: Vec<f64>) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DistError::NonFiniteLogit { index, value });
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
}

impl TokenDist {
    /// Validates non-negativity and unit mass (within 1e-6), then renormalizes
    /// exactly.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.is_empty() {
            return Err(DistError::Empty);
        }
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(DistError::InvalidProbability { index, value });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::BadMass(total));
        }
        Ok(Self::normalized_unchecked(probs, total))
    }

    fn normalized_unchecked(mut probs: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs at least one token");
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn one_hot(n: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; n];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Lowest-id token among those with maximal probability.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Zeroes the given token and renormalizes. Returns `None` when no mass
    /// would remain.
    pub fn without_token(&self, token: TokenId) -> Option<Self> {
        let mut probs = self.probs.clone();
        probs[token as usize] = 0.0;
        let total: f64 = probs.iter().sum();
        (total > 0.0).then(|| Self::normalized_unchecked(probs, total))
    }
}

/// Sampling stack settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 0.7, top_k: 20, top_p: 0.95, max_new_tokens: 1024 }
    }
}

impl SamplerConfig {
    /// Plain categorical sampling from the full distribution.
    pub fn unfiltered(vocab_size: usize) -> Self {
        Self { temperature: 1.0, top_k: vocab_size, top_p: 1.0, max_new_tokens: 1024 }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(format!("top_k must be in [1, {vocab_size}], got {}", self.top_k));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Max-shifted softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &LogitVec, temperature: f64) -> Result<TokenDist, DistError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DistError::BadTemperature(temperature));
    }
    let l = logits.as_slice();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(TokenDist::normalized_unchecked(exps, total))
}

/// `softmax_with_temperature` at T = 1.
pub fn softmax(logits: &LogitVec) -> TokenDist {
    softmax_with_temperature(logits, 1.0).expect("unit temperature is valid")
}

/// KL(p || q) in nats. Zero entries of `q` are floored at [`KL_Q_FLOOR`] and
/// `q` renormalized, so the result stays finite when p's support exceeds q's.
pub fn kl_divergence(p: &TokenDist, q: &TokenDist) -> Result<f64, DistError> {
    if p.dim() != q.dim() {
        return Err(DistError::DimensionMismatch { left: p.dim(), right: q.dim() });
    }
    let qp = q.probs();
    let needs_floor = qp.contains(&0.0);
    let floored;
    let qv: &[f64] = if needs_floor {
        let raw: Vec<f64> = qp.iter().map(|&x| if x == 0.0 { KL_Q_FLOOR } else { x }).collect();
        let total: f64 = raw.iter().sum();
        floored = raw.into_iter().map(|x| x / total).collect::<Vec<_>>();
        &floored
    } else {
        qp
    };
    let kl: f64 = p.probs().iter().zip(qv).filter(|(&pv, _)| pv > 0.0).map(|(&pv, &qv)| pv * (pv / qv).ln()).sum();
    debug_assert!(kl >= -1e-9, "KL below tolerance: {kl}");
    Ok(kl.max(0.0))
}

/// `-Σ p ln(p + ε)` in nats.
pub fn entropy(p: &TokenDist) -> f64 {
    -p.probs().iter().map(|&pv| pv * (pv + ENTROPY_EPS).ln()).sum::<f64>()
}

/// Largest single-token probability.
pub fn confidence(p: &TokenDist) -> f64 {
    p.probs().iter().copied().fold(0.0, f64::max)
}

/// Keeps the `top_k` most likely tokens (ties to the lower id), then the
/// shortest descending prefix of those whose renormalized mass reaches
/// `top_p`, and renormalizes. At least one token survives; zero-probability
/// tokens never do.
pub fn filter_top_k_top_p(p: &TokenDist, cfg: &SamplerConfig) -> TokenDist {
    let probs = p.probs();
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.max(1));

    let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cumulative = 0.0;
    let mut keep = order.len();
    for (rank, &i) in order.iter().enumerate() {
        cumulative += probs[i] / kept_mass;
        if cumulative >= cfg.top_p {
            keep = rank + 1;
            break;
        }
    }
    order.truncate(keep);

    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / total;
    }
    TokenDist { probs: out }
}

/// Full sampling pipeline on raw logits: temperature, top-k, top-p.
pub fn sampling_dist(logits: &LogitVec, cfg: &SamplerConfig) -> Result<TokenDist, DistError> {
    let shaped = softmax_with_temperature(logits, cfg.temperature)?;
    Ok(filter_top_k_top_p(&shaped, cfg))
}

/// A private, reproducible random stream. Each decoding branch owns one.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream keyed by `(seed, branch)`. Draws on one branch's
    /// stream never shift another's.
    pub fn for_branch(seed: u64, branch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(branch as u64);
        Self(rng)
    }

    pub fn next_unit(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

/// Inverse-CDF categorical draw. Consumes exactly one uniform from `rng`.
pub fn sample_token(p: &TokenDist, rng: &mut RngStream) -> TokenId {
    let u = rng.next_unit();
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (i, &pv) in p.probs().iter().enumerate() {
        if pv <= 0.0 {
            continue;
        }
        cumulative += pv;
        last_nonzero = i;
        if u < cumulative {
            return i as TokenId;
        }
    }
    last_nonzero as TokenId
}
