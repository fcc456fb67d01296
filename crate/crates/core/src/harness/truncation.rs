//! How far signals computed from top-K wire payloads drift from the
//! full-vocabulary ones.
//!
//! The remote backend only ever sees the K most likely tokens plus a residual
//! bucket. [`truncation_sweep`] replays that truncation locally against a model
//! whose full distribution is available, so the choice of K can be checked
//! empirically instead of assumed.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::backends::{BackendError, TokenModel, WirePayload};
use crate::distributions::{entropy, kl_divergence, softmax, TokenDist, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub k: usize,
    pub max_kl_error: f64,
    pub max_entropy_error: f64,
    /// Mean leftover mass folded into the residual bucket.
    pub mean_residual_mass: f64,
    /// Fraction of prefix pairs whose KL ordering survives truncation.
    pub rank_agreement: f64,
}

fn truncate(p: &TokenDist, k: usize) -> Result<TokenDist, HarnessError> {
    let probs = WirePayload::from_probs(p.probs(), k).to_probs(p.dim()).map_err(HarnessError::Backend)?;
    TokenDist::new(probs).map_err(|e| HarnessError::Backend(e.into()))
}

fn pair_agreement(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            agree += usize::from(a[i].total_cmp(&a[j]) == b[i].total_cmp(&b[j]));
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// One row per `k`, each comparing KL-to-unconditional and entropy at every
/// prefix against the untruncated values.
pub fn truncation_sweep(
    model: &dyn TokenModel,
    prefixes: &[Vec<TokenId>],
    ks: &[usize],
) -> Result<Vec<TruncationRow>, HarnessError> {
    if prefixes.is_empty() || ks.contains(&0) {
        return Err(HarnessError::Config("truncation sweep needs prefixes and positive K values".into()));
    }
    let backend = |e: BackendError| HarnessError::Backend(e);
    let q = softmax(&model.unconditional_dist().map_err(backend)?);
    let ps = prefixes
        .iter()
        .map(|prefix| model.next_dist(prefix).map(|l| softmax(&l)).map_err(backend))
        .collect::<Result<Vec<_>, _>>()?;
    let kl = |p: &TokenDist, q: &TokenDist| kl_divergence(p, q).map_err(|e| HarnessError::Backend(e.into()));
    let full_kl = ps.iter().map(|p| kl(p, &q)).collect::<Result<Vec<_>, _>>()?;

    ks.iter()
        .map(|&k| {
            let qk = truncate(&q, k)?;
            let mut row = TruncationRow {
                k,
                max_kl_error: 0.0,
                max_entropy_error: 0.0,
                mean_residual_mass: 0.0,
                rank_agreement: 0.0,
            };
            let mut kls = Vec::with_capacity(ps.len());
            for (p, &d) in ps.iter().zip(&full_kl) {
                let pk = truncate(p, k)?;
                let dk = kl(&pk, &qk)?;
                row.max_kl_error = row.max_kl_error.max((dk - d).abs());
                row.max_entropy_error = row.max_entropy_error.max((entropy(&pk) - entropy(p)).abs());
                row.mean_residual_mass += pk.probs()[p.dim()] / ps.len() as f64;
                kls.push(dk);
            }
            row.rank_agreement = pair_agreement(&full_kl, &kls);
            Ok(row)
        })
        .collect()
}
