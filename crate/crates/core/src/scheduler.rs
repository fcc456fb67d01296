//! Alive-set bookkeeping: where drafting stops, how many branches survive each
//! gating step, and which ones.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::distributions::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("timestep {t} is outside the gating window [{start}, {end})")]
    OutsideWindow { t: usize, start: usize, end: usize },
    #[error("alive set is empty")]
    EmptyAliveSet,
    #[error("prune target {target} exceeds alive count {alive}")]
    TargetTooLarge { target: usize, alive: usize },
}

/// Linear survivor schedule over the gating window `[c, c + tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneSchedule {
    pub n_branches: usize,
    pub cutoff_c: usize,
    pub horizon_tau: usize,
}

impl PruneSchedule {
    pub fn new(n_branches: usize, cutoff_c: usize, horizon_tau: usize) -> Self {
        assert!(n_branches >= 1 && horizon_tau >= 1);
        Self { n_branches, cutoff_c, horizon_tau }
    }

    /// `max(1, N - floor((t - c + 1) N / tau))`.
    pub fn survivor_target(&self, t: usize) -> Result<usize, ScheduleError> {
        let end = self.cutoff_c + self.horizon_tau;
        if t < self.cutoff_c || t >= end {
            return Err(ScheduleError::OutsideWindow { t, start: self.cutoff_c, end });
        }
        let k = t - self.cutoff_c + 1;
        let removed = k * self.n_branches / self.horizon_tau;
        Ok(self.n_branches.saturating_sub(removed).max(1))
    }
}

/// Free-function form of [`PruneSchedule::survivor_target`].
pub fn survivor_target(schedule: &PruneSchedule, t: usize) -> Result<usize, ScheduleError> {
    schedule.survivor_target(t)
}

/// Branch indices still competing, kept in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliveSet(Vec<usize>);

impl AliveSet {
    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

/// True when every pair of length-`t` prefixes differs. Sequences shorter than
/// `t` stopped early and count as distinct from all others.
pub fn prefixes_pairwise_distinct<S: AsRef<[TokenId]>>(prefixes: &[S], t: usize) -> bool {
    let mut seen = HashSet::with_capacity(prefixes.len());
    prefixes.iter().map(AsRef::as_ref).filter(|p| p.len() >= t).all(|p| seen.insert(&p[..t]))
}

/// Earliest `t` at which all length-`t` prefixes are pairwise distinct, or
/// `c_max` when that never happens by then.
pub fn detect_draft_cutoff<S: AsRef<[TokenId]>>(prefixes: &[S], c_max: usize) -> usize {
    (1..=c_max).find(|&t| prefixes_pairwise_distinct(prefixes, t)).unwrap_or(c_max)
}

fn ranked(alive: &AliveSet, scores: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> =
        alive.iter().map(|i| (scores.get(&i).copied().unwrap_or(f64::NEG_INFINITY), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, i)| i).collect()
}

/// Keeps the `target` best-scoring branches; equal scores favour the lower
/// index. Returns the survivors and the removed branches (worst last).
pub fn prune_to_target(
    alive: &AliveSet,
    scores: &BTreeMap<usize, f64>,
    target: usize,
) -> Result<(AliveSet, Vec<usize>), ScheduleError> {
    if target > alive.len() {
        return Err(ScheduleError::TargetTooLarge { target, alive: alive.len() });
    }
    let order = ranked(alive, scores);
    let (keep, drop) = order.split_at(target);
    Ok((AliveSet::from_indices(keep.to_vec()), drop.to_vec()))
}

/// Winner among the alive branches: highest score, then lowest index.
pub fn select_final(alive: &AliveSet, scores: &BTreeMap<usize, f64>) -> Result<usize, ScheduleError> {
    match alive.indices() {
        [] => Err(ScheduleError::EmptyAliveSet),
        [only] => Ok(*only),
        _ => Ok(ranked(alive, scores)[0]),
    }
}
