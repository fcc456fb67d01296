use crate::backends::TokenModel;
use crate::harness::trace::{Phase, PruneEvent, StepRecord};

use super::kappa::draft;
use super::{negative_perplexity, resident, Branch, Decoder, EngineError, RunConfig, RunError, RunResult, Strategy};

/// Index of the largest score; ties go to the lowest index.
fn argmax_first(scores: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.expect("at least one candidate").0
}

/// Most likely token at every step.
pub fn run_greedy(model: &dyn TokenModel, cfg: &RunConfig) -> Result<RunResult, RunError> {
    let mut dec = Decoder::new(model, cfg, Strategy::Greedy)?;
    let mut branches = dec.branches(1);
    let max_len = cfg.sampler.max_new_tokens;
    loop {
        let b = &mut branches[0];
        let token = match b.greedy_step(model, max_len) {
            Ok(token) => token,
            Err(e) => return Err(dec.fail(e)),
        };
        dec.trace.push(StepRecord {
            timestep: b.tokens.len(),
            phase: Phase::Greedy,
            score_timestep: None,
            alive: vec![0],
            signals: Vec::new(),
            sampled: vec![(0, token)],
            pruned: Vec::new(),
            resident_tokens: b.tokens.len(),
        });
        if b.finished {
            break;
        }
    }
    Ok(dec.finish(branches, 0, None))
}

/// Samples every branch to the end; the best negative perplexity wins.
pub fn run_bon(model: &dyn TokenModel, cfg: &RunConfig) -> Result<RunResult, RunError> {
    let mut dec = Decoder::new(model, cfg, Strategy::Bon)?;
    let mut branches = dec.branches(cfg.n_branches);
    match bon_phases(&mut dec, &mut branches) {
        Ok(winner) => Ok(dec.finish(branches, winner, None)),
        Err(e) => Err(dec.fail(e)),
    }
}

fn bon_phases(dec: &mut Decoder, branches: &mut [Branch]) -> Result<usize, EngineError> {
    let all: Vec<usize> = (0..branches.len()).collect();
    lockstep(dec, branches, &all, Phase::Sampling, usize::MAX)?;
    Ok(argmax_first(branches.iter().map(|b| (b.index, negative_perplexity(b)))))
}

/// Steps the unfinished branches among `alive` together, at most `steps`
/// times. Every branch in `alive` stays resident.
fn lockstep(
    dec: &mut Decoder,
    branches: &mut [Branch],
    alive: &[usize],
    phase: Phase,
    steps: usize,
) -> Result<(), EngineError> {
    let (model, sampler) = (dec.model, &dec.cfg.sampler);
    for _ in 0..steps {
        let active: Vec<usize> = alive.iter().copied().filter(|&i| !branches[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let stepped = dec.par_each(branches, &active, |b| b.sample_step(model, sampler, None))?;
        let timestep = active.iter().map(|&i| branches[i].tokens.len()).max().expect("nonempty");
        dec.trace.push(StepRecord {
            timestep,
            phase,
            score_timestep: None,
            alive: alive.to_vec(),
            signals: Vec::new(),
            sampled: active.iter().zip(&stepped).map(|(&i, s)| (i, s.token)).collect(),
            pruned: Vec::new(),
            resident_tokens: resident(branches, alive.iter().copied()),
        });
    }
    Ok(())
}

/// Early-truncation baseline: draft to the cutoff, sample a buffer of `tau`
/// more tokens on every branch, keep the branch with the best mean
/// log-probability over the buffer, and continue it alone. This stands in for
/// a hidden-state consistency estimator, which needs model internals.
pub fn run_stbon_proxy(model: &dyn TokenModel, cfg: &RunConfig) -> Result<RunResult, RunError> {
    let mut dec = Decoder::new(model, cfg, Strategy::StbonProxy)?;
    let mut branches = dec.branches(cfg.n_branches);
    match stbon_phases(&mut dec, &mut branches) {
        Ok((winner, c)) => Ok(dec.finish(branches, winner, Some(c))),
        Err(e) => Err(dec.fail(e)),
    }
}

fn buffer_score(b: &Branch, c: usize) -> f64 {
    match b.logprobs.get(c..) {
        Some(window) if !window.is_empty() => window.iter().sum::<f64>() / window.len() as f64,
        _ => b.mean_logprob(),
    }
}

fn stbon_phases(dec: &mut Decoder, branches: &mut [Branch]) -> Result<(usize, usize), EngineError> {
    let c = draft(dec, branches)?;
    let all: Vec<usize> = (0..branches.len()).collect();
    lockstep(dec, branches, &all, Phase::Buffer, dec.cfg.horizon_tau)?;
    let scores: Vec<(usize, f64)> = branches.iter().map(|b| (b.index, buffer_score(b, c))).collect();
    let winner = argmax_first(scores.iter().copied());
    let cut = dec.trace.steps.last().map(|s| s.timestep).unwrap_or(0);
    for b in branches.iter_mut().filter(|b| b.index != winner) {
        b.alive = false;
        b.pruned_at = Some(cut);
    }
    if let Some(last) = dec.trace.steps.last_mut() {
        last.pruned =
            scores.iter().filter(|(i, _)| *i != winner).map(|&(branch, score)| PruneEvent { branch, score }).collect();
    }
    dec.continue_alone(branches, winner)?;
    Ok((winner, c))
}
