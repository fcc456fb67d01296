use std::collections::BTreeMap;

use crate::backends::checked_logits;
use crate::distributions::softmax;
use crate::harness::trace::{BranchSignals, Phase, PruneEvent, StepRecord};
use crate::scheduler::{prefixes_pairwise_distinct, prune_to_target, select_final, AliveSet, PruneSchedule};
use crate::signals::{instantaneous_score, trajectory_score, zscore_normalize, RawSignals};

use super::{resident, Branch, Decoder, EngineError, RunConfig, RunError, RunResult, Strategy};
use crate::backends::TokenModel;

/// Draft, score-and-gate over `[c, c + tau)`, then continue the survivor.
pub fn run_kappa(model: &dyn TokenModel, cfg: &RunConfig) -> Result<RunResult, RunError> {
    let mut dec = Decoder::new(model, cfg, Strategy::Kappa)?;
    let mut branches = dec.branches(cfg.n_branches);
    match phases(&mut dec, &mut branches) {
        Ok((winner, c)) => Ok(dec.finish(branches, winner, Some(c))),
        Err(e) => Err(dec.fail(e)),
    }
}

fn phases(dec: &mut Decoder, branches: &mut [Branch]) -> Result<(usize, usize), EngineError> {
    let c = draft(dec, branches)?;
    let (alive, scores) = gate(dec, branches, c)?;
    let winner = select_final(&alive, &scores)?;
    dec.continue_alone(branches, winner)?;
    Ok((winner, c))
}

/// Samples every branch in lockstep until their prefixes are pairwise
/// distinct, or until `c_max`. Returns the cutoff `c`.
pub(crate) fn draft(dec: &mut Decoder, branches: &mut [Branch]) -> Result<usize, EngineError> {
    let (model, sampler) = (dec.model, &dec.cfg.sampler);
    let all: Vec<usize> = (0..branches.len()).collect();
    for t in 1..=dec.cfg.c_max {
        let active: Vec<usize> = all.iter().copied().filter(|&i| !branches[i].finished).collect();
        if active.is_empty() {
            // everyone stopped before separating
            return Ok(t - 1);
        }
        let stepped = dec.par_each(branches, &active, |b| b.sample_step(model, sampler, None))?;
        dec.trace.push(StepRecord {
            timestep: t,
            phase: Phase::Draft,
            score_timestep: None,
            alive: all.clone(),
            signals: Vec::new(),
            sampled: active.iter().zip(&stepped).map(|(&i, s)| (i, s.token)).collect(),
            pruned: Vec::new(),
            resident_tokens: resident(branches, all.iter().copied()),
        });
        let prefixes: Vec<&[_]> = branches.iter().map(|b| b.tokens.as_slice()).collect();
        if prefixes_pairwise_distinct(&prefixes, t) {
            return Ok(t);
        }
    }
    Ok(dec.cfg.c_max)
}

fn column(raws: &[RawSignals], f: fn(&RawSignals) -> f64) -> Vec<f64> {
    raws.iter().map(f).collect()
}

/// Gating phase. Returns the final alive set and trajectory scores.
fn gate(dec: &mut Decoder, branches: &mut [Branch], c: usize) -> Result<(AliveSet, BTreeMap<usize, f64>), EngineError> {
    let cfg = dec.cfg;
    let model = dec.model;
    let q = softmax(&checked_logits(model, model.unconditional_dist()?)?);
    let schedule = PruneSchedule::new(cfg.n_branches, c, cfg.horizon_tau);
    let mut alive = AliveSet::all(cfg.n_branches);
    // finished branches keep their last trajectory score
    let mut scores: BTreeMap<usize, f64> = alive.iter().map(|i| (i, 0.0)).collect();

    for t in c..c + cfg.horizon_tau {
        let active: Vec<usize> = alive.iter().filter(|&i| !branches[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let stepped =
            dec.par_each(branches, &active, |b| b.sample_step(model, &cfg.sampler, Some((&q, &cfg.signal))))?;
        let raws: Vec<RawSignals> = stepped.iter().map(|s| s.raw.expect("scored step")).collect();

        let clamp = cfg.signal.clamp_bound;
        let z_ema = zscore_normalize(&column(&raws, |r| r.ema), clamp);
        let z_conf = zscore_normalize(&column(&raws, |r| r.confidence), clamp);
        let z_ent = zscore_normalize(&column(&raws, |r| r.entropy), clamp);
        let mut signals = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            let s = instantaneous_score(z_ema[j], z_conf[j], z_ent[j], &cfg.weights);
            let b = &mut branches[i];
            b.signal.push_score(t, s);
            let trajectory = trajectory_score(b.signal.score_history(), c);
            scores.insert(i, trajectory);
            signals.push(BranchSignals {
                branch: i,
                raw: raws[j],
                z_ema: z_ema[j],
                z_conf: z_conf[j],
                z_ent: z_ent[j],
                score: s,
                trajectory,
            });
        }

        let resident_tokens = resident(branches, alive.iter());
        let (kept, dropped) = prune_to_target(&alive, &scores, schedule.survivor_target(t)?)?;
        for &d in &dropped {
            branches[d].alive = false;
            branches[d].pruned_at = Some(t + 1);
        }
        dec.trace.push(StepRecord {
            timestep: t + 1,
            phase: Phase::Gating,
            score_timestep: Some(t),
            alive: alive.indices().to_vec(),
            signals,
            sampled: active.iter().zip(&stepped).map(|(&i, s)| (i, s.token)).collect(),
            pruned: dropped.iter().map(|&d| PruneEvent { branch: d, score: scores[&d] }).collect(),
            resident_tokens,
        });
        alive = kept;
    }
    scores.retain(|i, _| alive.contains(*i));
    Ok((alive, scores))
}
