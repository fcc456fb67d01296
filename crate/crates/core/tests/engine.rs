mod common;

use common::{planted, planted_best, short_params, Flaky, Scripted, Uniform, EOS};
use kappa_core::backends::{PlantedTask, SyntheticParams};
use kappa_core::distributions::{sample_token, sampling_dist, RngStream, SamplerConfig};
use kappa_core::engine::{
    negative_perplexity, run, run_bon, run_greedy, run_kappa, Branch, EngineError, RunConfig, RunResult, Strategy,
};
use kappa_core::harness::Phase;
use kappa_core::SignalWeights;
use kappa_core::TokenModel;

fn cfg(strategy: Strategy, n: usize, seed: u64) -> RunConfig {
    RunConfig { strategy, n_branches: n, horizon_tau: 20, seed, ..Default::default() }
}

fn gating_alive_sizes(r: &RunResult) -> Vec<usize> {
    r.trace.steps.iter().filter(|s| s.phase == Phase::Gating).map(|s| s.alive.len()).collect()
}

#[test]
fn kappa_token_accounting_identity() {
    for seed in 0..10 {
        let task = planted(seed);
        let c = cfg(Strategy::Kappa, 6, seed);
        let r = run_kappa(&task, &c).unwrap();
        let cut = r.cutoff_c.unwrap();
        let sizes = gating_alive_sizes(&r);
        assert_eq!(sizes.len(), c.horizon_tau);
        let expected =
            c.n_branches * cut + sizes.iter().sum::<usize>() + (r.final_tokens.len() - (cut + c.horizon_tau));
        assert_eq!(r.metrics.total_tokens, expected);
        assert_eq!(r.metrics.total_tokens, r.trace.sampled_tokens());
        assert_eq!(r.metrics.total_tokens, r.branches.iter().map(|b| b.tokens.len()).sum::<usize>());
    }
}

#[test]
fn alive_set_follows_schedule() {
    let task = planted(3);
    let c = cfg(Strategy::Kappa, 7, 3);
    let r = run_kappa(&task, &c).unwrap();
    let cut = r.cutoff_c.unwrap();
    let gating: Vec<_> = r.trace.steps.iter().filter(|s| s.phase == Phase::Gating).collect();
    // survivors after step k are the next step's alive set
    for (k, pair) in gating.windows(2).enumerate() {
        let t = cut + k;
        let target = (c.n_branches - ((t - cut + 1) * c.n_branches) / c.horizon_tau).max(1);
        assert_eq!(pair[1].alive.len(), target);
        let removed: Vec<usize> = pair[0].pruned.iter().map(|p| p.branch).collect();
        assert!(removed.iter().all(|b| !pair[1].alive.contains(b)));
        assert_eq!(pair[0].alive.len() - removed.len(), pair[1].alive.len());
    }
    let last = gating.last().unwrap();
    assert_eq!(last.alive.len() - last.pruned.len(), 1);
    assert!(r.trace.steps.iter().filter(|s| s.phase == Phase::Continuation).all(|s| s.alive == vec![r.final_branch]));
}

#[test]
fn single_branch_matches_plain_sampling() {
    let task = planted(11);
    let r = run_kappa(&task, &cfg(Strategy::Kappa, 1, 11)).unwrap();
    let sampler = SamplerConfig::default();
    let mut rng = RngStream::for_branch(11, 0);
    let mut tokens = Vec::new();
    loop {
        let dist = sampling_dist(&task.next_dist(&tokens).unwrap(), &sampler).unwrap();
        let t = sample_token(&dist, &mut rng);
        tokens.push(t);
        if t == task.eos_token_id() || tokens.len() == sampler.max_new_tokens {
            break;
        }
    }
    assert_eq!(r.final_tokens, tokens);
    assert_eq!(r.cutoff_c, Some(1));
    assert!(r.trace.steps.iter().all(|s| s.pruned.is_empty()));
}

#[test]
fn survivor_matches_unpruned_replay() {
    for seed in 0..8 {
        let task = planted(seed);
        let k = run(&task, &cfg(Strategy::Kappa, 5, seed)).unwrap();
        let b = run(&task, &cfg(Strategy::Bon, 5, seed)).unwrap();
        assert_eq!(k.final_tokens, b.branches[k.final_branch].tokens);
        // pruned branches are prefixes of their unpruned selves
        for pruned in k.branches.iter().filter(|x| x.pruned_at.is_some()) {
            let full = &b.branches[pruned.index].tokens;
            assert_eq!(&full[..pruned.tokens.len()], &pruned.tokens[..]);
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let task = planted(5);
    for strategy in Strategy::ALL {
        let base = cfg(strategy, 6, 5);
        let one = run(&task, &base).unwrap().without_timing();
        let mut four = run(&task, &RunConfig { workers: 4, ..base.clone() }).unwrap().without_timing();
        // the header records the worker count itself
        four.trace.header.config.workers = 1;
        assert_eq!(one, four, "{strategy}");
        let again = run(&task, &base).unwrap().without_timing();
        assert_eq!(one, again, "{strategy}");
    }
}

#[test]
fn greedy_reproduces_script() {
    let model = Scripted { script: vec![3, 1, 4, 1, 5], vocab: 6 };
    for seed in [0, 99] {
        let c = RunConfig { sampler: SamplerConfig::unfiltered(6), ..cfg(Strategy::Greedy, 1, seed) };
        let r = run_greedy(&model, &c).unwrap();
        assert_eq!(r.final_tokens, vec![3, 1, 4, 1, 5, EOS]);
        assert_eq!(r.metrics.peak_mem_proxy, r.final_tokens.len());
        assert_eq!(r.metrics.total_tokens, r.final_tokens.len());
    }
}

#[test]
fn greedy_respects_token_limit() {
    let model = Scripted { script: vec![2; 500], vocab: 4 };
    let c = RunConfig {
        strategy: Strategy::Greedy,
        sampler: SamplerConfig { max_new_tokens: 37, top_k: 4, ..Default::default() },
        c_max: 16,
        ..Default::default()
    };
    assert_eq!(run(&model, &c).unwrap().final_tokens.len(), 37);
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let model = Uniform { vocab: 5 };
    let c = RunConfig {
        strategy: Strategy::Greedy,
        sampler: SamplerConfig { top_k: 5, ..Default::default() },
        ..Default::default()
    };
    // token 0 is end-of-sequence and every token ties
    assert_eq!(run(&model, &c).unwrap().final_tokens, vec![EOS]);
}

#[test]
fn negative_perplexity_examples() {
    let c = RunConfig::default();
    let mut b = Branch::new(0, &c);
    b.tokens = vec![7];
    b.logprob_sum = 0.0;
    assert_eq!(negative_perplexity(&b), -1.0);

    let mut a = Branch::new(0, &c);
    a.tokens = vec![5; 10];
    a.logprob_sum = -10.0;
    let mut bb = Branch::new(1, &c);
    bb.tokens = vec![5; 20];
    bb.logprob_sum = -30.0;
    assert!(negative_perplexity(&a) > negative_perplexity(&bb));
}

#[test]
fn uniform_backend_has_perplexity_vocab_size() {
    let model = Uniform { vocab: 4 };
    let c = RunConfig {
        strategy: Strategy::Bon,
        n_branches: 6,
        sampler: SamplerConfig::unfiltered(4),
        c_max: 8,
        ..Default::default()
    };
    let r = run_bon(&model, &c).unwrap();
    for b in &r.branches {
        let np = -(-b.logprob_sum / b.tokens.len() as f64).exp();
        assert!((np + 4.0).abs() < 1e-9);
    }
}

#[test]
fn bon_winner_matches_recomputed_scores() {
    for seed in 0..5 {
        let task = planted(seed);
        let r = run(&task, &cfg(Strategy::Bon, 7, seed)).unwrap();
        let best = r
            .branches
            .iter()
            .map(|b| b.logprob_sum / b.tokens.len() as f64)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, m)| if m > acc.1 { (i, m) } else { acc });
        assert_eq!(r.final_branch, best.0);
        assert_eq!(r.metrics.total_tokens, r.branches.iter().map(|b| b.tokens.len()).sum::<usize>());
        assert_eq!(r.metrics.peak_mem_proxy, r.metrics.total_tokens);
    }
}

#[test]
fn stbon_accounting_and_bound() {
    for seed in 0..5 {
        let task = planted(seed);
        let c = cfg(Strategy::StbonProxy, 6, seed);
        let s = run(&task, &c).unwrap();
        let cut = s.cutoff_c.unwrap();
        let expected = c.n_branches * (cut + c.horizon_tau) + (s.final_tokens.len() - (cut + c.horizon_tau));
        assert_eq!(s.metrics.total_tokens, expected);
        let b = run(&task, &cfg(Strategy::Bon, 6, seed)).unwrap();
        assert!(s.metrics.total_tokens <= b.metrics.total_tokens);
    }
}

#[test]
fn kappa_uses_fewer_tokens_than_bon() {
    for seed in 0..5 {
        let task = planted(seed);
        let k = run(&task, &cfg(Strategy::Kappa, 4, seed)).unwrap();
        let b = run(&task, &cfg(Strategy::Bon, 4, seed)).unwrap();
        assert!(k.final_tokens.len() > k.cutoff_c.unwrap() + 20);
        assert!(k.metrics.total_tokens < b.metrics.total_tokens);
    }
}

#[test]
fn branch_logprobs_follow_sampling_distribution() {
    let task = planted(2);
    let r = run(&task, &cfg(Strategy::Bon, 3, 2)).unwrap();
    let sampler = SamplerConfig::default();
    for b in &r.branches {
        let mut sum = 0.0;
        for i in 0..b.tokens.len() {
            let dist = sampling_dist(&task.next_dist(&b.tokens[..i]).unwrap(), &sampler).unwrap();
            sum += dist.prob(b.tokens[i]).ln();
        }
        assert!((sum - b.logprob_sum).abs() < 1e-9);
    }
}

#[test]
fn backend_fault_keeps_partial_trace() {
    let model = Flaky::new(planted(1), 40);
    let err = run(&model, &cfg(Strategy::Kappa, 4, 1)).unwrap_err();
    assert!(err.is_backend_fault());
    let partial = err.partial.expect("partial trace");
    assert!(!partial.steps.is_empty());
    assert!(partial.sampled_tokens() <= 40);
}

#[test]
fn invalid_config_rejected_before_generation() {
    let model = Flaky::new(planted(1), 0);
    let bad = [
        RunConfig { n_branches: 0, ..Default::default() },
        RunConfig { horizon_tau: 0, ..Default::default() },
        RunConfig { sampler: SamplerConfig { temperature: 0.0, ..Default::default() }, ..Default::default() },
        RunConfig { sampler: SamplerConfig { top_k: 10_000, ..Default::default() }, ..Default::default() },
        RunConfig { workers: 0, ..Default::default() },
    ];
    for c in bad {
        let err = run(&model, &c).unwrap_err();
        assert!(matches!(err.source, EngineError::Config(_)), "{c:?}");
        assert_eq!(model.calls.load(std::sync::atomic::Ordering::SeqCst), 0);
    }
    let mut signal_bad = RunConfig::default();
    signal_bad.signal.mom_buckets_m = 32;
    assert!(run(&model, &signal_bad).is_err());
}

#[test]
fn finished_branches_stay_candidates() {
    // every branch ends within a few tokens, inside the draft or gating window
    let model = Uniform { vocab: 3 };
    let c = RunConfig {
        strategy: Strategy::Kappa,
        n_branches: 5,
        horizon_tau: 30,
        sampler: SamplerConfig::unfiltered(3),
        seed: 4,
        ..Default::default()
    };
    let r = run(&model, &c).unwrap();
    assert_eq!(*r.final_tokens.last().unwrap(), EOS);
    assert_eq!(r.metrics.total_tokens, r.branches.iter().map(|b| b.tokens.len()).sum::<usize>());
    assert!(r.trace.is_strictly_increasing());
}

#[test]
fn trace_replay_reproduces_scores() {
    for seed in 0..4 {
        let r = run(&planted(seed), &cfg(Strategy::Kappa, 8, seed)).unwrap();
        let checked = r.trace.replay_scores(1e-9).unwrap();
        assert!(checked > 8 * 10);
    }
}

#[test]
fn kl_only_weights_find_planted_best() {
    let runs = 200;
    let mut hits = 0;
    for seed in 0..runs {
        let params = SyntheticParams { separation: 3.0, ..short_params(seed) };
        let task = PlantedTask::new(params, vec![40, 41], "3").unwrap();
        let cfg = RunConfig { n_branches: 5, weights: SignalWeights::new(1.0, 0.0, 0.0), seed, ..Default::default() };
        hits += usize::from(run(&task, &cfg).unwrap().final_branch == planted_best(&task, 5, seed));
    }
    assert!(hits as f64 >= 0.95 * runs as f64, "{hits}/{runs}");
}
