#![allow(dead_code)]

pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};

use kappa_core::backends::{BackendError, PlantedTask, SyntheticParams, TokenModel};
use kappa_core::distributions::{LogitVec, TokenId};
use kappa_core::engine::{run, RunConfig, Strategy};
use kappa_core::SamplerConfig;

pub const EOS: TokenId = 0;

/// Emits `script` exactly, then end-of-sequence.
pub struct Scripted {
    pub script: Vec<TokenId>,
    pub vocab: usize,
}

impl TokenModel for Scripted {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos_token_id(&self) -> TokenId {
        EOS
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        let next = self.script.get(prefix.len()).copied().unwrap_or(EOS);
        let mut logits = vec![-50.0; self.vocab];
        logits[next as usize] = 0.0;
        Ok(LogitVec::new(logits)?)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        Ok(LogitVec::new(vec![0.0; self.vocab])?)
    }
}

/// Uniform over `vocab` tokens at every step; end-of-sequence is one of them.
pub struct Uniform {
    pub vocab: usize,
}

impl TokenModel for Uniform {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos_token_id(&self) -> TokenId {
        EOS
    }
    fn next_dist(&self, _prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        Ok(LogitVec::new(vec![0.0; self.vocab])?)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        self.next_dist(&[])
    }
}

/// Wraps a model and fails every call after the first `budget`.
pub struct Flaky<M> {
    pub inner: M,
    pub budget: usize,
    pub calls: AtomicUsize,
}

impl<M: TokenModel> Flaky<M> {
    pub fn new(inner: M, budget: usize) -> Self {
        Self { inner, budget, calls: AtomicUsize::new(0) }
    }
}

impl<M: TokenModel> TokenModel for Flaky<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn eos_token_id(&self) -> TokenId {
        self.inner.eos_token_id()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(BackendError::Transport("connection reset".into()));
        }
        self.inner.next_dist(prefix)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        self.inner.unconditional_dist()
    }
}

pub fn short_params(seed: u64) -> SyntheticParams {
    SyntheticParams { seed, min_len: 120, max_len: 160, ..Default::default() }
}

pub fn planted(seed: u64) -> PlantedTask {
    PlantedTask::new(short_params(seed), vec![20, 30, 40], "42").unwrap()
}

/// Index of the branch with the highest planted quality, read off the
/// unpruned lockstep run at the same seed.
pub fn planted_best(task: &PlantedTask, n: usize, seed: u64) -> usize {
    let probe = RunConfig {
        strategy: Strategy::Bon,
        n_branches: n,
        seed,
        sampler: SamplerConfig { max_new_tokens: 64, ..Default::default() },
        ..Default::default()
    };
    let r = run(task, &probe).unwrap();
    let quality: Vec<f64> = r.branches.iter().map(|b| task.latent_quality(&b.tokens).expect("latent fixed")).collect();
    (0..n).fold(0, |best, i| if quality[i] > quality[best] { i } else { best })
}
