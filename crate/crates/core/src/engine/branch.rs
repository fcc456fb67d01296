use crate::backends::{checked_logits, BackendError, TokenModel};
use crate::distributions::{
    filter_top_k_top_p, sample_token, softmax, softmax_with_temperature, LogitVec, RngStream, SamplerConfig, TokenDist,
    TokenId,
};
use crate::signals::{RawSignals, SignalConfig, SignalState};

use super::{EngineError, RunConfig};

/// One candidate continuation.
#[derive(Debug, Clone)]
pub struct Branch {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    /// Sum of log-probabilities of the sampled tokens under the filtered
    /// sampling distribution.
    pub logprob_sum: f64,
    pub logprobs: Vec<f64>,
    pub signal: SignalState,
    pub rng: RngStream,
    pub alive: bool,
    /// Emitted end-of-sequence or reached the token limit.
    pub finished: bool,
    pub pruned_at: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stepped {
    pub token: TokenId,
    pub raw: Option<RawSignals>,
}

impl Branch {
    pub fn new(index: usize, cfg: &RunConfig) -> Self {
        Self {
            index,
            tokens: Vec::new(),
            logprob_sum: 0.0,
            logprobs: Vec::new(),
            signal: SignalState::new(cfg.signal.window_w.max(1)),
            rng: RngStream::for_branch(cfg.seed, index),
            alive: true,
            finished: false,
            pruned_at: None,
        }
    }

    pub fn mean_logprob(&self) -> f64 {
        self.logprob_sum / self.tokens.len() as f64
    }

    fn logits(&self, model: &dyn TokenModel) -> Result<LogitVec, BackendError> {
        checked_logits(model, model.next_dist(&self.tokens)?)
    }

    fn push(&mut self, token: TokenId, logprob: f64, eos: TokenId, max_len: usize) {
        self.tokens.push(token);
        self.logprobs.push(logprob);
        self.logprob_sum += logprob;
        self.finished = token == eos || self.tokens.len() >= max_len;
    }

    /// Samples one token. With `scoring`, also runs the signal pipeline on the
    /// unfiltered distribution against the reference `q`.
    pub(crate) fn sample_step(
        &mut self,
        model: &dyn TokenModel,
        sampler: &SamplerConfig,
        scoring: Option<(&TokenDist, &SignalConfig)>,
    ) -> Result<Stepped, EngineError> {
        debug_assert!(!self.finished);
        let logits = self.logits(model)?;
        let raw = match scoring {
            Some((q, cfg)) => Some(self.signal.observe(&softmax(&logits), q, cfg)?),
            None => None,
        };
        let dist = sampling_distribution(&logits, sampler, model.residual_token())?;
        let token = sample_token(&dist, &mut self.rng);
        self.push(token, dist.prob(token).ln(), model.eos_token_id(), sampler.max_new_tokens);
        Ok(Stepped { token, raw })
    }

    /// Appends the most likely token (lowest id on ties), scored under the
    /// model's own distribution.
    pub(crate) fn greedy_step(&mut self, model: &dyn TokenModel, max_len: usize) -> Result<TokenId, EngineError> {
        let p = softmax(&self.logits(model)?);
        let p = match model.residual_token() {
            Some(r) => p.without_token(r).ok_or_else(residual_only)?,
            None => p,
        };
        let token = p.argmax();
        self.push(token, p.prob(token).ln(), model.eos_token_id(), max_len);
        Ok(token)
    }
}

fn residual_only() -> EngineError {
    BackendError::Malformed("all probability mass is on the residual pseudo-token".into()).into()
}

/// Temperature, then the residual pseudo-token (if any) removed, then top-k
/// and top-p.
pub(crate) fn sampling_distribution(
    logits: &LogitVec,
    sampler: &SamplerConfig,
    residual: Option<TokenId>,
) -> Result<TokenDist, EngineError> {
    let shaped = softmax_with_temperature(logits, sampler.temperature)?;
    let shaped = match residual {
        Some(r) => shaped.without_token(r).ok_or_else(residual_only)?,
        None => shaped,
    };
    Ok(filter_top_k_top_p(&shaped, sampler))
}
