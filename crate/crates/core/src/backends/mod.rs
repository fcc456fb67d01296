//! Token models the engine can decode from.
//!
//! A [`TokenModel`] is already conditioned on its prompt: `next_dist` takes
//! only the tokens generated so far. That keeps the remote backend honest (the
//! server owns tokenization of the prompt) and lets every backend treat the
//! generated prefix as the whole of its input.

pub mod ngram;
pub mod remote;
pub mod synthetic;

use thiserror::Error;

use crate::distributions::{DistError, LogitVec, TokenId};

pub use ngram::{ngram_train, CharVocab, NGramError, NGramModel, PromptedNGram};
pub use remote::{RemoteClient, RemoteSession, WirePayload};
pub use synthetic::{PlantedTask, SyntheticParams};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend produced invalid logits: {0}")]
    InvalidLogits(#[from] DistError),
    #[error("backend returned {got} logits, declared vocabulary is {expected}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub trait TokenModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn eos_token_id(&self) -> TokenId;

    /// Next-token logits after `prefix` (generated tokens only). Must be a pure
    /// function of `prefix`.
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError>;

    /// Next-token logits from the beginning-of-sequence context alone.
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError>;

    /// A pseudo-token that carries aggregate probability mass but must never be
    /// emitted.
    fn residual_token(&self) -> Option<TokenId> {
        None
    }
}

impl<T: TokenModel + ?Sized> TokenModel for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos_token_id(&self) -> TokenId {
        (**self).eos_token_id()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        (**self).next_dist(prefix)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        (**self).unconditional_dist()
    }
    fn residual_token(&self) -> Option<TokenId> {
        (**self).residual_token()
    }
}

impl<T: TokenModel + ?Sized> TokenModel for Box<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos_token_id(&self) -> TokenId {
        (**self).eos_token_id()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        (**self).next_dist(prefix)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        (**self).unconditional_dist()
    }
    fn residual_token(&self) -> Option<TokenId> {
        (**self).residual_token()
    }
}

/// Checks a backend's logits against its declared vocabulary.
pub(crate) fn checked_logits(model: &dyn TokenModel, logits: LogitVec) -> Result<LogitVec, BackendError> {
    if logits.len() != model.vocab_size() {
        return Err(BackendError::VocabMismatch { expected: model.vocab_size(), got: logits.len() });
    }
    Ok(logits)
}
