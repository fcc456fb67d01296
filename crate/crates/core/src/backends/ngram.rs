//! Add-k smoothed n-gram model with backoff to shorter contexts.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use super::{BackendError, TokenModel};
use crate::distributions::{LogitVec, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NGramError {
    #[error("n-gram order must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("smoothing constant must be positive, got {0}")]
    BadSmoothing(f64),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
}

#[derive(Debug, Default, Clone)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    bos: TokenId,
    eos: TokenId,
    smoothing: f64,
    // tables[l] maps a length-l context to its continuation counts
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

/// Trains an order-`n` model. Every sequence is left-padded with `n - 1`
/// beginning-of-sequence tokens and terminated with `eos`.
pub fn ngram_train(
    corpus: &[Vec<TokenId>],
    n: usize,
    vocab_size: usize,
    bos: TokenId,
    eos: TokenId,
    smoothing: f64,
) -> Result<NGramModel, NGramError> {
    if n < 1 {
        return Err(NGramError::BadOrder(n));
    }
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(NGramError::EmptyCorpus);
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(NGramError::BadSmoothing(smoothing));
    }
    for &token in corpus.iter().flatten().chain([&bos, &eos]) {
        if token as usize >= vocab_size {
            return Err(NGramError::TokenOutOfRange { token, vocab_size });
        }
    }
    let mut tables = vec![HashMap::<Vec<TokenId>, ContextCounts>::new(); n];
    for seq in corpus {
        let padded: Vec<TokenId> =
            std::iter::repeat_n(bos, n - 1).chain(seq.iter().copied()).chain(std::iter::once(eos)).collect();
        for pos in (n - 1)..padded.len() {
            let next = padded[pos];
            for (len, table) in tables.iter_mut().enumerate() {
                let entry = table.entry(padded[pos - len..pos].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(next).or_default() += 1;
            }
        }
    }
    Ok(NGramModel { order: n, vocab_size, bos, eos, smoothing, tables })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// `P(. | context)` using the longest seen suffix of `context`, at most
    /// `n - 1` tokens long. An empty context gives the unigram distribution.
    pub fn conditional(&self, context: &[TokenId]) -> Vec<f64> {
        let max_len = (self.order - 1).min(context.len());
        let counts = (0..=max_len)
            .rev()
            .find_map(|len| self.tables[len].get(&context[context.len() - len..]))
            .expect("the empty context is always present");
        let denom = counts.total as f64 + self.smoothing * self.vocab_size as f64;
        let mut probs = vec![self.smoothing / denom; self.vocab_size];
        for (&token, &c) in &counts.next {
            probs[token as usize] = (c as f64 + self.smoothing) / denom;
        }
        probs
    }

    /// Context seen by the model after `prompt` and `generated`, padded with
    /// beginning-of-sequence tokens.
    fn context(&self, prompt: &[TokenId], generated: &[TokenId]) -> Vec<TokenId> {
        let keep = self.order - 1;
        let mut ctx: Vec<TokenId> = std::iter::repeat_n(self.bos, keep)
            .chain(prompt.iter().copied())
            .chain(generated.iter().copied())
            .collect();
        ctx.drain(..ctx.len() - keep);
        ctx
    }

    pub fn with_prompt(self: &Arc<Self>, prompt: Vec<TokenId>) -> PromptedNGram {
        PromptedNGram { model: Arc::clone(self), prompt }
    }
}

/// An n-gram model bound to a prompt.
#[derive(Debug, Clone)]
pub struct PromptedNGram {
    model: Arc<NGramModel>,
    prompt: Vec<TokenId>,
}

impl PromptedNGram {
    pub fn model(&self) -> &NGramModel {
        &self.model
    }

    pub fn probs_after(&self, generated: &[TokenId]) -> Vec<f64> {
        self.model.conditional(&self.model.context(&self.prompt, generated))
    }
}

fn to_logits(probs: Vec<f64>) -> Result<LogitVec, BackendError> {
    Ok(LogitVec::new(probs.into_iter().map(f64::ln).collect())?)
}

impl TokenModel for PromptedNGram {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn eos_token_id(&self) -> TokenId {
        self.model.eos
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        to_logits(self.probs_after(prefix))
    }

    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        to_logits(self.model.conditional(&self.model.context(&[], &[])))
    }
}

/// Character vocabulary: id 0 is beginning-of-sequence, id 1 end-of-sequence,
/// then every distinct character of the training text in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, TokenId>,
}

impl CharVocab {
    pub const BOS: TokenId = 0;
    pub const EOS: TokenId = 1;

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as TokenId + 2)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, NGramError> {
        text.chars().map(|c| self.token(c).ok_or(NGramError::UnknownChar(c))).collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens.iter().filter_map(|&t| t.checked_sub(2).and_then(|i| self.chars.get(i as usize))).collect()
    }
}
