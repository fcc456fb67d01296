//! Planted-quality synthetic model.
//!
//! Every branch passes through the same script: a near-deterministic preamble,
//! a short high-entropy "approach" span where branches split (close to uniform,
//! perturbed only by the noise term), a long reasoning
//! phase, and a marked answer followed by end-of-sequence. The approach span
//! hashes to a latent quality `u` in `[0, 1)`. During reasoning the model puts
//! an extra `gain` of probability on one target token,
//!
//! ```text
//! gain(pos) = clamp(base_gain + separation * u * (pos - reasoning_start) / gain_ramp + noise * xi, 0, max_gain)
//! ```
//!
//! so a better latent shows a faster rise in KL from the unconditional
//! distribution, higher confidence and lower entropy. `xi` in `[-1, 1]` is a
//! hash of the recent context. With `separation = 0` the latent has no effect
//! on any signal. Branches whose quality reaches `correct_threshold` emit the
//! task answer; the rest emit a corrupted one.
//!
//! The unconditional distribution is uniform over content tokens, which is the
//! average of the reasoning-phase mixture over target tokens.

use serde::{Deserialize, Serialize};

use super::{BackendError, TokenModel};
use crate::distributions::{LogitVec, TokenId};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const ANSWER_OPEN: TokenId = 2;
pub const ANSWER_CLOSE: TokenId = 3;
pub const DIGIT_BASE: TokenId = 4;
pub const CONTENT_BASE: TokenId = 14;

const SPECIAL_FLOOR: f64 = 1e-9;
const PREAMBLE_MARGIN: f64 = 12.0;
const SCRIPTED_MARGIN: f64 = 16.0;
const NOISE_CONTEXT: usize = 8;

const TAG_PROMPT: u64 = 0x5052_4f4d;
const TAG_PREAMBLE: u64 = 0x5052_4541;
const TAG_LATENT: u64 = 0x4c41_5445;
const TAG_LENGTH: u64 = 0x4c45_4e47;
const TAG_WRONG: u64 = 0x5752_4f4e;
const TAG_NOISE: u64 = 0x4e4f_4953;
const TAG_TARGET: u64 = 0x5441_5247;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub seed: u64,
    /// Strength of the latent quality in the signals (0 disables it).
    pub separation: f64,
    pub noise: f64,
    pub preamble_len: usize,
    pub approach_len: usize,
    /// Inclusive range of total branch length, answer and end-of-sequence included.
    pub min_len: usize,
    pub max_len: usize,
    pub content_vocab: usize,
    pub base_gain: f64,
    pub gain_ramp: f64,
    pub max_gain: f64,
    pub correct_threshold: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            seed: 0,
            separation: 1.0,
            noise: 0.002,
            preamble_len: 16,
            approach_len: 4,
            min_len: 900,
            max_len: 1000,
            content_vocab: 40,
            base_gain: 0.1,
            gain_ramp: 100.0,
            max_gain: 0.9,
            correct_threshold: 0.5,
        }
    }
}

/// Per-branch latent, fixed once the approach span is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLatent {
    pub quality: f64,
    pub length: usize,
    pub answer: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    params: SyntheticParams,
    prompt: Vec<TokenId>,
    answer: Vec<TokenId>,
    key: u64,
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_tokens(key: u64, tag: u64, tokens: impl IntoIterator<Item = u64>) -> u64 {
    tokens.into_iter().fold(splitmix(key ^ tag), |h, t| splitmix(h ^ t))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn digits_to_tokens(text: &str) -> Option<Vec<TokenId>> {
    text.chars().map(|c| c.to_digit(10).map(|d| DIGIT_BASE + d)).collect()
}

pub fn tokens_to_text(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            DIGIT_BASE..=13 => char::from_digit(t - DIGIT_BASE, 10).unwrap().to_string(),
            EOS => "</s>".into(),
            ANSWER_OPEN => "[".into(),
            ANSWER_CLOSE => "]".into(),
            other => format!("<{other}>"),
        })
        .collect()
}

impl PlantedTask {
    pub fn new(params: SyntheticParams, prompt: Vec<TokenId>, answer: &str) -> Result<Self, String> {
        let answer = digits_to_tokens(answer)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| format!("synthetic answers must be non-empty digit strings, got {answer:?}"))?;
        let p = &params;
        if p.content_vocab < 2 {
            return Err("content_vocab must be at least 2".into());
        }
        let scripted = p.preamble_len + p.approach_len + answer.len() + 3;
        if p.min_len < scripted || p.max_len < p.min_len {
            return Err(format!("length range [{}, {}] must start at >= {scripted}", p.min_len, p.max_len));
        }
        if p.approach_len == 0 {
            return Err("approach_len must be positive".into());
        }
        if !(0.0..1.0).contains(&p.base_gain) || !(p.base_gain..1.0).contains(&p.max_gain) {
            return Err("gains must satisfy 0 <= base_gain <= max_gain < 1".into());
        }
        if p.gain_ramp.is_nan() || p.gain_ramp <= 0.0 || !p.separation.is_finite() || p.noise.is_nan() || p.noise < 0.0
        {
            return Err("gain_ramp must be positive, separation finite, noise non-negative".into());
        }
        let key = hash_tokens(params.seed, TAG_PROMPT, prompt.iter().map(|&t| t as u64));
        Ok(Self { params, prompt, answer, key })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn correct_answer(&self) -> &[TokenId] {
        &self.answer
    }

    fn reasoning_start(&self) -> usize {
        self.params.preamble_len + self.params.approach_len
    }

    fn content(&self, h: u64) -> TokenId {
        CONTENT_BASE + (h % self.params.content_vocab as u64) as TokenId
    }

    /// Latent of the branch that produced `prefix`, once its approach span is
    /// complete.
    pub fn latent(&self, prefix: &[TokenId]) -> Option<BranchLatent> {
        let start = self.params.preamble_len;
        let span = prefix.get(start..self.reasoning_start())?;
        let span = || span.iter().map(|&t| t as u64);
        let quality = unit(hash_tokens(self.key, TAG_LATENT, span()));
        let p = &self.params;
        let range = (p.max_len - p.min_len + 1) as u64;
        let length = p.min_len + (hash_tokens(self.key, TAG_LENGTH, span()) % range) as usize;
        let answer = if quality >= p.correct_threshold {
            self.answer.clone()
        } else {
            let mut wrong = self.answer.clone();
            let last = wrong.last_mut().unwrap();
            let shift = 1 + (hash_tokens(self.key, TAG_WRONG, span()) % 9) as TokenId;
            *last = DIGIT_BASE + (*last - DIGIT_BASE + shift) % 10;
            wrong
        };
        Some(BranchLatent { quality, length, answer })
    }

    /// Latent quality of the branch that produced `prefix`.
    pub fn latent_quality(&self, prefix: &[TokenId]) -> Option<f64> {
        self.latent(prefix).map(|l| l.quality)
    }

    /// Context hash in `[-1, 1]` driving the per-step noise.
    fn xi(&self, prefix: &[TokenId]) -> f64 {
        let pos = prefix.len();
        let ctx = &prefix[pos.saturating_sub(NOISE_CONTEXT)..];
        2.0 * unit(hash_tokens(self.key, TAG_NOISE, std::iter::once(pos as u64).chain(ctx.iter().map(|&t| t as u64))))
            - 1.0
    }

    fn target(&self, prefix: &[TokenId]) -> TokenId {
        let pos = prefix.len();
        let ctx = &prefix[pos.saturating_sub(2)..];
        self.content(hash_tokens(
            self.key,
            TAG_TARGET,
            std::iter::once(pos as u64).chain(ctx.iter().map(|&t| t as u64)),
        ))
    }

    /// Extra probability on the target token at position `pos`.
    pub fn gain(&self, prefix: &[TokenId], quality: f64) -> f64 {
        let p = &self.params;
        let progress = (prefix.len() - self.reasoning_start()) as f64 / p.gain_ramp;
        (p.base_gain + p.separation * quality * progress + p.noise * self.xi(prefix)).clamp(0.0, p.max_gain)
    }

    /// Reasoning-phase mixture over the vocabulary: content tokens share
    /// `1 - gain` uniformly and `target` takes `gain` on top.
    pub fn reasoning_probs(&self, gain: f64, target: TokenId) -> Vec<f64> {
        let c = self.params.content_vocab;
        let mut probs = vec![0.0; self.vocab_size()];
        for p in &mut probs[CONTENT_BASE as usize..] {
            *p = (1.0 - gain) / c as f64;
        }
        probs[target as usize] += gain;
        probs
    }

    fn probs_to_logits(&self, probs: &[f64]) -> LogitVec {
        LogitVec::new(probs.iter().map(|&p| p.max(SPECIAL_FLOOR).ln()).collect()).expect("finite by construction")
    }

    fn scripted_logits(&self, token: TokenId, margin: f64) -> LogitVec {
        let mut logits = vec![0.0; self.vocab_size()];
        for l in &mut logits[..CONTENT_BASE as usize] {
            *l = SPECIAL_FLOOR.ln();
        }
        logits[token as usize] = margin;
        LogitVec::new(logits).expect("finite by construction")
    }

    /// Next-token logits for a branch with the given latent.
    pub fn synth_next_dist(&self, prefix: &[TokenId], latent: Option<&BranchLatent>) -> LogitVec {
        let pos = prefix.len();
        let p = &self.params;
        if pos < p.preamble_len {
            let token = self.content(hash_tokens(self.key, TAG_PREAMBLE, [pos as u64]));
            return self.scripted_logits(token, PREAMBLE_MARGIN);
        }
        let Some(latent) = latent else {
            // approach span: no latent yet, only the noise term
            let gain = (0.5 * p.noise * (1.0 + self.xi(prefix))).min(p.max_gain);
            return self.probs_to_logits(&self.reasoning_probs(gain, self.target(prefix)));
        };
        let script_start = latent.length - latent.answer.len() - 3;
        if pos >= script_start {
            let script: Vec<TokenId> =
                std::iter::once(ANSWER_OPEN).chain(latent.answer.iter().copied()).chain([ANSWER_CLOSE, EOS]).collect();
            let token = script.get(pos - script_start).copied().unwrap_or(EOS);
            return self.scripted_logits(token, SCRIPTED_MARGIN);
        }
        let gain = self.gain(prefix, latent.quality);
        self.probs_to_logits(&self.reasoning_probs(gain, self.target(prefix)))
    }

    fn unconditional_logits(&self) -> LogitVec {
        self.probs_to_logits(&self.reasoning_probs(0.0, CONTENT_BASE))
    }
}

impl TokenModel for PlantedTask {
    fn vocab_size(&self) -> usize {
        CONTENT_BASE as usize + self.params.content_vocab
    }

    fn eos_token_id(&self) -> TokenId {
        EOS
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        let latent = self.latent(prefix);
        Ok(self.synth_next_dist(prefix, latent.as_ref()))
    }

    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        Ok(self.unconditional_logits())
    }
}
