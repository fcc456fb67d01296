//! Client for a logit server speaking JSON over HTTP.
//!
//! ```text
//! POST   /v1/session                       {prompt_text | prompt_tokens} -> {session_id, vocab_size, eos_token_id}
//! POST   /v1/next                          {session_id, prefix_tokens}   -> {top: [[id, logprob], ...], residual_logprob}
//! GET    /v1/unconditional?session_id=ID                                 -> same payload, BOS-only context
//! DELETE /v1/session/ID
//! ```
//!
//! A payload only carries the top-K tokens. The rest of the mass goes to one
//! extra pseudo-token at id `vocab_size`, so the model seen by the engine has
//! `vocab_size + 1` entries and the pseudo-token is never sampled.

use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, TokenModel};
use crate::distributions::{LogitVec, TokenId};

/// Accepted deviation of payload mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-4;
/// Logit for tokens absent from a payload; underflows to exactly zero mass.
const ABSENT_LOGIT: f64 = -1.0e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub vocab_size: usize,
    pub eos_token_id: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextRequest {
    pub session_id: String,
    pub prefix_tokens: Vec<TokenId>,
}

/// Truncated next-token distribution as sent over the wire. Log-probabilities
/// are natural-log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePayload {
    pub top: Vec<(TokenId, f64)>,
    /// `None` (JSON null) means no leftover mass.
    pub residual_logprob: Option<f64>,
}

impl WirePayload {
    /// Builds a payload from a full distribution, keeping the `k` most likely
    /// tokens (ties to the lower id).
    pub fn from_probs(probs: &[f64], k: usize) -> Self {
        let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        let kept: f64 = order.iter().map(|&i| probs[i]).sum();
        let residual = 1.0 - kept;
        Self {
            top: order.iter().map(|&i| (i as TokenId, probs[i].ln())).collect(),
            residual_logprob: (residual > 0.0).then(|| residual.ln()),
        }
    }

    /// Checks the payload against a server vocabulary of `vocab_size` tokens
    /// and expands it to `vocab_size + 1` probabilities, residual last.
    pub fn to_probs(&self, vocab_size: usize) -> Result<Vec<f64>, BackendError> {
        let mut probs = vec![0.0; vocab_size + 1];
        for &(token, logprob) in &self.top {
            let slot = probs
                .get_mut(token as usize)
                .filter(|_| (token as usize) < vocab_size)
                .ok_or_else(|| BackendError::Malformed(format!("token {token} outside vocabulary {vocab_size}")))?;
            if *slot != 0.0 {
                return Err(BackendError::Malformed(format!("token {token} listed twice")));
            }
            if !logprob.is_finite() || logprob > MASS_TOLERANCE {
                return Err(BackendError::Malformed(format!("bad logprob {logprob} for token {token}")));
            }
            *slot = logprob.exp();
        }
        if let Some(lp) = self.residual_logprob {
            if lp.is_nan() || lp > MASS_TOLERANCE {
                return Err(BackendError::Malformed(format!("bad residual logprob {lp}")));
            }
            probs[vocab_size] = lp.exp();
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(BackendError::Malformed(format!("payload mass {mass} is not 1")));
        }
        Ok(probs)
    }

    /// Logits over `vocab_size + 1` entries reproducing [`Self::to_probs`].
    pub fn to_logits(&self, vocab_size: usize) -> Result<LogitVec, BackendError> {
        let probs = self.to_probs(vocab_size)?;
        let logits = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { ABSENT_LOGIT }).collect();
        Ok(LogitVec::new(logits)?)
    }
}

fn map_err(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) => BackendError::Protocol(format!("server answered HTTP {code}")),
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    agent: ureq::Agent,
    base_url: String,
}

impl RemoteClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { agent, base_url: base_url.into().trim_end_matches('/').to_string() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    pub fn open_session(&self, request: &SessionRequest) -> Result<RemoteSession, BackendError> {
        if request.prompt_text.is_some() == request.prompt_tokens.is_some() {
            return Err(BackendError::Protocol("exactly one of prompt_text and prompt_tokens is required".into()));
        }
        let info: SessionInfo = self
            .agent
            .post(&self.url("/v1/session"))
            .send_json(request)
            .map_err(map_err)?
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        if info.vocab_size == 0 || info.eos_token_id as usize >= info.vocab_size {
            return Err(BackendError::Malformed(format!("bad session info {info:?}")));
        }
        Ok(RemoteSession { client: self.clone(), info, lock: Mutex::new(()), unconditional: OnceLock::new() })
    }
}

/// One open server session. Requests within a session are serialized.
#[derive(Debug)]
pub struct RemoteSession {
    client: RemoteClient,
    info: SessionInfo,
    lock: Mutex<()>,
    unconditional: OnceLock<LogitVec>,
}

impl RemoteSession {
    pub fn info(&self) -> &SessionInfo {
        &self.info
    }

    pub fn fetch_next(&self, prefix: &[TokenId]) -> Result<WirePayload, BackendError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let body = NextRequest { session_id: self.info.session_id.clone(), prefix_tokens: prefix.to_vec() };
        self.client
            .agent
            .post(&self.client.url("/v1/next"))
            .send_json(&body)
            .map_err(map_err)?
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))
    }

    pub fn fetch_unconditional(&self) -> Result<WirePayload, BackendError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.client
            .agent
            .get(&self.client.url("/v1/unconditional"))
            .query("session_id", &self.info.session_id)
            .call()
            .map_err(map_err)?
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

impl TokenModel for RemoteSession {
    fn vocab_size(&self) -> usize {
        self.info.vocab_size + 1
    }

    fn eos_token_id(&self) -> TokenId {
        self.info.eos_token_id
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        self.fetch_next(prefix)?.to_logits(self.info.vocab_size)
    }

    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        if let Some(q) = self.unconditional.get() {
            return Ok(q.clone());
        }
        let q = self.fetch_unconditional()?.to_logits(self.info.vocab_size)?;
        Ok(self.unconditional.get_or_init(|| q).clone())
    }

    fn residual_token(&self) -> Option<TokenId> {
        Some(self.info.vocab_size as TokenId)
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        let url = self.client.url(&format!("/v1/session/{}", self.info.session_id));
        let _ = self.client.agent.delete(&url).call();
    }
}
