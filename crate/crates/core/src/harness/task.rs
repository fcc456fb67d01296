//! Task files and backend instantiation.
//!
//! A task file is a JSON array of `{prompt, answer, backend_params}` objects.
//! `backend_params.kind` picks the backend:
//!
//! ```json
//! [{"prompt": "7+5", "answer": "12", "backend_params": {"kind": "synthetic", "seed": 3}},
//!  {"prompt": "ab", "answer": "b", "backend_params": {"kind": "ngram", "corpus": ["ab{b}"], "order": 3}},
//!  {"prompt": "2+2=", "answer": "17 19", "backend_params": {"kind": "remote", "url": "http://127.0.0.1:8000",
//!   "answer_open": 90, "answer_close": 92}}]
//! ```
//!
//! Remote answers are whitespace-separated server token ids, since the engine
//! never tokenizes text for a remote model.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::answer::extract_answer;
use super::HarnessError;
use crate::backends::remote::SessionRequest;
use crate::backends::synthetic::{self, tokens_to_text};
use crate::backends::{
    ngram_train, BackendError, CharVocab, NGramModel, PlantedTask, PromptedNGram, RemoteClient, RemoteSession,
    SyntheticParams, TokenModel,
};
use crate::distributions::{LogitVec, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub prompt: String,
    pub answer: String,
    pub backend_params: BackendParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramParams {
    /// Training texts; the character vocabulary comes from these.
    pub corpus: Vec<String>,
    pub order: usize,
    pub smoothing: f64,
    pub answer_open: char,
    pub answer_close: char,
}

impl Default for NGramParams {
    fn default() -> Self {
        Self { corpus: Vec::new(), order: 3, smoothing: 0.1, answer_open: '{', answer_close: '}' }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteParams {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Sent instead of the prompt text when present.
    #[serde(default)]
    pub prompt_tokens: Option<Vec<TokenId>>,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendParams {
    Synthetic(SyntheticParams),
    Ngram(NGramParams),
    Remote(RemoteParams),
}

impl BackendParams {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendParams::Synthetic(_) => "synthetic",
            BackendParams::Ngram(_) => "ngram",
            BackendParams::Remote(_) => "remote",
        }
    }
}

pub fn parse_tasks(json: &str) -> Result<Vec<Task>, HarnessError> {
    let tasks: Vec<Task> = serde_json::from_str(json).map_err(|e| HarnessError::Config(format!("task file: {e}")))?;
    if tasks.is_empty() {
        return Err(HarnessError::Config("task file contains no tasks".into()));
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
    parse_tasks(&text)
}

/// Backend kind shared by every task; mixed suites are rejected.
pub fn suite_backend_kind(tasks: &[Task]) -> Result<&'static str, HarnessError> {
    let first = tasks.first().ok_or_else(|| HarnessError::Config("empty task suite".into()))?.backend_params.kind();
    match tasks.iter().find(|t| t.backend_params.kind() != first) {
        Some(other) => Err(HarnessError::MixedBackends(first, other.backend_params.kind())),
        None => Ok(first),
    }
}

/// Synthetic prompts only key the task's hash, so any text maps onto content
/// tokens byte by byte.
fn synthetic_prompt(text: &str, params: &SyntheticParams) -> Vec<TokenId> {
    text.bytes().map(|b| synthetic::CONTENT_BASE + (b as usize % params.content_vocab.max(1)) as TokenId).collect()
}

/// A task bound to its backend.
#[derive(Debug)]
pub enum TaskModel {
    Synthetic(PlantedTask),
    NGram { model: PromptedNGram, vocab: Arc<CharVocab>, open: TokenId, close: TokenId },
    Remote { session: RemoteSession, open: TokenId, close: TokenId },
}

impl TaskModel {
    fn inner(&self) -> &dyn TokenModel {
        match self {
            TaskModel::Synthetic(t) => t,
            TaskModel::NGram { model, .. } => model,
            TaskModel::Remote { session, .. } => session,
        }
    }

    /// Text of the last marked answer span, if any.
    pub fn answer_text(&self, tokens: &[TokenId]) -> Option<String> {
        match self {
            TaskModel::Synthetic(_) => {
                extract_answer(tokens, synthetic::ANSWER_OPEN, synthetic::ANSWER_CLOSE).map(tokens_to_text)
            }
            TaskModel::NGram { vocab, open, close, .. } => {
                extract_answer(tokens, *open, *close).map(|s| vocab.decode(s))
            }
            TaskModel::Remote { open, close, .. } => extract_answer(tokens, *open, *close)
                .map(|s| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")),
        }
    }

    pub fn is_hit(&self, tokens: &[TokenId], answer: &str) -> bool {
        let normalize = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        self.answer_text(tokens).is_some_and(|a| normalize(&a) == normalize(answer))
    }
}

impl TokenModel for TaskModel {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn eos_token_id(&self) -> TokenId {
        self.inner().eos_token_id()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<LogitVec, BackendError> {
        self.inner().next_dist(prefix)
    }
    fn unconditional_dist(&self) -> Result<LogitVec, BackendError> {
        self.inner().unconditional_dist()
    }
    fn residual_token(&self) -> Option<TokenId> {
        self.inner().residual_token()
    }
}

type TrainedNGram = (Arc<NGramModel>, Arc<CharVocab>);

/// Builds backends for a suite, training each distinct n-gram configuration
/// once.
#[derive(Default)]
pub struct Instantiator {
    ngrams: HashMap<String, TrainedNGram>,
}

impl Instantiator {
    pub fn new() -> Self {
        Self::default()
    }

    fn ngram(&mut self, params: &NGramParams) -> Result<TrainedNGram, HarnessError> {
        let key = serde_json::to_string(params).expect("params serialize");
        if let Some(hit) = self.ngrams.get(&key) {
            return Ok(hit.clone());
        }
        let markers = format!("{}{}", params.answer_open, params.answer_close);
        let vocab = CharVocab::from_texts(params.corpus.iter().map(String::as_str).chain([markers.as_str()]));
        let corpus = params
            .corpus
            .iter()
            .map(|t| vocab.encode(t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Task(e.to_string()))?;
        let model = ngram_train(&corpus, params.order, vocab.len(), CharVocab::BOS, CharVocab::EOS, params.smoothing)
            .map_err(|e| HarnessError::Task(e.to_string()))?;
        let trained = (Arc::new(model), Arc::new(vocab));
        self.ngrams.insert(key, trained.clone());
        Ok(trained)
    }

    pub fn instantiate(&mut self, task: &Task) -> Result<TaskModel, HarnessError> {
        match &task.backend_params {
            BackendParams::Synthetic(params) => {
                let prompt = synthetic_prompt(&task.prompt, params);
                PlantedTask::new(params.clone(), prompt, &task.answer)
                    .map(TaskModel::Synthetic)
                    .map_err(HarnessError::Task)
            }
            BackendParams::Ngram(params) => {
                let (model, vocab) = self.ngram(params)?;
                let prompt = vocab.encode(&task.prompt).map_err(|e| HarnessError::Task(e.to_string()))?;
                let marker = |c: char| vocab.token(c).expect("markers are in the vocabulary");
                let (open, close) = (marker(params.answer_open), marker(params.answer_close));
                Ok(TaskModel::NGram { model: model.with_prompt(prompt), vocab, open, close })
            }
            BackendParams::Remote(params) => {
                let client = RemoteClient::new(&params.url, Duration::from_millis(params.timeout_ms));
                let request = match &params.prompt_tokens {
                    Some(tokens) => SessionRequest { prompt_text: None, prompt_tokens: Some(tokens.clone()) },
                    None => SessionRequest { prompt_text: Some(task.prompt.clone()), prompt_tokens: None },
                };
                let session = client.open_session(&request).map_err(HarnessError::Backend)?;
                Ok(TaskModel::Remote { session, open: params.answer_open, close: params.answer_close })
            }
        }
    }
}
