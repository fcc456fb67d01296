//! In-process stand-in for the logit server, backed by a character n-gram.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use kappa_core::backends::remote::{NextRequest, SessionInfo, SessionRequest};
use kappa_core::backends::{ngram_train, CharVocab, NGramModel, PromptedNGram, TokenModel, WirePayload};
use kappa_core::distributions::softmax;
use serde::Deserialize;
use serde_json::{json, Value};

pub const CORPUS: &str = "the cat sat on the mat. {7} the dog ate the hat. {7} a cat and a dog. {7}";

pub fn corpus_model() -> (Arc<NGramModel>, CharVocab) {
    let vocab = CharVocab::from_texts([CORPUS]);
    let corpus: Vec<_> = CORPUS.split(". ").map(|s| vocab.encode(s).unwrap()).collect();
    let model = ngram_train(&corpus, 3, vocab.len(), CharVocab::BOS, CharVocab::EOS, 0.1).unwrap();
    (Arc::new(model), vocab)
}

#[derive(Debug, Clone, Copy)]
pub struct MockOptions {
    /// Tokens kept per payload; the rest goes to the residual.
    pub top_k: usize,
    /// Scale every probability, breaking the mass invariant when != 1.
    pub mass_scale: f64,
    /// Artificial latency per request, to expose overlapping calls.
    pub delay: Duration,
}

impl Default for MockOptions {
    fn default() -> Self {
        Self { top_k: usize::MAX, mass_scale: 1.0, delay: Duration::ZERO }
    }
}

pub struct MockState {
    model: Arc<NGramModel>,
    pub vocab: CharVocab,
    opts: MockOptions,
    sessions: Mutex<HashMap<String, PromptedNGram>>,
    next_id: AtomicUsize,
    inflight: Mutex<HashMap<String, usize>>,
    pub max_inflight_per_session: AtomicUsize,
    pub next_calls: AtomicUsize,
    pub unconditional_calls: AtomicUsize,
    pub deleted: AtomicUsize,
}

impl MockState {
    pub fn open_sessions(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn session(&self, id: &str) -> Option<PromptedNGram> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    fn payload(&self, probs: &[f64]) -> WirePayload {
        let mut p = WirePayload::from_probs(probs, self.opts.top_k);
        if self.opts.mass_scale != 1.0 {
            let shift = self.opts.mass_scale.ln();
            p.top.iter_mut().for_each(|(_, lp)| *lp += shift);
            p.residual_logprob = p.residual_logprob.map(|lp| lp + shift);
        }
        p
    }

    async fn enter(&self, id: &str) {
        {
            let mut map = self.inflight.lock().unwrap();
            let n = map.entry(id.to_string()).or_default();
            *n += 1;
            self.max_inflight_per_session.fetch_max(*n, Ordering::SeqCst);
        }
        if !self.opts.delay.is_zero() {
            tokio::time::sleep(self.opts.delay).await;
        }
    }

    fn leave(&self, id: &str) {
        *self.inflight.lock().unwrap().get_mut(id).unwrap() -= 1;
    }
}

type Shared = Arc<MockState>;

async fn open(State(st): State<Shared>, Json(req): Json<SessionRequest>) -> Result<Json<SessionInfo>, StatusCode> {
    let prompt = match (req.prompt_text, req.prompt_tokens) {
        (Some(text), None) => st.vocab.encode(&text).map_err(|_| StatusCode::BAD_REQUEST)?,
        (None, Some(tokens)) => tokens,
        _ => return Err(StatusCode::BAD_REQUEST),
    };
    let id = format!("s{}", st.next_id.fetch_add(1, Ordering::SeqCst));
    st.sessions.lock().unwrap().insert(id.clone(), st.model.with_prompt(prompt));
    Ok(Json(SessionInfo { session_id: id, vocab_size: st.vocab.len(), eos_token_id: CharVocab::EOS }))
}

async fn next(State(st): State<Shared>, Json(req): Json<NextRequest>) -> Result<Json<WirePayload>, StatusCode> {
    let session = st.session(&req.session_id).ok_or(StatusCode::NOT_FOUND)?;
    st.next_calls.fetch_add(1, Ordering::SeqCst);
    st.enter(&req.session_id).await;
    let payload = st.payload(&session.probs_after(&req.prefix_tokens));
    st.leave(&req.session_id);
    Ok(Json(payload))
}

#[derive(Deserialize)]
struct SessionQuery {
    session_id: String,
}

async fn unconditional(
    State(st): State<Shared>,
    Query(q): Query<SessionQuery>,
) -> Result<Json<WirePayload>, StatusCode> {
    let session = st.session(&q.session_id).ok_or(StatusCode::NOT_FOUND)?;
    st.unconditional_calls.fetch_add(1, Ordering::SeqCst);
    let probs = softmax(&session.unconditional_dist().unwrap());
    Ok(Json(st.payload(probs.probs())))
}

async fn close(State(st): State<Shared>, Path(id): Path<String>) -> StatusCode {
    match st.sessions.lock().unwrap().remove(&id) {
        Some(_) => {
            st.deleted.fetch_add(1, Ordering::SeqCst);
            StatusCode::NO_CONTENT
        }
        None => StatusCode::NOT_FOUND,
    }
}

async fn garbage() -> Json<Value> {
    Json(json!({"top": "nope"}))
}

pub struct MockServer {
    pub url: String,
    pub state: Shared,
}

impl MockServer {
    pub fn start(opts: MockOptions) -> Self {
        let (model, vocab) = corpus_model();
        let state = Arc::new(MockState {
            model,
            vocab,
            opts,
            sessions: Mutex::default(),
            next_id: AtomicUsize::new(0),
            inflight: Mutex::default(),
            max_inflight_per_session: AtomicUsize::new(0),
            next_calls: AtomicUsize::new(0),
            unconditional_calls: AtomicUsize::new(0),
            deleted: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/v1/session", post(open))
            .route("/v1/session/{id}", delete(close))
            .route("/v1/next", post(next))
            .route("/v1/unconditional", get(unconditional))
            .route("/garbage/v1/session", post(garbage))
            .with_state(state.clone());
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        // the server thread lives until the test process exits
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        Self { url, state }
    }
}
