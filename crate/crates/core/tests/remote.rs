mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::mock::{corpus_model, MockOptions, MockServer};
use kappa_core::backends::remote::SessionRequest;
use kappa_core::backends::{BackendError, RemoteClient, RemoteSession, TokenModel, WirePayload};
use kappa_core::distributions::{entropy, kl_divergence, softmax, SamplerConfig, TokenDist};
use kappa_core::engine::{run, EngineError, RunConfig, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROMPT: &str = "the cat";

fn session(server: &MockServer) -> RemoteSession {
    let client = RemoteClient::new(&server.url, Duration::from_secs(10));
    client.open_session(&SessionRequest { prompt_text: Some(PROMPT.into()), prompt_tokens: None }).unwrap()
}

fn remote_cfg(strategy: Strategy, seed: u64) -> RunConfig {
    RunConfig {
        strategy,
        n_branches: 4,
        horizon_tau: 6,
        c_max: 16,
        seed,
        sampler: SamplerConfig { max_new_tokens: 60, top_k: 8, ..Default::default() },
        ..RunConfig::default()
    }
}

#[test]
fn session_lifecycle() {
    let server = MockServer::start(MockOptions::default());
    let s = session(&server);
    let server_vocab = server.state.vocab.len();
    assert_eq!(s.info().vocab_size, server_vocab);
    assert_eq!(s.vocab_size(), server_vocab + 1);
    assert_eq!(s.residual_token(), Some(server_vocab as u32));
    assert_eq!(s.eos_token_id(), 1);
    assert_eq!(server.state.open_sessions(), 1);
    drop(s);
    assert_eq!(server.state.deleted.load(Ordering::SeqCst), 1);
    assert_eq!(server.state.open_sessions(), 0);
}

#[test]
fn open_requires_exactly_one_prompt_form() {
    let client = RemoteClient::new("http://127.0.0.1:9", Duration::from_secs(1));
    let both = SessionRequest { prompt_text: Some("a".into()), prompt_tokens: Some(vec![2]) };
    let neither = SessionRequest { prompt_text: None, prompt_tokens: None };
    assert!(matches!(client.open_session(&both), Err(BackendError::Protocol(_))));
    assert!(matches!(client.open_session(&neither), Err(BackendError::Protocol(_))));
}

#[test]
fn prompt_tokens_are_sent_verbatim() {
    let server = MockServer::start(MockOptions::default());
    let tokens = server.state.vocab.encode(PROMPT).unwrap();
    let client = RemoteClient::new(&server.url, Duration::from_secs(10));
    let by_tokens = client.open_session(&SessionRequest { prompt_text: None, prompt_tokens: Some(tokens) }).unwrap();
    let by_text = session(&server);
    assert_eq!(by_tokens.fetch_next(&[]).unwrap(), by_text.fetch_next(&[]).unwrap());
}

#[test]
fn unknown_session_is_protocol_error() {
    let server = MockServer::start(MockOptions::default());
    let s = session(&server);
    let url = format!("{}/v1/session/{}", server.url, s.info().session_id);
    ureq::delete(&url).call().unwrap();
    assert!(matches!(s.next_dist(&[]), Err(BackendError::Protocol(_))));
    assert!(matches!(s.unconditional_dist(), Err(BackendError::Protocol(_))));
}

#[test]
fn full_payload_matches_local_signals() {
    let server = MockServer::start(MockOptions::default());
    let s = session(&server);
    let (model, vocab) = corpus_model();
    let local = model.with_prompt(vocab.encode(PROMPT).unwrap());
    let q_remote = softmax(&s.unconditional_dist().unwrap());
    let q_local = softmax(&local.unconditional_dist().unwrap());
    let suffixes = ["", " ", " s", " sat", " sat on the m", " and a d"];
    for suffix in suffixes {
        let prefix = vocab.encode(suffix).unwrap();
        let p_remote = softmax(&s.next_dist(&prefix).unwrap());
        let p_local = softmax(&local.next_dist(&prefix).unwrap());
        assert!(p_remote.prob(vocab.len() as u32) < 1e-12);
        let kl_r = kl_divergence(&p_remote, &q_remote).unwrap();
        let kl_l = kl_divergence(&p_local, &q_local).unwrap();
        assert!((kl_r - kl_l).abs() < 1e-4, "{suffix:?}: {kl_r} vs {kl_l}");
        assert!((entropy(&p_remote) - entropy(&p_local)).abs() < 1e-4);
    }
}

#[test]
fn truncated_payload_keeps_residual_mass() {
    let server = MockServer::start(MockOptions { top_k: 3, ..Default::default() });
    let s = session(&server);
    let payload = s.fetch_next(&[]).unwrap();
    assert_eq!(payload.top.len(), 3);
    let probs = payload.to_probs(s.info().vocab_size).unwrap();
    let kept: f64 = payload.top.iter().map(|(_, lp)| lp.exp()).sum();
    assert!((probs[s.info().vocab_size] - (1.0 - kept)).abs() < 1e-12);
    let p = softmax(&s.next_dist(&[]).unwrap());
    assert_eq!(p.support_size(), 4);
}

#[test]
fn unconditional_fetched_once() {
    let server = MockServer::start(MockOptions::default());
    let s = session(&server);
    let a = s.unconditional_dist().unwrap();
    let b = s.unconditional_dist().unwrap();
    assert_eq!(a, b);
    assert_eq!(server.state.unconditional_calls.load(Ordering::SeqCst), 1);
}

#[test]
fn engine_runs_end_to_end() {
    let server = MockServer::start(MockOptions { top_k: 6, ..Default::default() });
    let s = session(&server);
    let residual = s.residual_token().unwrap();
    for strategy in Strategy::ALL {
        let r = run(&s, &remote_cfg(strategy, 3)).unwrap();
        assert!(!r.final_tokens.is_empty());
        assert!(r.branches.iter().all(|b| b.tokens.iter().all(|&t| t != residual)), "{strategy}");
        assert!(r.trace.is_strictly_increasing());
        assert_eq!(r.metrics.total_tokens, r.branches.iter().map(|b| b.tokens.len()).sum::<usize>());
    }
}

#[test]
fn remote_and_local_decode_alike() {
    let server = MockServer::start(MockOptions::default());
    let s = session(&server);
    let (model, vocab) = corpus_model();
    let local = model.with_prompt(vocab.encode(PROMPT).unwrap());
    for seed in 0..3 {
        let cfg = remote_cfg(Strategy::Kappa, seed);
        let r = run(&s, &cfg).unwrap();
        let l = run(&local, &cfg).unwrap();
        assert_eq!(r.final_tokens, l.final_tokens);
        assert_eq!(r.final_branch, l.final_branch);
        assert_eq!(r.metrics.total_tokens, l.metrics.total_tokens);
    }
}

#[test]
fn requests_within_a_session_are_serialized() {
    let server = MockServer::start(MockOptions { delay: Duration::from_millis(2), ..Default::default() });
    let s = session(&server);
    let cfg = RunConfig { n_branches: 6, workers: 4, ..remote_cfg(Strategy::Bon, 9) };
    let parallel = run(&s, &cfg).unwrap().without_timing();
    assert_eq!(server.state.max_inflight_per_session.load(Ordering::SeqCst), 1);
    let serial = run(&s, &RunConfig { workers: 1, ..cfg }).unwrap().without_timing();
    assert_eq!(parallel.final_tokens, serial.final_tokens);
    assert_eq!(parallel.branches, serial.branches);
}

#[test]
fn independent_sessions_run_concurrently() {
    let server = MockServer::start(MockOptions::default());
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..4)
            .map(|seed| {
                let server = &server;
                scope.spawn(move || {
                    let s = session(server);
                    run(&s, &remote_cfg(Strategy::Kappa, seed)).unwrap().final_tokens
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(results.len(), 4);
    assert_eq!(server.state.open_sessions(), 0);
}

#[test]
fn bad_mass_is_rejected() {
    let server = MockServer::start(MockOptions { mass_scale: 0.5, ..Default::default() });
    let s = session(&server);
    assert!(matches!(s.next_dist(&[]), Err(BackendError::Malformed(_))));
    let err = run(&s, &remote_cfg(Strategy::Kappa, 0)).unwrap_err();
    assert!(err.is_backend_fault());
    assert!(matches!(err.source, EngineError::Backend(BackendError::Malformed(_))));
}

#[test]
fn undecodable_response_is_malformed() {
    let server = MockServer::start(MockOptions::default());
    let client = RemoteClient::new(format!("{}/garbage", server.url), Duration::from_secs(5));
    let err = client.open_session(&SessionRequest { prompt_text: Some("a".into()), prompt_tokens: None }).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err}");
}

#[test]
fn server_rejection_is_protocol_error() {
    let server = MockServer::start(MockOptions::default());
    let client = RemoteClient::new(&server.url, Duration::from_secs(5));
    // characters outside the corpus vocabulary
    let err =
        client.open_session(&SessionRequest { prompt_text: Some("XYZ".into()), prompt_tokens: None }).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
}

#[test]
fn connection_refused_is_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = RemoteClient::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
    let err = client.open_session(&SessionRequest { prompt_text: Some("a".into()), prompt_tokens: None }).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
}

fn random_probs(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..v).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>().powi(3) }).collect();
    if raw.iter().all(|&x| x == 0.0) {
        raw[0] = 1.0;
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[test]
fn fuzzed_payloads_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let v = rng.gen_range(1..64);
        let probs = random_probs(&mut rng, v);
        let k = rng.gen_range(1..=v + 2);
        let payload = WirePayload::from_probs(&probs, k);
        let wire: WirePayload = serde_json::from_str(&serde_json::to_string(&payload).unwrap()).unwrap();
        assert_eq!(wire, payload);
        let expanded = wire.to_probs(v).unwrap_or_else(|e| panic!("case {case}: {e}"));
        for &(tok, _) in &wire.top {
            assert!((expanded[tok as usize] - probs[tok as usize]).abs() < 1e-12);
        }
        let listed: f64 = wire.top.iter().map(|&(t, _)| probs[t as usize]).sum();
        assert!((expanded[v] - (1.0 - listed)).abs() < 1e-12);
        let dist = TokenDist::new(expanded).unwrap();
        assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // the kept tokens are the most likely ones
        let floor = wire.top.iter().map(|&(t, _)| probs[t as usize]).fold(f64::INFINITY, f64::min);
        let unlisted = (0..v).filter(|t| !wire.top.iter().any(|&(x, _)| x as usize == *t));
        assert!(unlisted.map(|t| probs[t]).all(|p| p <= floor));
    }
}

#[test]
fn fuzzed_corruptions_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let v = rng.gen_range(2..64);
        let probs = random_probs(&mut rng, v);
        let mut p = WirePayload::from_probs(&probs, v);
        match case % 5 {
            0 => p.top.push((v as u32 + rng.gen_range(0..4), -5.0)),
            1 => {
                let dup = p.top[0];
                p.top.push(dup);
            }
            2 => p.top[0].1 = f64::NAN,
            3 => p.top.iter_mut().for_each(|(_, lp)| *lp -= 0.01),
            _ => p.residual_logprob = Some(0.0),
        }
        assert!(p.to_probs(v).is_err(), "case {case}: {p:?}");
    }
}
