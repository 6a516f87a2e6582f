use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use wordalchemy::corpus::{split_corpus, CorpusSplits, SplitParams, WordDefPair};
use wordalchemy::evaluator::{LexicalBaseline, Ranker};
use wordalchemy::model::ModelConfig;
use wordalchemy::tokenizer::Tokenizer;
use wordalchemy::trainer::{train, Checkpoint, TrainConfig};
use wordalchemy_service::{
    router, AppState, Backend, CheckpointSpec, Engine, QueryResponse, RankedWord, ServiceConfig,
};

const DEFS: &[(&str, &str)] = &[
    ("identify", "to establish the identity of"),
    ("identify", "recognize as being"),
    ("flooded", "covered with water"),
    ("flooded", "filled with a flood of water"),
    ("forget", "to be unable to remember something"),
    ("forget", "dismiss from the mind"),
    ("river", "a large natural stream of water"),
    ("stone", "a hard solid piece of rock"),
    ("cloud", "a visible mass of water droplets in the sky"),
    ("lake", "a body of water surrounded by land"),
    ("ember", "a glowing piece of coal in a fire"),
    ("whisper", "speak very softly"),
    ("giant", "a person of great size"),
    ("shadow", "shade within clear boundaries"),
    ("thread", "a fine cord of twisted fibres"),
    ("bright", "emitting or reflecting light readily"),
];

fn pairs() -> Vec<WordDefPair> {
    DEFS.iter().map(|(w, d)| WordDefPair::new(w, d, "en")).collect()
}

fn splits() -> CorpusSplits {
    split_corpus(&pairs(), 0.2, 4, 0).unwrap()
}

fn quick_ckpt(s: &CorpusSplits, seed: u64) -> Checkpoint {
    let text: Vec<String> = s.train.iter().flat_map(|p| [p.word.clone(), p.definition.clone()]).collect();
    let tok = Tokenizer::train(text.iter(), 300).unwrap();
    let tcfg = TrainConfig {
        batch_size: 4,
        max_steps: 30,
        learning_rate: 1e-2,
        warmup_steps: 0,
        seed,
        ..TrainConfig::default()
    };
    train(s, &tok, &ModelConfig::tiny(tok.vocab_size()), &tcfg).unwrap().0
}

fn fixture() -> &'static (CorpusSplits, Checkpoint) {
    static F: OnceLock<(CorpusSplits, Checkpoint)> = OnceLock::new();
    F.get_or_init(|| {
        let s = splits();
        let c = quick_ckpt(&s, 0);
        (s, c)
    })
}

fn config(backend: Backend) -> ServiceConfig {
    ServiceConfig {
        default_k: 3,
        max_k: 8,
        backend,
        ..ServiceConfig::default()
    }
}

fn state(backend: Backend) -> AppState {
    let (s, c) = fixture();
    let cfg = config(backend);
    let ckpts = if backend.uses_model() { vec![(c.clone(), None)] } else { Vec::new() };
    AppState::new(Engine::from_parts(ckpts, Some(s), &cfg).unwrap(), cfg)
}

async fn send(state: &AppState, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post_raw(state: &AppState, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/query")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(state, req).await
}

async fn post(state: &AppState, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = post_raw(state, &body.to_string()).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(state: &AppState, path: &str) -> (StatusCode, Value) {
    let (status, bytes) = send(state, Request::get(path).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn scores(v: &Value) -> Vec<f64> {
    v["candidates"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).collect()
}

#[tokio::test]
async fn query_returns_k_score_descending_candidates() {
    let st = state(Backend::Model);
    let (status, v) = post(&st, json!({"definition": "covered with water", "lang": "en", "k": 3})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["lang"], "en");
    assert_eq!(v["backend"], "model");
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 3);
    let s = scores(&v);
    assert!(s.windows(2).all(|w| w[0] >= w[1]), "{s:?}");
    for (i, c) in cands.iter().enumerate() {
        assert_eq!(c["rank"], i + 1);
        assert!(c["word"].is_string());
    }
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let st = state(Backend::Model);
    let body = r#"{"definition": "to be unable to remember something", "lang": "en", "k": 5}"#;
    let a = post_raw(&st, body).await;
    let b = post_raw(&st, body).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
}

#[tokio::test]
async fn service_matches_direct_ranker() {
    let (s, c) = fixture();
    let st = state(Backend::Model);
    let ranker = Ranker::new(std::sync::Arc::new(c.clone()), &s.headwords).unwrap();
    for (word, def) in DEFS {
        let body = json!({"definition": def, "lang": "en", "k": 8}).to_string();
        let (status, bytes) = post_raw(&st, &body).await;
        assert_eq!(status, StatusCode::OK);
        let direct = ranker.score(def, "en").unwrap();
        let expected = QueryResponse {
            candidates: direct
                .top(8)
                .iter()
                .enumerate()
                .map(|(i, c)| RankedWord {
                    word: c.word.clone(),
                    score: c.score,
                    rank: i + 1,
                })
                .collect(),
            lang: "en".into(),
            backend: Backend::Model,
        };
        assert_eq!(bytes, serde_json::to_vec(&expected).unwrap(), "query for {word}");
    }
}

#[tokio::test]
async fn baseline_backend_matches_direct_baseline() {
    let (s, _) = fixture();
    let base = LexicalBaseline::new(s);
    for backend in [Backend::Baseline, Backend::Both] {
        let st = state(backend);
        let (status, v) = post(
            &st,
            json!({"definition": "a body of water", "lang": "en", "k": 4, "backend": "baseline"}),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["backend"], "baseline");
        let direct = base.rank("a body of water", "en").unwrap();
        let words: Vec<&str> = direct.top(4).iter().map(|c| c.word.as_str()).collect();
        let got: Vec<&str> = v["candidates"].as_array().unwrap().iter().map(|c| c["word"].as_str().unwrap()).collect();
        assert_eq!(got, words);
        assert_eq!(scores(&v), direct.top(4).iter().map(|c| c.score).collect::<Vec<_>>());
    }
}

#[tokio::test]
async fn both_backend_defaults_to_model() {
    let st = state(Backend::Both);
    let (_, v) = post(&st, json!({"definition": "a body of water", "lang": "en"})).await;
    assert_eq!(v["backend"], "model");
}

#[tokio::test]
async fn omitted_k_returns_default_k() {
    let st = state(Backend::Model);
    let (status, v) = post(&st, json!({"definition": "speak very softly", "lang": "en"})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn k_beyond_inventory_returns_every_headword() {
    let (s, _) = fixture();
    let st = state(Backend::Model);
    let (_, v) = post(&st, json!({"definition": "speak very softly", "lang": "en", "k": 8})).await;
    assert_eq!(v["candidates"].as_array().unwrap().len(), s.headwords["en"].len().min(8));
}

#[tokio::test]
async fn documented_errors_have_their_bodies() {
    let st = state(Backend::Model);
    let cases = [
        (json!({"definition": "x", "lang": "xx"}), StatusCode::NOT_FOUND, "unknown_language"),
        (json!({"definition": "", "lang": "en"}), StatusCode::BAD_REQUEST, "empty_definition"),
        (json!({"definition": "  \t ", "lang": "en"}), StatusCode::BAD_REQUEST, "empty_definition"),
        (json!({"definition": "x", "lang": "en", "k": 9}), StatusCode::BAD_REQUEST, "k_too_large"),
        (json!({"definition": "x", "lang": "en", "k": 0}), StatusCode::BAD_REQUEST, "invalid_k"),
        (json!({"definition": "x", "lang": "en", "k": -2}), StatusCode::BAD_REQUEST, "invalid_k"),
        (json!({"definition": "x", "lang": "en", "backend": "baseline"}), StatusCode::BAD_REQUEST, "unsupported_backend"),
        (json!({"definition": "x", "lang": "en", "backend": "both"}), StatusCode::BAD_REQUEST, "unsupported_backend"),
        (json!({"lang": "en"}), StatusCode::BAD_REQUEST, "invalid_json"),
    ];
    for (body, status, code) in cases {
        let (got_status, v) = post(&st, body.clone()).await;
        assert_eq!(got_status, status, "{body}");
        assert_eq!(v, json!({"error": code}), "{body}");
    }
    let (status, bytes) = post_raw(&st, "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&bytes).unwrap(), json!({"error": "invalid_json"}));
}

#[tokio::test]
async fn languages_and_health() {
    let (_, c) = fixture();
    let st = state(Backend::Model);
    let (status, v) = get(&st, "/api/languages").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"languages": ["en"]}));
    let (status, v) = get(&st, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "checkpoint_digest": c.digest()}));
}

#[tokio::test]
async fn responses_are_json() {
    let st = state(Backend::Model);
    let req = Request::get("/api/health").body(Body::empty()).unwrap();
    let resp = router(st).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "application/json");
}

#[tokio::test]
async fn checkpoint_headwords_suffice_without_corpus() {
    let (s, c) = fixture();
    let cfg = config(Backend::Model);
    let st = AppState::new(Engine::from_parts(vec![(c.clone(), None)], None, &cfg).unwrap(), cfg);
    let (status, v) = post(&st, json!({"definition": "covered with water", "lang": "en", "k": 8})).await;
    assert_eq!(status, StatusCode::OK);
    let (_, with_corpus) = post(&state(Backend::Model), json!({"definition": "covered with water", "lang": "en", "k": 8})).await;
    assert_eq!(v, with_corpus);
    assert_eq!(c.headwords, s.headwords);
}

#[tokio::test]
async fn reload_swaps_the_checkpoint() {
    let (s, c0) = fixture();
    let dir = tempfile::tempdir().unwrap();
    s.save_dir(&dir.path().join("splits"), &SplitParams::default()).unwrap();
    let path = dir.path().join("model.walc");
    c0.save(&path).unwrap();
    let cfg = ServiceConfig {
        checkpoints: vec![CheckpointSpec { path: path.clone(), langs: None }],
        corpus: Some(dir.path().join("splits")),
        ..config(Backend::Model)
    };
    let st = AppState::new(Engine::load(&cfg).unwrap(), cfg);
    let (_, v) = get(&st, "/api/health").await;
    assert_eq!(v["checkpoint_digest"], c0.digest());

    let c1 = quick_ckpt(s, 1);
    assert_ne!(c1.digest(), c0.digest());
    c1.save(&path).unwrap();
    st.reload().unwrap();
    let (_, v) = get(&st, "/api/health").await;
    assert_eq!(v["checkpoint_digest"], c1.digest());

    std::fs::write(&path, b"garbage").unwrap();
    assert!(st.reload().is_err());
    let (_, v) = get(&st, "/api/health").await;
    assert_eq!(v["checkpoint_digest"], c1.digest());
}

#[tokio::test]
async fn static_files_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ok</html>").unwrap();
    let (s, c) = fixture();
    let cfg = ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..config(Backend::Model)
    };
    let st = AppState::new(Engine::from_parts(vec![(c.clone(), None)], Some(s), &cfg).unwrap(), cfg);
    let (status, body) = send(&st, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>ok</html>");
    let (status, _) = get(&st, "/api/languages").await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn config_invariants() {
    let mut cfg = ServiceConfig::default();
    assert!(cfg.validate().is_err());
    cfg.corpus = Some("splits".into());
    cfg.backend = Backend::Baseline;
    assert!(cfg.validate().is_ok());
    cfg.backend = Backend::Model;
    assert!(cfg.validate().is_err());
    cfg.backend = Backend::Baseline;
    cfg.default_k = 0;
    assert!(cfg.validate().is_err());
    cfg.default_k = 2000;
    assert!(cfg.validate().is_err());
    let parsed: ServiceConfig = serde_json::from_str(r#"{"corpus": "s", "backend": "baseline"}"#).unwrap();
    assert_eq!((parsed.default_k, parsed.max_k), (10, 1000));
}

#[test]
fn two_checkpoints_cannot_serve_one_language() {
    let (s, c) = fixture();
    let cfg = config(Backend::Model);
    let err = Engine::from_parts(vec![(c.clone(), None), (c.clone(), None)], Some(s), &cfg).unwrap_err();
    assert!(err.to_string().contains("more than one checkpoint"));
}
