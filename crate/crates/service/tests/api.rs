use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use taskprompt::decoder::load_lexicon;
use taskprompt::eval::{load_sweep, run_sweep};
use taskprompt::gateway::{Gateway, ResponseCache, RetryPolicy, ScriptedTransport, SyntheticTransport};
use taskprompt::prompt::load_library;
use taskprompt::steps::load_grammar;
use taskprompt_service::{router, AppState, ServiceConfig};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap()
}

fn config(data_dir: &Path) -> ServiceConfig {
    let (_, inputs) = load_sweep(&fixtures().join("sweeps/context.toml")).unwrap();
    ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        library: load_library(&read("examples.lib")).unwrap(),
        grammar: load_grammar(&read("agent.grammar")).unwrap(),
        lexicon: load_lexicon(&read("agent.lexicon")),
        gold: inputs.gold,
    }
}

fn scripted_state(data_dir: &Path) -> AppState {
    let transport = Arc::new(ScriptedTransport::from_json(&read("scripts/can-transcript.json")).unwrap());
    let gateway = Gateway::new(transport)
        .with_retry(RetryPolicy::none())
        .with_cache(ResponseCache::open(data_dir.join("cache")).unwrap());
    AppState::open(config(data_dir), gateway).unwrap()
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call_text(state, method, uri, body).await;
    let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
    (status, value)
}

async fn call_text(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn post_scene(state: &AppState) -> String {
    let (status, body) = call(state, "POST", "/scenes", Some(json!({"text": read("scenes/tidy-conference-room.scene")}))).await;
    assert_eq!(status, StatusCode::CREATED);
    body["id"].as_str().unwrap().to_string()
}

fn proposal_texts(session: &Value) -> Vec<String> {
    session["pending_proposals"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["step_text"].as_str().unwrap().to_string())
        .collect()
}

async fn accept_first(state: &AppState, session: &Value) -> Value {
    let id = session["id"].as_str().unwrap();
    let proposal = session["pending_proposals"][0]["id"].as_str().unwrap();
    let (status, body) = call(
        state,
        "POST",
        &format!("/sessions/{id}/decisions"),
        Some(json!({"proposal_id": proposal, "verdict": "Accept"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}

#[tokio::test]
async fn scenes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let state = scripted_state(dir.path());
    let id = post_scene(&state).await;
    let (status, body) = call(&state, "GET", &format!("/scenes/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["scene"]["task_phrase"], "tidy conference room");
    assert_eq!(body["scene"]["objects"].as_array().unwrap().len(), 9);

    let (status, body) = call(&state, "POST", "/scenes", Some(json!({"text": "task: x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_scene");
    let (status, body) = call(&state, "GET", "/scenes/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_scene");
}

#[tokio::test]
async fn instructor_flow_accepts_can_steps() {
    let dir = tempfile::tempdir().unwrap();
    let state = scripted_state(dir.path());
    let scene_id = post_scene(&state).await;
    let (status, mut session) =
        call(&state, "POST", "/sessions", Some(json!({"scene_id": scene_id, "target_index": 0}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(proposal_texts(&session), ["Pick up can", "Take can to kitchen"]);
    assert_eq!(session["pending_proposals"][0]["score"], 0.48);

    for _ in 0..3 {
        session = accept_first(&state, &session).await;
    }
    assert_eq!(proposal_texts(&session), ["(END TASK)"]);
    let id = session["id"].as_str().unwrap().to_string();
    let (status, finished) = call(&state, "POST", &format!("/sessions/{id}/finish"), Some(json!({"elicit_goal": true}))).await;
    assert_eq!(status, StatusCode::OK, "{finished}");
    assert_eq!(
        finished["learned"]["steps"],
        json!(["Pick up can", "Take can to kitchen", "Put can in recycling bin"])
    );
    assert_eq!(finished["learned"]["goal"]["target_phrase"], "recycling bin");

    let (status, body) = call(&state, "POST", &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "session_not_active");

    // A fresh service over the same data directory replays the session
    // without reaching the model.
    let replay = Gateway::replay_only(ResponseCache::open(dir.path().join("cache")).unwrap());
    let restarted = AppState::open(config(dir.path()), replay).unwrap();
    let (status, restored) = call(&restarted, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(restored, finished["session"]);
    assert_eq!(restarted.gateway().stats().live_calls, 0);
}

#[tokio::test]
async fn decision_errors() {
    let dir = tempfile::tempdir().unwrap();
    let state = scripted_state(dir.path());
    let scene_id = post_scene(&state).await;
    let (_, session) = call(&state, "POST", "/sessions", Some(json!({"scene_id": scene_id, "target_index": 0}))).await;
    let id = session["id"].as_str().unwrap();
    let proposal = session["pending_proposals"][0]["id"].as_str().unwrap();

    let (status, body) = call(
        &state,
        "POST",
        &format!("/sessions/{id}/decisions"),
        Some(json!({"proposal_id": proposal, "verdict": "Edit", "edited_text": "Levitate can"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "uneditable_parse");
    assert!(body["message"].as_str().unwrap().contains("UnknownVerb"));

    let (status, body) = call(
        &state,
        "POST",
        &format!("/sessions/{id}/decisions"),
        Some(json!({"proposal_id": "p99", "verdict": "Accept"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_proposal");

    let (status, body) = call(&state, "POST", &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "no_accepted_steps");

    let (status, body) =
        call(&state, "POST", "/sessions", Some(json!({"scene_id": scene_id, "target_index": 40}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "invalid_target");
}

#[tokio::test]
async fn model_failure_is_reported_as_retryable() {
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(Arc::new(ScriptedTransport::new(vec![]))).with_retry(RetryPolicy::none());
    let state = AppState::open(config(dir.path()), gateway).unwrap();
    let scene_id = post_scene(&state).await;
    let (status, body) = call(&state, "POST", "/sessions", Some(json!({"scene_id": scene_id, "target_index": 0}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["retryable"], true);
}

#[tokio::test]
async fn rating_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(Arc::new(SyntheticTransport::new()));
    let (sweep, inputs) = load_sweep(&fixtures().join("sweeps/context.toml")).unwrap();
    let records = run_sweep(&sweep, &inputs, &gateway).unwrap().records;
    assert_eq!(records.len(), 27);
    let state = AppState::open(config(dir.path()), gateway).unwrap();
    state.add_records(&records).unwrap();

    let (status, pending) = call(&state, "GET", "/ratings/pending?experiment=context", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(pending.as_array().unwrap().len(), 27);
    let (_, none) = call(&state, "GET", "/ratings/pending?experiment=other", None).await;
    assert!(none.as_array().unwrap().is_empty());

    let first = records[0].id.clone();
    let rating = json!({"response_id": first, "rater": "r1", "reasonable": true, "relevant": false, "interpretable": true});
    let (status, _) = call(&state, "POST", "/ratings", Some(rating)).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, listed) = call(&state, "GET", &format!("/ratings?response_id={first}"), None).await;
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["relevant"], false);
    let (_, mine) = call(&state, "GET", "/ratings/pending?experiment=context&rater=r1", None).await;
    assert_eq!(mine.as_array().unwrap().len(), 26);

    let (status, body) = call(
        &state,
        "POST",
        "/ratings",
        Some(json!({"response_id": "missing", "rater": "r1", "reasonable": true, "relevant": true, "interpretable": true})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_response");

    let (status, body) = call(&state, "GET", "/experiments/context/report.csv", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "missing_consensus");

    let (status, csv) = call_text(&state, "GET", "/experiments/context/report.csv?mode=auto", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(csv.lines().count(), 4);

    for r in &records {
        let rating = json!({"response_id": r.id, "rater": "consensus", "reasonable": true, "relevant": true, "interpretable": r.auto_interpretable});
        assert_eq!(call(&state, "POST", "/ratings", Some(rating)).await.0, StatusCode::CREATED);
    }
    let (status, csv) = call_text(&state, "GET", "/experiments/context/report.csv", None).await;
    assert_eq!(status, StatusCode::OK);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "domain,n_examples,temperature,context,features,strategy,n,pct_reasonable,pct_relevant,pct_interpretable,pct_relevant_and_interpretable"
    );
    assert!(lines.all(|l| l.contains(",100.0,100.0,")));
    let (status, _) = call(&state, "GET", "/experiments/nothing/report.csv", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
