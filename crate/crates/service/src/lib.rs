//! HTTP API over instructor sessions and the response rating workflow.
//!
//! State lives in append-only JSONL logs under a data directory: scenes,
//! session events, sweep responses and ratings. Sessions are rebuilt at
//! startup by replaying their events against the response cache.

mod error;
mod state;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use taskprompt::eval::{aggregate, latest_ratings, pending_ratings, AggregationMode, RatingRecord, ResponseRecord};
use taskprompt::scene::{load_scene, Scene};
use taskprompt::session::{Decision, LearnedTask, Session, SessionConfig};

pub use error::ApiError;
pub use state::{AppState, ServiceConfig};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenes", post(create_scene))
        .route("/scenes/{id}", get(get_scene))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/decisions", post(decide))
        .route("/sessions/{id}/finish", post(finish))
        .route("/ratings/pending", get(pending))
        .route("/ratings", get(list_ratings).post(rate))
        .route("/experiments/{id}/report.csv", get(report))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SceneBody {
    Text { text: String },
    Structured(Scene),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredScene {
    pub id: String,
    pub scene: Scene,
}

async fn create_scene(
    State(state): State<AppState>,
    Json(body): Json<SceneBody>,
) -> Result<(StatusCode, Json<StoredScene>), ApiError> {
    let scene = match body {
        SceneBody::Text { text } => load_scene(&text).map_err(|e| ApiError::bad_request("invalid_scene", e))?,
        SceneBody::Structured(scene) => load_scene(&scene.to_scene_text()).map_err(|e| ApiError::bad_request("invalid_scene", e))?,
    };
    let stored = state.add_scene(scene)?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn get_scene(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<StoredScene>, ApiError> {
    let scene = state.scene(&id)?;
    Ok(Json(StoredScene { id, scene }))
}

#[derive(Debug, Deserialize)]
struct OpenSession {
    scene_id: String,
    target_index: usize,
    #[serde(default)]
    config: SessionConfig,
}

async fn open_session(
    State(state): State<AppState>,
    Json(body): Json<OpenSession>,
) -> Result<(StatusCode, Json<Session>), ApiError> {
    let scene = state.scene(&body.scene_id)?;
    let session = state
        .blocking(move |s| s.open_session(scene, body.target_index, body.config))
        .await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    Ok(Json(state.session(&id)?))
}

async fn decide(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(decision): Json<Decision>,
) -> Result<Json<Session>, ApiError> {
    let session = state.blocking(move |s| s.apply_decision(&id, decision)).await?;
    Ok(Json(session))
}

#[derive(Debug, Default, Deserialize)]
struct FinishBody {
    #[serde(default)]
    elicit_goal: bool,
}

#[derive(Debug, Serialize)]
struct Finished {
    session: Session,
    learned: LearnedTask,
}

async fn finish(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<FinishBody>>,
) -> Result<Json<Finished>, ApiError> {
    let elicit_goal = body.map(|Json(b)| b.elicit_goal).unwrap_or_default();
    let (session, learned) = state.blocking(move |s| s.finish_session(&id, elicit_goal)).await?;
    Ok(Json(Finished { session, learned }))
}

#[derive(Debug, Deserialize)]
struct PendingQuery {
    experiment: Option<String>,
    rater: Option<String>,
}

async fn pending(
    State(state): State<AppState>,
    Query(q): Query<PendingQuery>,
) -> Result<Json<Vec<ResponseRecord>>, ApiError> {
    let records = state.records()?;
    let ratings = state.ratings()?;
    let out = pending_ratings(&records, &ratings, q.experiment.as_deref(), q.rater.as_deref())
        .into_iter()
        .cloned()
        .collect();
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct RatingsQuery {
    response_id: Option<String>,
    rater: Option<String>,
}

async fn list_ratings(
    State(state): State<AppState>,
    Query(q): Query<RatingsQuery>,
) -> Result<Json<Vec<RatingRecord>>, ApiError> {
    let out = latest_ratings(&state.ratings()?)
        .into_iter()
        .filter(|r| q.response_id.as_ref().is_none_or(|id| *id == r.response_id))
        .filter(|r| q.rater.as_ref().is_none_or(|who| *who == r.rater))
        .collect();
    Ok(Json(out))
}

async fn rate(
    State(state): State<AppState>,
    Json(rating): Json<RatingRecord>,
) -> Result<(StatusCode, Json<RatingRecord>), ApiError> {
    state.add_rating(&rating)?;
    Ok((StatusCode::CREATED, Json(rating)))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    mode: Option<String>,
}

async fn report(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let mode = match q.mode.as_deref() {
        None | Some("human") => AggregationMode::HumanFirst,
        Some("auto") => AggregationMode::AutoOnly,
        Some(other) => return Err(ApiError::bad_request("bad_mode", format!("unknown mode `{other}`"))),
    };
    let records: Vec<_> = state.records()?.into_iter().filter(|r| r.experiment == id).collect();
    if records.is_empty() {
        return Err(ApiError::not_found("unknown_experiment", format!("no responses for experiment `{id}`")));
    }
    let ratings = latest_ratings(&state.ratings()?);
    let report = aggregate(&records, &ratings, state.gold(), mode).map_err(ApiError::from)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()))
}
