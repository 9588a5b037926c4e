//! HTTP/JSON front end for audit sessions and parliamentary aggregates.
//!
//! All routes live under `/api/v1`. The service computes every statistic;
//! clients only send interpretations and display what comes back.

mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rla_core::api::{
    EscalateRequest, EscalateResponse, HandCountRequest, MemberUpdate, ObservationRequest, ObservationResponse, ParliamentRequest,
    ParliamentView, SessionSummary, PREFIX,
};
use rla_core::session::{Event, SessionInputs, SessionStatus};
use tower_http::cors::CorsLayer;
use tower_http::trace::TraceLayer;

pub use error::ApiError;
pub use store::{AppState, StoreError};

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/observations", post(observe))
        .route("/sessions/{id}/handcount", post(hand_count))
        .route("/sessions/{id}/halt", post(halt))
        .route("/parliament", post(create_parliament))
        .route("/parliament/{id}", get(parliament))
        .route("/parliament/{id}/escalate", post(escalate))
        .route("/parliament/{id}/constituencies/{cid}", post(update_member))
        .with_state(state);
    Router::new()
        .nest(PREFIX, api)
        .layer(CorsLayer::permissive())
        .layer(TraceLayer::new_for_http())
}

/// Opens the store under `data_dir` and serves until interrupted.
pub async fn serve(addr: SocketAddr, data_dir: impl Into<PathBuf>) -> Result<(), ServeError> {
    let state = Arc::new(AppState::open(data_dir)?);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(ServeError::Bind)?;
    tracing::info!("listening on http://{}{PREFIX}", listener.local_addr().map_err(ServeError::Bind)?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Bind)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server: {0}")]
    Bind(std::io::Error),
}

async fn create_session(State(app): Shared, Json(inputs): Json<SessionInputs>) -> Result<(StatusCode, Json<SessionStatus>), ApiError> {
    let session = app.create_session(inputs)?;
    Ok((StatusCode::CREATED, Json(session.status())))
}

async fn list_sessions(State(app): Shared) -> Json<Vec<SessionSummary>> {
    Json(app.list_sessions())
}

async fn session_status(State(app): Shared, Path(id): Path<String>) -> Result<Json<SessionStatus>, ApiError> {
    app.with_session(&id, |e| Ok(Json(e.session.status())))
}

async fn observe(State(app): Shared, Path(id): Path<String>, Json(req): Json<ObservationRequest>) -> Result<Json<ObservationResponse>, ApiError> {
    app.with_session(&id, |e| {
        let record = e.apply(|s| s.observe(req.observed, req.counter))?;
        let Event::Observation(observation) = record.event else {
            unreachable!("observe logs an observation event")
        };
        let s = &e.session;
        Ok(Json(ObservationResponse {
            seq: record.seq,
            record: observation,
            p_value: s.p_value(),
            verdict: s.verdict(),
            next_ballot: (!s.is_concluded()).then(|| s.pending().clone()),
        }))
    })
}

async fn hand_count(State(app): Shared, Path(id): Path<String>, Json(req): Json<HandCountRequest>) -> Result<Json<SessionStatus>, ApiError> {
    app.with_session(&id, |e| {
        e.apply(|s| s.record_hand_count(req.result))?;
        Ok(Json(e.session.status()))
    })
}

async fn halt(State(app): Shared, Path(id): Path<String>) -> Result<Json<SessionStatus>, ApiError> {
    app.with_session(&id, |e| {
        e.apply(|s| s.halt())?;
        Ok(Json(e.session.status()))
    })
}

async fn create_parliament(State(app): Shared, Json(req): Json<ParliamentRequest>) -> Result<(StatusCode, Json<ParliamentView>), ApiError> {
    Ok((StatusCode::CREATED, Json(app.create_parliament(req)?)))
}

async fn parliament(State(app): Shared, Path(id): Path<String>) -> Result<Json<ParliamentView>, ApiError> {
    Ok(Json(app.parliament_view(&id)?))
}

async fn escalate(State(app): Shared, Path(id): Path<String>, body: Option<Json<EscalateRequest>>) -> Result<Json<EscalateResponse>, ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    Ok(Json(app.escalate(&id, req)?))
}

async fn update_member(
    State(app): Shared,
    Path((id, cid)): Path<(String, String)>,
    Json(req): Json<MemberUpdate>,
) -> Result<Json<ParliamentView>, ApiError> {
    Ok(Json(app.update_member(&id, &cid, req)?))
}
