//! HTTP control API over an [`EngineHandle`].

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use e2l_core::codec::Eui;
use e2l_core::engine::{AggregationUpdate, Command, CommandError, DeviceUpdate, LinkUpdate};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio_stream::wrappers::BroadcastStream;

use crate::runtime::{EngineGone, EngineHandle, RunAction};

type AppState = Arc<EngineHandle>;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<EngineGone> for ApiError {
    fn from(e: EngineGone) -> Self {
        ApiError(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let status = match e {
            CommandError::UnknownDevice(_) | CommandError::UnknownLink(_) => StatusCode::NOT_FOUND,
            CommandError::Invalid { .. } => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

pub fn router(handle: EngineHandle) -> Router {
    Router::new()
        .route("/api/state", get(state))
        .route("/api/metrics", get(metrics))
        .route("/api/devices/:dev_eui", put(put_device))
        .route("/api/aggregation", put(put_aggregation))
        .route("/api/links/:id", put(put_link))
        .route("/api/run/:action", post(run))
        .route("/api/events", get(events))
        .route("/api/security/view/:dev_eui", get(security_view))
        .with_state(Arc::new(handle))
}

fn json_text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn state(State(h): State<AppState>) -> Response {
    json_text(h.published().state.clone())
}

async fn metrics(State(h): State<AppState>) -> Response {
    json_text(h.published().metrics.clone())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(bad_request)
}

fn parse_eui(s: &str) -> Result<Eui, ApiError> {
    s.parse().map_err(|e| bad_request(format!("dev_eui: {e}")))
}

async fn mutate(h: &EngineHandle, cmd: Command) -> Result<Response, ApiError> {
    if !h.interactive() {
        return Err(ApiError(StatusCode::CONFLICT, "mutations are disabled in fast mode".into()));
    }
    h.apply(cmd).await??;
    Ok(json_text(h.published().state.clone()))
}

async fn put_device(State(h): State<AppState>, Path(dev_eui): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let update: DeviceUpdate = parse_body(&body)?;
    mutate(&h, Command::Device(parse_eui(&dev_eui)?, update)).await
}

async fn put_aggregation(State(h): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let update: AggregationUpdate = parse_body(&body)?;
    mutate(&h, Command::Aggregation(update)).await
}

async fn put_link(State(h): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let update: LinkUpdate = parse_body(&body)?;
    mutate(&h, Command::Link(id, update)).await
}

async fn run(State(h): State<AppState>, Path(action): Path<String>) -> Result<Response, ApiError> {
    let action: RunAction = action.parse().map_err(|e: String| ApiError(StatusCode::NOT_FOUND, e))?;
    h.run(action).await?;
    Ok(json_text(h.published().state.clone()))
}

async fn security_view(State(h): State<AppState>, Path(dev_eui): Path<String>) -> Result<Response, ApiError> {
    let eui = parse_eui(&dev_eui)?;
    match h.security_view(eui).await? {
        Some(view) => Ok(Json(view).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("no data frame from {eui} yet"))),
    }
}

async fn events(State(h): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let first = Event::default().event("snapshot").data(h.published().metrics.clone());
    let live = BroadcastStream::new(h.subscribe())
        .filter_map(|item| async move { item.ok().map(|i| Event::default().event(i.event).data(i.data)) });
    Sse::new(stream::once(async move { first }).chain(live).map(Ok)).keep_alive(KeepAlive::default())
}
