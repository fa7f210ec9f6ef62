//! HTTP + server-sent-event API of the twin.
//!
//! - `GET /health`
//! - `GET /state` latest [`TwinState`]
//! - `GET /config` effective configuration, fit inlined
//! - `POST /command` `{"type":"set_pos_target","value":100.0}`
//! - `GET /stream` one `state` event per published snapshot
//! - `GET /error?reference=x,y,z` pose error of the latest state

use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;

use super::engine::{CommandFailure, TwinShared};
use super::{evaluate_pose_error, Command};

pub fn router(twin: TwinShared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/state", get(state))
        .route("/config", get(config))
        .route("/command", post(command))
        .route("/stream", get(stream_states))
        .route("/error", get(pose_error))
        .with_state(twin)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    twin: TwinShared,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(twin))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn health(State(twin): State<TwinShared>) -> Json<serde_json::Value> {
    let s = twin.latest();
    Json(json!({ "status": "ok", "link_ok": s.link_ok, "timestamp": s.timestamp }))
}

async fn state(State(twin): State<TwinShared>) -> Response {
    Json(twin.latest()).into_response()
}

async fn config(State(twin): State<TwinShared>) -> Response {
    Json(twin.config().clone()).into_response()
}

async fn command(State(twin): State<TwinShared>, Json(cmd): Json<Command>) -> Response {
    match twin.command(cmd).await {
        Ok(ack) => Json(ack).into_response(),
        Err(CommandFailure::Invalid(e)) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "ok": false, "error": e.to_string() })),
        )
            .into_response(),
        Err(e @ CommandFailure::Unavailable(_)) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "ok": false, "error": e.to_string() })),
        )
            .into_response(),
    }
}

fn stream_events(twin: TwinShared) -> impl Stream<Item = Result<Event, Infallible>> {
    let mut rx = twin.subscribe();
    rx.mark_changed();
    stream::unfold(rx, |mut rx| async move {
        rx.changed().await.ok()?;
        let state = rx.borrow_and_update().clone();
        let event = Event::default()
            .event("state")
            .json_data(&state)
            .expect("state serializes");
        Some((Ok(event), rx))
    })
}

async fn stream_states(
    State(twin): State<TwinShared>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(stream_events(twin)).keep_alive(KeepAlive::new().interval(Duration::from_secs(5)))
}

#[derive(Deserialize)]
struct ErrorQuery {
    reference: String,
}

async fn pose_error(State(twin): State<TwinShared>, Query(q): Query<ErrorQuery>) -> Response {
    let bad = |msg: String| (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))).into_response();
    let reference = match crate::parse_triple(&q.reference) {
        Ok(r) => r,
        Err(e) => return bad(e),
    };
    match evaluate_pose_error(&twin.latest(), reference) {
        Ok(err) => Json(err).into_response(),
        Err(e) => bad(e.to_string()),
    }
}
