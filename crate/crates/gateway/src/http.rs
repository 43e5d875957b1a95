use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use dxagent_core::{CoordinationStrategy, TraceEvent};
use futures::stream::{self, Stream};
use serde::{Deserialize, Deserializer};
use serde_json::{json, Value};
use tokio::sync::broadcast::{self, error::RecvError};

use crate::service::{Gateway, GatewayError, Session};

/// Per-upload body cap.
pub const MAX_SCAN_BYTES: usize = 512 * 1024 * 1024;

pub type AppState = Arc<Gateway>;

pub fn router(gateway: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tools", get(tools))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/strategy", put(set_strategy))
        .route(
            "/sessions/{id}/scans",
            post(upload_scan).layer(DefaultBodyLimit::max(MAX_SCAN_BYTES)),
        )
        .route("/sessions/{id}/query", post(post_query))
        .route("/sessions/{id}/trace", get(stream_trace))
        .with_state(gateway)
}

fn error_body(kind: &str, message: &str) -> Value {
    json!({ "error": { "kind": kind, "message": message } })
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = match &self {
            GatewayError::UnknownSession(_) => StatusCode::NOT_FOUND,
            GatewayError::Storage(e) => {
                tracing::error!(error = %e, "storage failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(error_body(self.kind(), &self.to_string()))).into_response()
    }
}

fn bad_request(message: impl Into<String>) -> GatewayError {
    GatewayError::InvalidRequest(message.into())
}

/// Accepts a strategy either in its text form (`"llm:vote"`) or in its JSON
/// form (`{"llm_coordinated": {"fallback": "vote"}}`).
fn de_strategy<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CoordinationStrategy>, D::Error> {
    let v = Option::<Value>::deserialize(d)?;
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => s.parse().map(Some).map_err(serde::de::Error::custom),
        Some(other) => serde_json::from_value(other).map(Some).map_err(serde::de::Error::custom),
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct StrategyBody {
    #[serde(default, deserialize_with = "de_strategy")]
    strategy: Option<CoordinationStrategy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    text: String,
    #[serde(default, deserialize_with = "de_strategy")]
    strategy: Option<CoordinationStrategy>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, GatewayError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON body: {e}")))
}

async fn health(State(gw): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "sessions": gw.session_count(),
        "tools": gw.engine().registry().len(),
    }))
}

async fn tools(State(gw): State<AppState>) -> Json<Value> {
    Json(json!({ "tools": gw.engine().registry().list() }))
}

async fn create_session(State(gw): State<AppState>, body: Bytes) -> Result<Response, GatewayError> {
    let body: StrategyBody = if body.iter().all(u8::is_ascii_whitespace) {
        StrategyBody::default()
    } else {
        parse_json(&body)?
    };
    let created = gw.create_session(body.strategy)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn summary(State(gw): State<AppState>, Path(id): Path<String>) -> Result<Response, GatewayError> {
    Ok(Json(gw.summary(&id).await?).into_response())
}

async fn set_strategy(
    State(gw): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, GatewayError> {
    let body: StrategyBody = parse_json(&body)?;
    let strategy = body.strategy.ok_or_else(|| bad_request("strategy is required"))?;
    gw.set_strategy(&id, strategy).await?;
    Ok(Json(json!({ "session_id": id, "strategy": strategy })).into_response())
}

#[derive(Deserialize)]
struct ScanParams {
    modality: Option<String>,
}

async fn upload_scan(
    State(gw): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<ScanParams>,
    body: Bytes,
) -> Result<Response, GatewayError> {
    let modality = params.modality.ok_or_else(|| GatewayError::InvalidModality(String::new()))?;
    let scan = gw.upload_scan(&id, &modality, &body).await?;
    Ok((StatusCode::CREATED, Json(scan)).into_response())
}

/// 200 with the response, or 422 when the episode failed; the body is the
/// response either way so the partial outcome stays visible.
async fn post_query(
    State(gw): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, GatewayError> {
    let body: QueryBody = parse_json(&body)?;
    let response = gw.post_query(&id, &body.text, body.strategy).await?;
    let status = if response.is_failure() {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::OK
    };
    Ok((status, Json(response)).into_response())
}

#[derive(Deserialize)]
struct TraceParams {
    from_seq: Option<u64>,
    follow: Option<bool>,
}

struct Cursor {
    session: Arc<Session>,
    pending: VecDeque<TraceEvent>,
    rx: Option<broadcast::Receiver<TraceEvent>>,
    next: u64,
}

fn trace_stream(session: Arc<Session>, from_seq: u64, follow: bool) -> impl Stream<Item = TraceEvent> {
    let (snapshot, rx) = session.feed().subscribe(from_seq);
    let cursor = Cursor {
        session,
        pending: snapshot.into(),
        rx: follow.then_some(rx),
        next: from_seq,
    };
    stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(e) = c.pending.pop_front() {
                c.next = e.seq + 1;
                return Some((e, c));
            }
            let rx = c.rx.as_mut()?;
            match rx.recv().await {
                Ok(e) if e.seq >= c.next => c.pending.push_back(e),
                Ok(_) => {}
                Err(RecvError::Lagged(_)) => {
                    let missed = c.session.feed().since(c.next);
                    c.pending.extend(missed);
                }
                Err(RecvError::Closed) => return None,
            }
        }
    })
}

fn to_sse(e: TraceEvent) -> Result<Event, Infallible> {
    let data = serde_json::to_string(&e).expect("trace events serialize");
    Ok(Event::default().event("trace").id(e.seq.to_string()).data(data))
}

/// Server-sent events: persisted events with `seq >= from_seq`, then live
/// ones. `from_seq` defaults to one past `Last-Event-ID`, else 0.
/// `follow=false` ends the stream after the persisted part.
async fn stream_trace(
    State(gw): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<TraceParams>,
    headers: HeaderMap,
) -> Result<Response, GatewayError> {
    let session = gw.session(&id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|s| s + 1);
    let from_seq = params.from_seq.or(resume).unwrap_or(0);
    let events = trace_stream(session, from_seq, params.follow.unwrap_or(true));
    let sse = Sse::new(futures::StreamExt::map(events, to_sse)).keep_alive(KeepAlive::default());
    Ok(sse.into_response())
}
