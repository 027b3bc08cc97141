use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cawal_core::capture::{CaptureError, Tracker};
use cawal_core::extract::analytics_file_name;
use cawal_core::session_store::{AdminFlag, FlagKey, FlagKind, StoreError};
use cawal_core::warehouse::{GroupBy, Warehouse, WarehouseError};
use chrono::NaiveDate;
use serde::Deserialize;
use serde_json::json;

use crate::config::MonitorConfig;
use crate::snapshot::RealtimeSnapshot;

/// Where range queries read marts from. A directory is reopened per request
/// so loads done by a separate nightly process are visible at once.
#[derive(Clone)]
pub enum WarehouseSource {
    Shared(Arc<Warehouse>),
    Dir(PathBuf),
}

impl WarehouseSource {
    fn get(&self) -> Result<Arc<Warehouse>, WarehouseError> {
        match self {
            Self::Shared(w) => Ok(w.clone()),
            Self::Dir(d) => Ok(Arc::new(Warehouse::open(d)?)),
        }
    }
}

struct Inner {
    tracker: Arc<Tracker>,
    analytics_dir: PathBuf,
    warehouse: WarehouseSource,
    token: String,
    cache_threshold: usize,
    cache_ttl: Duration,
    cache: Mutex<Option<(Instant, Arc<Vec<u8>>)>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(tracker: Arc<Tracker>, analytics_dir: PathBuf, warehouse: WarehouseSource, cfg: &MonitorConfig) -> Self {
        Self(Arc::new(Inner {
            tracker,
            analytics_dir,
            warehouse,
            token: cfg.token.clone(),
            cache_threshold: cfg.snapshot_cache_threshold,
            cache_ttl: Duration::from_millis(cfg.snapshot_cache_ms),
            cache: Mutex::new(None),
        }))
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.0.tracker
    }
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<WarehouseError> for ApiError {
    fn from(e: WarehouseError) -> Self {
        let status = match e {
            WarehouseError::UnknownMetric { .. }
            | WarehouseError::UnsupportedGrouping { .. }
            | WarehouseError::UnknownGroup(_)
            | WarehouseError::InvalidRange { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/monitor/snapshot", get(snapshot))
        .route("/api/admin/ban", post(ban))
        .route("/api/admin/unban", post(unban))
        .route("/api/admin/kick", post(kick))
        .route("/api/reports/day/{date}", get(day_report))
        .route("/api/reports/range", get(range_report))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .merge(api)
        .with_state(state)
}

fn token_matches(expected: &str, given: &str) -> bool {
    // length leaks, contents do not
    expected.len() == given.len() && expected.bytes().zip(given.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match given {
        Some(t) if !state.0.token.is_empty() && token_matches(&state.0.token, t) => next.run(req).await,
        _ => ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response(),
    }
}

fn json_bytes(body: Arc<Vec<u8>>) -> Response {
    (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        body.as_ref().clone(),
    )
        .into_response()
}

async fn snapshot(State(state): State<AppState>) -> Response {
    let s = &state.0;
    let open = s.tracker.sessions().open_sessions();
    let cacheable = open.len() > s.cache_threshold;
    if cacheable {
        if let Some((at, body)) = s.cache.lock().expect("cache lock").as_ref() {
            if at.elapsed() < s.cache_ttl {
                return json_bytes(body.clone());
            }
        }
    }
    let snap = RealtimeSnapshot::build(s.tracker.clock().now(), &open, s.tracker.counters().rejected_requests);
    let body = Arc::new(serde_json::to_vec(&snap).expect("snapshot serializes"));
    if cacheable {
        *s.cache.lock().expect("cache lock") = Some((Instant::now(), body.clone()));
    }
    json_bytes(body)
}

/// `{"kind": "ban_user", "key": 42}` or `{"kind": "ban_ip", "key": "10.0.0.1"}`;
/// `user` and `ip` are accepted as kinds too.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanRequest {
    pub kind: FlagKind,
    pub key: FlagKey,
}

impl BanRequest {
    fn target(&self) -> Result<(FlagKind, FlagKey), ApiError> {
        match (self.kind, self.key) {
            (FlagKind::BanUser, FlagKey::User(_)) | (FlagKind::BanIp, FlagKey::Ip(_)) => Ok((self.kind, self.key)),
            _ => Err(ApiError::new(StatusCode::BAD_REQUEST, "key does not match kind")),
        }
    }
}

fn store_error(e: StoreError) -> ApiError {
    match e {
        StoreError::Stale(id) => ApiError::new(StatusCode::NOT_FOUND, format!("no open session {id}")),
        StoreError::Unavailable => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

async fn ban(State(state): State<AppState>, Json(req): Json<BanRequest>) -> Result<Response, ApiError> {
    let (kind, key) = req.target()?;
    let store = state.0.tracker.sessions();
    if store.flags().iter().any(|f| f.kind == kind && f.key == key) {
        return Err(ApiError::new(StatusCode::CONFLICT, "already banned"));
    }
    let now = state.0.tracker.clock().now();
    let flag = match key {
        FlagKey::User(u) => AdminFlag::ban_user(u, now),
        FlagKey::Ip(ip) => AdminFlag::ban_ip(ip, now),
    };
    store.set_flag(flag.clone()).map_err(store_error)?;
    Ok((StatusCode::CREATED, Json(flag)).into_response())
}

async fn unban(State(state): State<AppState>, Json(req): Json<BanRequest>) -> Result<Response, ApiError> {
    let (kind, key) = req.target()?;
    if state.0.tracker.sessions().clear_flag(kind, key).map_err(store_error)? {
        Ok(Json(json!({ "removed": true })).into_response())
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, "no such ban"))
    }
}

#[derive(Debug, Deserialize)]
pub struct KickRequest {
    pub session_id: String,
}

async fn kick(State(state): State<AppState>, Json(req): Json<KickRequest>) -> Result<Response, ApiError> {
    let now = state.0.tracker.clock().now();
    match state.0.tracker.kick(&req.session_id, now) {
        Ok(s) => Ok(Json(s).into_response()),
        Err(CaptureError::Store(e)) => Err(store_error(e)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn day_report(State(state): State<AppState>, Path(date): Path<String>) -> Result<Response, ApiError> {
    let date: NaiveDate = date
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid date {date:?}")))?;
    let path = state.0.analytics_dir.join(analytics_file_name(date));
    match std::fs::read(&path) {
        Ok(bytes) => Ok(json_bytes(Arc::new(bytes))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::new(StatusCode::NOT_FOUND, format!("no analytics for {date}")))
        }
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
pub struct RangeQuery {
    pub metric: String,
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub group_by: Option<String>,
    pub format: Option<String>,
}

async fn range_report(State(state): State<AppState>, Query(q): Query<RangeQuery>) -> Result<Response, ApiError> {
    let group = match q.group_by.as_deref().filter(|g| !g.is_empty()) {
        Some(g) => Some(g.parse::<GroupBy>()?),
        None => None,
    };
    let series = state.0.warehouse.get()?.query_range(&q.metric, q.from, q.to, group)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(json_bytes(Arc::new(series.to_canonical_json()))),
        Some("csv") => Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("text/csv"))], series.to_csv()).into_response()),
        Some(other) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format {other:?}; expected json or csv"))),
    }
}

/// Serves `router(state)` until `shutdown` resolves. A background task sweeps
/// idle sessions every `sweep_every`; on shutdown the session store is saved
/// to `snapshot_dir` when one is given.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    sweep_every: Duration,
    snapshot_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let tracker = state.tracker().clone();
    let sweeper = {
        let tracker = tracker.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                if let Err(e) = tracker.sweep(tracker.clock().now()) {
                    eprintln!("sweep failed: {e}");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    if let Some(dir) = snapshot_dir {
        tracker
            .sessions()
            .save_snapshot(&dir)
            .map_err(|e| std::io::Error::other(format!("saving session snapshot: {e}")))?;
    }
    result
}
