//! HTTP/JSON application server over the store, hyper tables, map-reduce
//! jobs, forecasts, mesh topology and leak alerts.

mod handlers;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::aggregate::{AggregateError, JobLibrary};
use crate::forecast::{ForecastError, ForecastOutcome, ForecastRequest};
use crate::hypertable::{AggMode, HierarchyMap, HyperTableError};
use crate::ingest::{DeviceMap, IngestError};
use crate::mesh::{LeakAlert, LeakError, Mesh};
use crate::model::{Metric, ObjectId, Timestamp};
use crate::store::{CubeStore, StoreError};

pub use self::handlers::{objects_listing, slice_spec_from_query, ObjectInfo, Page};

pub const DEFAULT_PAGE_LIMIT: usize = 500;
pub const MAX_PAGE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: String,
    pub port: u16,
    pub store: Option<PathBuf>,
    /// Static bearer token for write endpoints; writes are disabled without one.
    pub token: Option<String>,
    /// Allowed CORS origins; `*` allows any.
    pub cors_allow: Vec<String>,
    /// Directory served under `/ui`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            store: None,
            token: None,
            cors_allow: Vec::new(),
            static_dir: None,
        }
    }
}

impl ApiConfig {
    pub fn validate(&self) -> Result<SocketAddr, ApiError> {
        if matches!(&self.token, Some(t) if t.trim().is_empty()) {
            return Err(ApiError::new(400, "invalid_config", "token must be non-empty when set"));
        }
        format!("{}:{}", self.bind, self.port)
            .parse()
            .map_err(|e| ApiError::new(400, "invalid_config", format!("bad bind address: {e}")))
    }
}

/// Error payload: HTTP status, machine code, human message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code} ({status}): {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(400, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(404, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::KeyConflict { .. } => (409, "key_conflict"),
            StoreError::QuorumUnavailable(_) => (503, "quorum_unavailable"),
            StoreError::ChecksumMismatch { .. } => (500, "checksum_mismatch"),
            StoreError::InvalidSpec(_) => (400, "invalid_spec"),
            StoreError::UnknownNode(_) => (404, "unknown_node"),
            StoreError::Io(_) => (503, "store_io"),
            StoreError::Corrupt(_) => (500, "store_corrupt"),
            StoreError::Config(_) => (500, "store_config"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Store(s) => s.into(),
            IngestError::EmptyBatch => ApiError::bad_request("empty_batch", e.to_string()),
            IngestError::Parse { .. } => ApiError::bad_request("parse_error", e.to_string()),
            IngestError::Io(_) => ApiError::new(500, "ingest_io", e.to_string()),
        }
    }
}

impl From<HyperTableError> for ApiError {
    fn from(e: HyperTableError) -> Self {
        let (status, code) = match &e {
            HyperTableError::Store(s) => return s.clone().into(),
            HyperTableError::InvalidHierarchy(_) => (500, "invalid_hierarchy"),
            HyperTableError::InvalidLevels(_) => (400, "invalid_levels"),
            HyperTableError::UnknownColumn(_) => (400, "unknown_column"),
            HyperTableError::InvalidThresholds(_) => (400, "invalid_thresholds"),
            HyperTableError::InvalidCursor(_) => (400, "invalid_cursor"),
            HyperTableError::ForecastUnavailable(_) => (404, "forecast_unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<AggregateError> for ApiError {
    fn from(e: AggregateError) -> Self {
        let (status, code) = match &e {
            AggregateError::Store(s) => return s.clone().into(),
            AggregateError::DuplicateName(_) => (409, "duplicate_function"),
            AggregateError::NonAssociativeReduce { .. } => (400, "non_associative_reduce"),
            AggregateError::UnknownFunction(_) => (400, "unknown_function"),
            AggregateError::InvalidSpec(_) => (400, "invalid_job"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ForecastError> for ApiError {
    fn from(e: ForecastError) -> Self {
        let (status, code) = match &e {
            ForecastError::SeriesTooShort { .. } => (422, "series_too_short"),
            ForecastError::NoScorablePoints => (422, "no_scorable_points"),
            ForecastError::DegenerateDesign(_) => (422, "degenerate_design"),
            ForecastError::EmptyCandidates => (422, "empty_candidates"),
            ForecastError::MissingExogenous(_) => (422, "missing_exogenous"),
            ForecastError::InsufficientLags(_) => (422, "insufficient_lags"),
            ForecastError::IrregularSeries(_) => (400, "irregular_series"),
            ForecastError::InvalidSpec(_) => (400, "invalid_model_spec"),
            ForecastError::UnknownSeries { .. } => (404, "unknown_series"),
            ForecastError::Store(_) => (500, "forecast_store"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<LeakError> for ApiError {
    fn from(e: LeakError) -> Self {
        let (status, code) = match &e {
            LeakError::NoLeak => (422, "no_leak"),
            LeakError::UnknownPipeline(_) => (404, "unknown_pipeline"),
            LeakError::OutsidePipeline { .. } => (400, "outside_pipeline"),
            LeakError::UninstrumentedSegment(_) => (422, "uninstrumented_segment"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

/// State of one asynchronous forecast job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastJob {
    pub status: JobStatus,
    pub job_id: String,
    pub request: ForecastRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ForecastOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
}

/// Everything the handlers share. Reads go straight to the store; the
/// only in-memory mutable parts are the mode registry, alerts and forecast
/// jobs, and modes and finished jobs are mirrored to disk when the store
/// has a directory.
pub struct ApiState {
    pub store: Arc<CubeStore>,
    pub hierarchy: HierarchyMap,
    pub devices: DeviceMap,
    pub mesh: Option<Mesh>,
    pub exog: Option<Arc<BTreeMap<Timestamp, f64>>>,
    pub library: Arc<JobLibrary>,
    token: Option<String>,
    modes: RwLock<BTreeMap<String, AggMode>>,
    alerts: RwLock<Vec<LeakAlert>>,
    jobs: Mutex<BTreeMap<(ObjectId, Metric), ForecastJob>>,
    job_seq: AtomicU64,
    job_gate: watch::Sender<bool>,
    state_dir: Option<PathBuf>,
}

impl ApiState {
    pub fn new(store: Arc<CubeStore>) -> Self {
        let state_dir = store.path().map(|p| p.join("api"));
        ApiState {
            store,
            hierarchy: HierarchyMap::default(),
            devices: DeviceMap::default(),
            mesh: None,
            exog: None,
            library: Arc::new(JobLibrary::default()),
            token: None,
            modes: RwLock::new(BTreeMap::new()),
            alerts: RwLock::new(Vec::new()),
            jobs: Mutex::new(BTreeMap::new()),
            job_seq: AtomicU64::new(0),
            job_gate: watch::channel(true).0,
            state_dir,
        }
    }

    pub fn with_hierarchy(mut self, hierarchy: HierarchyMap) -> Self {
        self.hierarchy = hierarchy;
        self
    }

    pub fn with_devices(mut self, devices: DeviceMap) -> Self {
        self.devices = devices;
        self
    }

    pub fn with_mesh(mut self, mesh: Mesh) -> Self {
        self.mesh = Some(mesh);
        self
    }

    pub fn with_exog(mut self, exog: BTreeMap<Timestamp, f64>) -> Self {
        self.exog = Some(Arc::new(exog));
        self
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    /// Registers preset modes, then overlays any modes saved by earlier
    /// `PUT /hypertable/mode` calls.
    pub fn with_modes(self, modes: impl IntoIterator<Item = AggMode>) -> Self {
        {
            let mut reg = self.modes.write();
            for m in modes {
                reg.insert(m.id.clone(), m);
            }
            if let Some(saved) = self.load_saved_modes() {
                reg.extend(saved.into_iter().map(|m| (m.id.clone(), m)));
            }
        }
        self
    }

    pub fn writes_enabled(&self) -> bool {
        self.token.is_some()
    }

    pub fn mode(&self, id: &str) -> Option<AggMode> {
        self.modes.read().get(id).cloned()
    }

    pub fn modes(&self) -> Vec<AggMode> {
        self.modes.read().values().cloned().collect()
    }

    /// Adds alerts; the list stays ordered newest onset first.
    pub fn push_leak_alerts(&self, alerts: impl IntoIterator<Item = LeakAlert>) {
        let mut list = self.alerts.write();
        for a in alerts {
            if !list.contains(&a) {
                list.push(a);
            }
        }
        list.sort_by(|a, b| {
            b.onset
                .cmp(&a.onset)
                .then(a.pipeline_id.cmp(&b.pipeline_id))
                .then(a.est_pos.total_cmp(&b.est_pos))
        });
    }

    pub fn alerts(&self) -> Vec<LeakAlert> {
        self.alerts.read().clone()
    }

    /// Holds queued forecast jobs in `pending` until [`resume_jobs`](Self::resume_jobs).
    pub fn pause_jobs(&self) {
        self.job_gate.send_replace(false);
    }

    pub fn resume_jobs(&self) {
        self.job_gate.send_replace(true);
    }

    fn next_job_id(&self) -> String {
        format!("fc-{:06}", self.job_seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn load_saved_modes(&self) -> Option<Vec<AggMode>> {
        let text = std::fs::read_to_string(self.state_dir.as_ref()?.join("modes.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save_modes(&self) -> Result<(), ApiError> {
        let Some(dir) = &self.state_dir else { return Ok(()) };
        let modes = self.modes();
        std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(dir.join("modes.json"), serde_json::to_vec_pretty(&modes).unwrap_or_default()))
            .map_err(|e| ApiError::new(500, "state_io", e.to_string()))
    }

    fn job_file(&self, object: &ObjectId, metric: Metric) -> Option<PathBuf> {
        let safe: String = object
            .as_str()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        Some(self.state_dir.as_ref()?.join("forecasts").join(format!("{safe}.{metric}.json")))
    }

    fn save_job(&self, job: &ForecastJob) {
        let Some(path) = self.job_file(&job.request.object_id, job.request.metric) else { return };
        let written = path
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(job).unwrap_or_default()));
        if let Err(e) = written {
            log::warn!("could not save forecast job {}: {e}", job.job_id);
        }
    }

    fn job(&self, object: &ObjectId, metric: Metric) -> Option<ForecastJob> {
        if let Some(j) = self.jobs.lock().get(&(object.clone(), metric)) {
            return Some(j.clone());
        }
        let text = std::fs::read_to_string(self.job_file(object, metric)?).ok()?;
        serde_json::from_str(&text).ok()
    }
}

pub fn router(state: Arc<ApiState>, cors_allow: &[String], static_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/healthz", get(handlers::healthz))
        .route("/objects", get(handlers::objects))
        .route("/slice", get(handlers::slice))
        .route("/hypertable", get(handlers::hypertable))
        .route("/hypertable/mode", put(handlers::put_mode))
        .route("/hypertable/modes", get(handlers::list_modes))
        .route("/jobs/top-consumers", post(handlers::top_consumers))
        .route("/forecast/run", post(handlers::forecast_run))
        .route("/forecast/{object}/{metric}", get(handlers::forecast_get))
        .route("/alerts/leaks", get(handlers::leak_alerts))
        .route("/mesh/topology", get(handlers::mesh_topology))
        .route("/ingest/batch", post(handlers::ingest_batch))
        .route("/geojson", get(handlers::geojson))
        .route("/reports/efficiency", get(handlers::efficiency))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    if !cors_allow.is_empty() {
        let origin = if cors_allow.iter().any(|o| o == "*") {
            AllowOrigin::any()
        } else {
            AllowOrigin::list(cors_allow.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST, Method::PUT])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        );
    }
    app
}

/// Binds and serves in the background; returns the bound address.
pub async fn spawn(
    state: Arc<ApiState>,
    addr: SocketAddr,
    cors_allow: &[String],
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state, cors_allow, None);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("api server stopped: {e}");
        }
    });
    Ok((local, handle))
}

/// Serves until Ctrl-C.
pub async fn serve(config: &ApiConfig, state: Arc<ApiState>) -> Result<(), ApiError> {
    let addr = config.validate()?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::new(500, "bind_failed", e.to_string()))?;
    log::info!("listening on {}", listener.local_addr().map_or(addr, |a| a));
    let app = router(state, &config.cors_allow, config.static_dir.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::new(500, "server_failed", e.to_string()))
}
