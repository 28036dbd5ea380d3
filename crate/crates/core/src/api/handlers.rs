use std::collections::{BTreeSet, HashMap};
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ApiError, ApiState, ForecastJob, JobStatus, DEFAULT_PAGE_LIMIT, MAX_PAGE_LIMIT};
use crate::aggregate::{default_workers, run_job, top_consumers_spec};
use crate::efficiency::efficiency_report;
use crate::forecast::{run_forecast, ForecastRequest};
use crate::geo::features_from_table;
use crate::hypertable::{self, AggMode, CursorMode, TimeCursor};
use crate::ingest::{immerse, Batch};
use crate::model::{MetricKey, ObjectId, Window};
use crate::store::{Agg, CubeStore, Grain, ObjectSel, SliceSpec};

type Params = HashMap<String, String>;
type ApiResult = Result<Response, ApiError>;

/// Attempts to read one consistent store version across a multi-query read.
const PIN_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub total: usize,
    pub limit: usize,
    pub offset: usize,
    pub items: Vec<T>,
}

impl<T: Clone> Page<T> {
    pub fn of(all: &[T], limit: usize, offset: usize) -> Self {
        Page {
            total: all.len(),
            limit,
            offset,
            items: all.iter().skip(offset).take(limit).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub object_id: ObjectId,
    pub metrics: Vec<MetricKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<[f64; 2]>,
}

/// The in-process form of `GET /objects`: every stored or mapped object.
pub fn objects_listing(state: &ApiState) -> Vec<ObjectInfo> {
    let store = &state.store;
    let keys = store.metric_keys();
    let locations = state.devices.object_locations();
    let mut ids = store.objects();
    ids.extend(state.hierarchy.objects());
    ids.into_iter()
        .map(|o| ObjectInfo {
            metrics: keys.iter().filter(|k| store.has_stream(&o, k)).cloned().collect(),
            path: state.hierarchy.paths.get(&o).cloned(),
            location: locations.get(&o).copied(),
            object_id: o,
        })
        .collect()
}

fn param<T: FromStr>(p: &Params, name: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    match p.get(name).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e| ApiError::bad_request("bad_param", format!("{name}: {e}"))),
    }
}

fn required<T: FromStr>(p: &Params, name: &str) -> Result<T, ApiError>
where
    T::Err: std::fmt::Display,
{
    param(p, name)?.ok_or_else(|| ApiError::bad_request("missing_param", format!("`{name}` is required")))
}

fn page(p: &Params) -> Result<(usize, usize), ApiError> {
    let limit = param(p, "limit")?.unwrap_or(DEFAULT_PAGE_LIMIT);
    if limit > MAX_PAGE_LIMIT {
        return Err(ApiError::bad_request("bad_param", format!("limit above {MAX_PAGE_LIMIT}")));
    }
    Ok((limit, param(p, "offset")?.unwrap_or(0)))
}

fn window(p: &Params) -> Result<Window, ApiError> {
    let w = Window::new(required(p, "from")?, required(p, "to")?);
    if !w.is_valid() {
        return Err(ApiError::bad_request("bad_param", "`from` must be before `to`"));
    }
    Ok(w)
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request("bad_body", e.to_string()))
}

/// `objects` (comma list, absent or `*` for all), `metrics` (comma list of
/// metric keys), `from`, `to`, `grain` (default raw), `agg` (default sum).
pub fn slice_spec_from_query(p: &HashMap<String, String>) -> Result<SliceSpec, ApiError> {
    let objects = match p.get("objects").map(|s| s.trim()) {
        None | Some("") | Some("*") => ObjectSel::All,
        Some(list) => ObjectSel::Set(list.split(',').map(|s| ObjectId::new(s.trim())).collect()),
    };
    let metrics = p
        .get("metrics")
        .ok_or_else(|| ApiError::bad_request("missing_param", "`metrics` is required"))?
        .split(',')
        .map(|m| {
            m.trim()
                .parse::<MetricKey>()
                .map_err(|e| ApiError::bad_request("bad_param", e.to_string()))
        })
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(SliceSpec::new(
        objects,
        metrics,
        window(p)?,
        param::<Grain>(p, "grain")?.unwrap_or(Grain::Raw),
        param::<Agg>(p, "agg")?.unwrap_or(Agg::Sum),
    ))
}

fn cursor(p: &Params) -> Result<TimeCursor, ApiError> {
    let mode = match p.get("cursor").map(String::as_str).unwrap_or("archive") {
        "archive" => CursorMode::Archive,
        "current" => CursorMode::Current,
        "forecast" => CursorMode::Forecast,
        "scenario" => CursorMode::Scenario,
        other => return Err(ApiError::bad_request("bad_param", format!("cursor: unknown mode `{other}`"))),
    };
    Ok(TimeCursor {
        interval: window(p)?,
        mode,
        scenario: p.get("scenario").cloned().filter(|s| !s.is_empty()),
    })
}

fn pinned<T>(store: &CubeStore, mut read: impl FnMut() -> Result<T, ApiError>) -> Result<T, ApiError> {
    let mut attempt = 0;
    loop {
        let before = store.version();
        let out = read();
        attempt += 1;
        if store.version() == before || attempt >= PIN_ATTEMPTS {
            return out;
        }
    }
}

async fn blocking<T: Send + 'static>(work: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::new(500, "task_failed", e.to_string()))?
}

fn authorize(state: &ApiState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.token else {
        return Err(ApiError::new(403, "writes_disabled", "no write token configured"));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(token.as_str()) {
        return Err(ApiError::new(401, "unauthorized", "missing or wrong bearer token"));
    }
    Ok(())
}

pub async fn healthz(State(state): State<Arc<ApiState>>) -> Json<Value> {
    Json(json!({"status": "ok", "store_version": state.store.version()}))
}

pub async fn objects(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let (limit, offset) = page(&p)?;
    let st = state.clone();
    let all = blocking(move || pinned(&st.store, || Ok(objects_listing(&st)))).await?;
    Ok(Json(Page::of(&all, limit, offset)).into_response())
}

pub async fn slice(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let spec = slice_spec_from_query(&p)?;
    let (limit, offset) = page(&p)?;
    let slice = blocking(move || Ok(state.store.query_slice(&spec)?)).await?;
    let cells = Page::of(&slice.cells, limit, offset);
    Ok(Json(json!({
        "spec": slice.spec,
        "version": slice.version,
        "total": cells.total,
        "limit": limit,
        "offset": offset,
        "cells": cells.items,
    }))
    .into_response())
}

fn build_table(state: &ApiState, p: &Params) -> Result<hypertable::HyperTable, ApiError> {
    let id: String = required(p, "mode")?;
    let mode = state
        .mode(&id)
        .ok_or_else(|| ApiError::not_found("unknown_mode", format!("no aggregation mode `{id}`")))?;
    let cursor = cursor(p)?;
    pinned(&state.store, || {
        Ok(hypertable::build(&state.store, &state.hierarchy, &mode, &cursor)?)
    })
}

pub async fn hypertable(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let table = blocking(move || build_table(&state, &p)).await?;
    Ok(Json(table.to_json_value()).into_response())
}

pub async fn list_modes(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let (limit, offset) = page(&p)?;
    Ok(Json(Page::of(&state.modes(), limit, offset)).into_response())
}

pub async fn put_mode(State(state): State<Arc<ApiState>>, headers: HeaderMap, bytes: Bytes) -> ApiResult {
    authorize(&state, &headers)?;
    let mode: AggMode = body(&bytes)?;
    if mode.id.trim().is_empty() {
        return Err(ApiError::bad_request("invalid_mode", "mode id must be non-empty"));
    }
    mode.validate(&state.hierarchy)?;
    mode.validate_columns(&state.store)?;
    state.modes.write().insert(mode.id.clone(), mode.clone());
    state.save_modes()?;
    Ok(Json(mode).into_response())
}

#[derive(Debug, Deserialize)]
struct TopConsumersBody {
    from: i64,
    to: i64,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_reduce")]
    reduce: String,
    #[serde(default)]
    workers: Option<usize>,
}

fn default_k() -> usize {
    10
}

fn default_reduce() -> String {
    "sum".into()
}

pub async fn top_consumers(State(state): State<Arc<ApiState>>, bytes: Bytes) -> ApiResult {
    let b: TopConsumersBody = body(&bytes)?;
    let spec = top_consumers_spec(
        Window::new(b.from, b.to),
        b.k,
        &b.reduce,
        b.workers.unwrap_or_else(default_workers),
    );
    let result = blocking(move || Ok(run_job(&spec, &state.store, &state.library)?)).await?;
    Ok(Json(result).into_response())
}

pub async fn forecast_run(State(state): State<Arc<ApiState>>, bytes: Bytes) -> ApiResult {
    let request: ForecastRequest = body(&bytes)?;
    if request.horizon == 0 {
        return Err(ApiError::bad_request("bad_body", "horizon must be at least 1"));
    }
    if !state.store.objects().contains(&request.object_id) {
        return Err(ApiError::not_found("unknown_object", format!("no object `{}`", request.object_id)));
    }
    if !state.store.has_stream(&request.object_id, &MetricKey::Actual(request.metric)) {
        return Err(ApiError::not_found(
            "unknown_metric",
            format!("no `{}` series for `{}`", request.metric, request.object_id),
        ));
    }
    let job_id = state.next_job_id();
    let job = ForecastJob {
        status: JobStatus::Pending,
        job_id: job_id.clone(),
        request: request.clone(),
        result: None,
        error: None,
    };
    state
        .jobs
        .lock()
        .insert((request.object_id.clone(), request.metric), job.clone());

    let st = state.clone();
    let mut gate = state.job_gate.subscribe();
    tokio::spawn(async move {
        let _ = gate.wait_for(|open| *open).await;
        let worker = st.clone();
        let req = request.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            run_forecast(&worker.store, &req, worker.exog.as_deref()).map_err(ApiError::from)
        })
        .await
        .unwrap_or_else(|e| Err(ApiError::new(500, "task_failed", e.to_string())));
        let mut done = job;
        done.status = JobStatus::Done;
        match outcome {
            Ok(o) => done.result = Some(o),
            Err(e) => done.error = Some(e),
        }
        st.save_job(&done);
        let mut jobs = st.jobs.lock();
        let key = (request.object_id.clone(), request.metric);
        // A newer job for the same series may have replaced this one.
        if jobs.get(&key).is_some_and(|j| j.job_id == done.job_id) {
            jobs.insert(key, done);
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id, "status": "pending"}))).into_response())
}

pub async fn forecast_get(State(state): State<Arc<ApiState>>, Path((object, metric)): Path<(String, String)>) -> ApiResult {
    let object = ObjectId::new(object);
    if !state.store.objects().contains(&object) {
        return Err(ApiError::not_found("unknown_object", format!("no object `{object}`")));
    }
    let metric = match metric.parse::<MetricKey>() {
        Ok(MetricKey::Actual(m)) if state.store.has_stream(&object, &MetricKey::Actual(m)) => m,
        _ => return Err(ApiError::not_found("unknown_metric", format!("no `{metric}` series for `{object}`"))),
    };
    let job = state
        .job(&object, metric)
        .ok_or_else(|| ApiError::not_found("no_forecast", format!("no forecast job for {object}/{metric}")))?;
    Ok(Json(job).into_response())
}

pub async fn leak_alerts(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let (limit, offset) = page(&p)?;
    Ok(Json(Page::of(&state.alerts(), limit, offset)).into_response())
}

pub async fn mesh_topology(State(state): State<Arc<ApiState>>) -> ApiResult {
    match &state.mesh {
        Some(mesh) => Ok(Json(mesh).into_response()),
        None => Err(ApiError::not_found("no_mesh", "no mesh topology attached")),
    }
}

pub async fn ingest_batch(State(state): State<Arc<ApiState>>, headers: HeaderMap, bytes: Bytes) -> ApiResult {
    authorize(&state, &headers)?;
    let batch: Batch = body(&bytes)?;
    let receipt = blocking(move || Ok(immerse(&batch, &state.store)?)).await?;
    Ok(Json(receipt).into_response())
}

pub async fn geojson(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let export = blocking(move || {
        let table = build_table(&state, &p)?;
        Ok(features_from_table(&table, &state.devices.object_locations()))
    })
    .await?;
    Ok(Json(export.collection).into_response())
}

pub async fn efficiency(State(state): State<Arc<ApiState>>, Query(p): Query<Params>) -> ApiResult {
    let w = window(&p)?;
    let report = blocking(move || pinned(&state.store, || Ok(efficiency_report(&state.store, w)))).await?;
    Ok(Json(report).into_response())
}
