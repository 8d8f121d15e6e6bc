//! HTTP service behind the explorer UI. Searches and saliency sweeps run as
//! background jobs on a bounded pool and are polled by id.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use voxelfm_core::encoder::EncoderState;
use voxelfm_core::semantics::{ofd_saliency, semantic_search};
use voxelfm_core::volume::WindowSpec;
use voxelfm_core::Volume;

use crate::config::SearchDefaults;
use crate::dataset::Entry;
use crate::render::{encode_png, quantize, render_similarity, render_slice, slice_with, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchHit {
    pub target_id: String,
    pub best_position: [usize; 3],
    pub best_similarity: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaliencySummary {
    pub volume_id: String,
    pub argmax_position: [usize; 3],
    pub max_distance: f64,
    pub positions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchRequest {
    pub source_id: String,
    pub center: [usize; 3],
    #[serde(rename = "box")]
    pub box_size: [usize; 3],
    pub target_ids: Vec<String>,
    pub stride: Option<[usize; 3]>,
}

enum Output {
    Search(Vec<SearchHit>),
    Saliency(SaliencySummary),
}

struct Job {
    status: JobStatus,
    output: Option<Output>,
    /// Voxel-space maps keyed by volume id; immutable once the job is done.
    maps: HashMap<String, Arc<Volume>>,
    error: Option<String>,
}

struct Inner {
    encoder: EncoderState<f32>,
    volumes: Vec<Entry>,
    defaults: SearchDefaults,
    jobs: Mutex<HashMap<String, Job>>,
    next_id: AtomicU64,
    pool: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(encoder: EncoderState<f32>, volumes: Vec<Entry>, defaults: SearchDefaults, workers: usize) -> Self {
        AppState(Arc::new(Inner {
            encoder,
            volumes,
            defaults,
            jobs: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            pool: Arc::new(Semaphore::new(workers.max(1))),
        }))
    }

    fn volume(&self, id: &str) -> Result<&Entry, ApiError> {
        self.0.volumes.iter().find(|e| e.id == id).ok_or_else(|| ApiError::not_found(format!("no volume {id:?}")))
    }

    /// Moves a job forward; finished jobs never change again.
    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        let mut jobs = self.0.jobs.lock().expect("job registry poisoned");
        if let Some(job) = jobs.get_mut(id) {
            if !matches!(job.status, JobStatus::Done | JobStatus::Failed) {
                f(job);
            }
        }
    }

    fn submit<F>(&self, work: F) -> String
    where
        F: FnOnce(&Inner) -> anyhow::Result<(Output, HashMap<String, Arc<Volume>>)> + Send + 'static,
    {
        let id = self.0.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        self.0.jobs.lock().expect("job registry poisoned").insert(
            id.clone(),
            Job { status: JobStatus::Pending, output: None, maps: HashMap::new(), error: None },
        );
        let state = self.clone();
        let job_id = id.clone();
        tokio::spawn(async move {
            let _permit = state.0.pool.clone().acquire_owned().await.expect("pool never closes");
            state.update(&job_id, |j| j.status = JobStatus::Running);
            let inner = state.0.clone();
            let result = tokio::task::spawn_blocking(move || work(&inner)).await;
            state.update(&job_id, |j| match result {
                Ok(Ok((output, maps))) => {
                    j.output = Some(output);
                    j.maps = maps;
                    j.status = JobStatus::Done;
                }
                Ok(Err(e)) => {
                    j.error = Some(format!("{e:#}"));
                    j.status = JobStatus::Failed;
                }
                Err(e) => {
                    j.error = Some(e.to_string());
                    j.status = JobStatus::Failed;
                }
            });
        });
        id
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: m.into() }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: m.into() }
    }

    fn conflict(m: impl Into<String>) -> Self {
        Self { status: StatusCode::CONFLICT, message: m.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Serialize)]
struct VolumeInfo {
    id: String,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    has_mask: bool,
}

async fn list_volumes(State(app): State<AppState>) -> Json<Vec<VolumeInfo>> {
    Json(
        app.0
            .volumes
            .iter()
            .map(|e| VolumeInfo {
                id: e.id.clone(),
                shape: e.volume.shape(),
                spacing_mm: e.volume.spacing_mm(),
                origin_mm: e.volume.origin_mm(),
                has_mask: e.mask.is_some(),
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: Option<String>,
    index: Option<usize>,
    preset: Option<String>,
}

fn parse_axis(axis: Option<&str>) -> Result<Axis, ApiError> {
    axis.unwrap_or("z").parse().map_err(|e: anyhow::Error| ApiError::bad_request(e.to_string()))
}

async fn volume_slice(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Response, ApiError> {
    let entry = app.volume(&id)?;
    let axis = parse_axis(q.axis.as_deref())?;
    let preset = q.preset.as_deref().unwrap_or("blood");
    let window =
        WindowSpec::preset(preset).ok_or_else(|| ApiError::bad_request(format!("unknown preset {preset:?}")))?;
    let img = render_slice(&entry.volume, axis, q.index.unwrap_or(0), window)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(png_response(encode_png(&img).map_err(|e| ApiError::bad_request(e.to_string()))?))
}

async fn submit_search(
    State(app): State<AppState>,
    Json(req): Json<SearchRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    if req.target_ids.is_empty() {
        return Err(ApiError::bad_request("target_ids must not be empty"));
    }
    let stride = req.stride.unwrap_or(app.0.defaults.window_stride());
    if req.box_size.contains(&0) || stride.contains(&0) {
        return Err(ApiError::bad_request("box and stride must be >= 1"));
    }
    app.volume(&req.source_id)?;
    for t in &req.target_ids {
        app.volume(t)?;
    }
    let job_id = app.submit(move |inner| {
        let find = |id: &str| inner.volumes.iter().find(|e| e.id == id).expect("validated on submit");
        let source = find(&req.source_id);
        let targets: Vec<(u64, &Volume)> =
            req.target_ids.iter().enumerate().map(|(i, t)| (i as u64, &find(t).volume)).collect();
        let results =
            semantic_search(&inner.encoder, &source.volume, req.center, req.box_size, &targets, stride)?;
        let mut hits = Vec::new();
        let mut maps = HashMap::new();
        for (r, id) in results.iter().zip(&req.target_ids) {
            hits.push(SearchHit {
                target_id: id.clone(),
                best_position: r.best_position,
                best_similarity: r.best_similarity,
            });
            maps.insert(id.clone(), Arc::new(r.to_volume(&find(id).volume)?));
        }
        Ok((Output::Search(hits), maps))
    });
    Ok(Json(serde_json::json!({ "job_id": job_id })))
}

fn job_view(app: &AppState, job_id: &str) -> Result<serde_json::Value, ApiError> {
    let jobs = app.0.jobs.lock().expect("job registry poisoned");
    let job = jobs.get(job_id).ok_or_else(|| ApiError::not_found(format!("no job {job_id:?}")))?;
    let results = match &job.output {
        Some(Output::Search(hits)) => serde_json::to_value(hits),
        Some(Output::Saliency(s)) => serde_json::to_value(vec![s]),
        None => Ok(serde_json::json!([])),
    }
    .expect("job output serializes");
    let mut v = serde_json::json!({ "job_id": job_id, "status": job.status, "results": results });
    if let Some(e) = &job.error {
        v["error"] = e.clone().into();
    }
    Ok(v)
}

async fn search_status(
    State(app): State<AppState>,
    UrlPath(job_id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    job_view(&app, &job_id).map(Json)
}

#[derive(Deserialize)]
struct MapQuery {
    axis: Option<String>,
    index: Option<usize>,
}

fn job_map(app: &AppState, job_id: &str, volume_id: &str) -> Result<Arc<Volume>, ApiError> {
    let jobs = app.0.jobs.lock().expect("job registry poisoned");
    let job = jobs.get(job_id).ok_or_else(|| ApiError::not_found(format!("no job {job_id:?}")))?;
    if job.status != JobStatus::Done {
        return Err(ApiError::conflict(format!("job {job_id} is {:?}", job.status)));
    }
    job.maps.get(volume_id).cloned().ok_or_else(|| ApiError::not_found(format!("job {job_id} has no map for {volume_id:?}")))
}

async fn search_heatmap(
    State(app): State<AppState>,
    UrlPath((job_id, target_id)): UrlPath<(String, String)>,
    Query(q): Query<MapQuery>,
) -> Result<Response, ApiError> {
    let map = job_map(&app, &job_id, &target_id)?;
    let axis = parse_axis(q.axis.as_deref())?;
    let img = render_similarity(map.grid(), axis, q.index.unwrap_or(0))
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(png_response(encode_png(&img).map_err(|e| ApiError::bad_request(e.to_string()))?))
}

#[derive(Deserialize)]
struct SaliencyQuery {
    occ: Option<usize>,
    stride: Option<usize>,
}

async fn submit_saliency(
    State(app): State<AppState>,
    UrlPath(volume_id): UrlPath<String>,
    Query(q): Query<SaliencyQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    app.volume(&volume_id)?;
    let occ = q.occ.map(|o| [o; 3]).unwrap_or(app.0.defaults.occluder);
    let stride = q.stride.map(|s| [s; 3]).unwrap_or(occ);
    if occ.contains(&0) || stride.contains(&0) {
        return Err(ApiError::bad_request("occ and stride must be >= 1"));
    }
    let job_id = app.submit(move |inner| {
        let entry = inner.volumes.iter().find(|e| e.id == volume_id).expect("validated on submit");
        let map = ofd_saliency(&inner.encoder, &entry.volume, occ, stride, inner.defaults.fill)?;
        let summary = SaliencySummary {
            volume_id: volume_id.clone(),
            argmax_position: map.argmax(),
            max_distance: map.distance.data().iter().copied().fold(0.0, f64::max),
            positions: map.distance.len(),
        };
        let maps = HashMap::from([(volume_id.clone(), Arc::new(map.to_volume(&entry.volume)?))]);
        Ok((Output::Saliency(summary), maps))
    });
    Ok(Json(serde_json::json!({ "job_id": job_id })))
}

async fn saliency_map(
    State(app): State<AppState>,
    UrlPath((job_id, volume_id)): UrlPath<(String, String)>,
    Query(q): Query<MapQuery>,
) -> Result<Response, ApiError> {
    let map = job_map(&app, &job_id, &volume_id)?;
    let axis = parse_axis(q.axis.as_deref())?;
    let max = map.grid().max_value();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = slice_with(map.grid(), axis, q.index.unwrap_or(0), |d| quantize(d * scale))
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(png_response(encode_png(&img).map_err(|e| ApiError::bad_request(e.to_string()))?))
}

pub fn router(app: AppState, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/volumes", get(list_volumes))
        .route("/api/volumes/{id}/slice", get(volume_slice))
        .route("/api/search", post(submit_search))
        .route("/api/search/{job_id}", get(search_status))
        .route("/api/search/{job_id}/heatmap/{target_id}", get(search_heatmap))
        .route("/api/saliency/{volume_id}", get(submit_saliency))
        .route("/api/saliency/jobs/{job_id}", get(search_status))
        .route("/api/saliency/jobs/{job_id}/map/{volume_id}", get(saliency_map))
        .with_state(app);
    match assets {
        Some(dir) if dir.is_dir() => api.fallback_service(ServeDir::new(dir)),
        _ => api,
    }
}
