//! HTTP API over the pipeline. Read-only endpoints run on the blocking pool in
//! parallel; job creation validates the plan and hands the job to a single
//! background worker thread.

use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{create_job, execute_job, JobHooks, JobOverrides, JobStore, PlanSpec, Session};
use crate::scene::{Project, PROJECT_FILE};
use crate::segmentation::{MaskOrigin, MaskSet};

/// JSON error body: HTTP status, machine code and message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status: status.as_u16(), code: code.to_string(), message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    /// Errors while validating a submitted plan are reported as `PLAN_INVALID`.
    fn plan(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::Parameter(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "PLAN_INVALID", e.to_string()),
            other => other.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "NOT_FOUND"),
            Error::Parameter(_) => (StatusCode::BAD_REQUEST, "INVALID_PARAMETER"),
            Error::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "VALIDATION_FAILED"),
            Error::DegenerateSegmentation => (StatusCode::UNPROCESSABLE_ENTITY, "DEGENERATE_SEGMENTATION"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "CONFLICT"),
            Error::JobDone(_) => (StatusCode::CONFLICT, "JOB_DONE"),
            Error::Backend { .. } => (StatusCode::BAD_GATEWAY, "BACKEND_FAILED"),
            Error::Format { .. } | Error::ImageRead { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "BAD_FILE"),
            Error::Dataset(_) => (StatusCode::INTERNAL_SERVER_ERROR, "DATASET_INVALID"),
            Error::Integrity(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INTEGRITY"),
            Error::Consistency(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INCONSISTENT"),
            Error::Diverged { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "DIVERGED"),
            Error::Io(_) | Error::Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct AppState {
    root: PathBuf,
    queue: Mutex<mpsc::Sender<(PathBuf, String)>>,
}

/// Scene id → project directory. A root that is itself a project is listed
/// under its project name, otherwise every child directory holding a project is.
fn scenes(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if root.join(PROJECT_FILE).is_file() {
        return Ok(vec![(Project::open(root)?.name, root.to_path_buf())]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|_| Error::NotFound(format!("project root {}", root.display())))?;
    for e in entries {
        let path = e?.path();
        if path.join(PROJECT_FILE).is_file() {
            out.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn scene_root(root: &Path, id: Option<&str>) -> Result<PathBuf> {
    let all = scenes(root)?;
    match id {
        Some(id) => all.into_iter().find(|(s, _)| s == id).map(|(_, p)| p).ok_or_else(|| Error::NotFound(format!("scene {id}"))),
        None if all.len() == 1 => Ok(all.into_iter().next().expect("one scene").1),
        None => Err(Error::param("request must name a `scene` when the root holds several")),
    }
}

fn job_root(root: &Path, job_id: &str) -> Result<PathBuf> {
    crate::pipeline::validate_id(job_id).map_err(|_| Error::NotFound(format!("job {job_id}")))?;
    scenes(root)?
        .into_iter()
        .map(|(_, p)| p)
        .find(|p| JobStore::new(p).exists(job_id))
        .ok_or_else(|| Error::NotFound(format!("job {job_id}")))
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn png_name(file: &str) -> Result<&str> {
    file.strip_suffix(".png").ok_or_else(|| Error::NotFound(file.to_string()))
}

#[derive(Serialize)]
struct SceneInfo {
    id: String,
    name: String,
    views: usize,
    width: usize,
    height: usize,
    has_base: bool,
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<SceneInfo>>> {
    blocking(move || {
        let mut out = Vec::new();
        for (id, path) in scenes(&st.root)? {
            let p = Project::open(&path)?;
            let ds = p.load_dataset()?;
            let (width, height) = ds.resolution();
            out.push(SceneInfo { id, name: p.name, views: ds.len(), width, height, has_base: p.base_checkpoint.is_some() });
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Serialize)]
struct ViewInfo {
    view_id: String,
    width: usize,
    height: usize,
    focal: f64,
}

async fn list_views(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<ViewInfo>>> {
    blocking(move || {
        let ds = Project::open(&scene_root(&st.root, Some(&id))?)?.load_dataset()?;
        Ok(Json(
            ds.views
                .iter()
                .map(|(v, p)| ViewInfo { view_id: v.view_id.clone(), width: v.width(), height: v.height(), focal: p.focal })
                .collect(),
        ))
    })
    .await
}

async fn view_png(State(st): State<Arc<AppState>>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || {
        let vid = png_name(&file)?;
        let ds = Project::open(&scene_root(&st.root, Some(&id))?)?.load_dataset()?;
        Ok(png(ds.find(vid)?.0.pixels.encode_png()?))
    })
    .await
}

#[derive(Serialize)]
struct MaskInfo {
    mask_id: u32,
    area: usize,
    origin: MaskOrigin,
}

/// Mask set with a row-major per-pixel label array for client-side hit testing.
#[derive(Serialize)]
struct MaskSetBody {
    view_id: String,
    width: usize,
    height: usize,
    masks: Vec<MaskInfo>,
    labels: Vec<u32>,
}

impl From<&MaskSet> for MaskSetBody {
    fn from(m: &MaskSet) -> Self {
        Self {
            view_id: m.view_id.clone(),
            width: m.width,
            height: m.height,
            masks: m.masks.iter().map(|r| MaskInfo { mask_id: r.mask_id, area: r.area, origin: r.origin }).collect(),
            labels: m.label_map(),
        }
    }
}

#[derive(Deserialize)]
struct SegmentRequest {
    scene: Option<String>,
    view_id: String,
    max_masks: Option<usize>,
    seed: Option<u64>,
}

async fn segment(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MaskSetBody>> {
    let req: SegmentRequest = parse(&body)?;
    blocking(move || {
        let overrides = JobOverrides { max_masks: req.max_masks, seed: req.seed, ..JobOverrides::default() };
        let session = Session::open(&scene_root(&st.root, req.scene.as_deref())?, &overrides)?;
        Ok(Json((&session.segment_view(&req.view_id)?).into()))
    })
    .await
}

#[derive(Deserialize)]
struct MatchRequest {
    scene: Option<String>,
    edit_image_ref: String,
    view_id: String,
    #[serde(default)]
    config: JobOverrides,
}

async fn match_view(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: MatchRequest = parse(&body)?;
    blocking(move || {
        let session = Session::open(&scene_root(&st.root, req.scene.as_deref())?, &req.config)?;
        let plan = session.build_plan(&PlanSpec { edit_image: req.edit_image_ref, style: Default::default() })?;
        let masks = session.segment_view(&req.view_id)?;
        Ok(Json(session.match_view(&plan, &masks)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct PreviewRequest {
    scene: Option<String>,
    view_id: String,
    plan: PlanSpec,
    #[serde(default)]
    config: JobOverrides,
}

async fn preview(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: PreviewRequest = parse(&body)?;
    blocking(move || {
        let session = Session::open(&scene_root(&st.root, req.scene.as_deref())?, &req.config)?;
        session.view(&req.view_id)?;
        Ok(png(session.preview(&req.view_id, &req.plan).map_err(ApiError::plan)?))
    })
    .await
}

#[derive(Deserialize)]
struct JobRequest {
    scene: Option<String>,
    plan: PlanSpec,
    #[serde(default)]
    config: JobOverrides,
    job_id: Option<String>,
}

#[derive(Serialize)]
struct JobCreated {
    job_id: String,
    state: crate::pipeline::JobState,
}

async fn submit_job(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: JobRequest = parse(&body)?;
    blocking(move || {
        let root = scene_root(&st.root, req.scene.as_deref())?;
        let job = match create_job(&root, req.plan, &req.config, req.job_id) {
            Err(e @ Error::Conflict(_)) => return Err(e.into()),
            other => other.map_err(ApiError::plan)?,
        };
        st.queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .send((root, job.job_id.clone()))
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "WORKER_STOPPED", "the job worker has stopped"))?;
        Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id: job.job_id, state: job.state })).into_response())
    })
    .await
}

async fn get_job(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let root = job_root(&st.root, &id)?;
        Ok(Json(JobStore::new(&root).load(&id)?).into_response())
    })
    .await
}

fn job_png(root: &Path, id: &str, kind: &str, file: &str) -> Result<Response> {
    let vid = png_name(file)?;
    crate::pipeline::validate_id(vid).map_err(|_| Error::NotFound(file.to_string()))?;
    let scene = job_root(root, id)?;
    let path = JobStore::new(&scene).artifact_dir(id).join(kind).join(format!("{vid}.png"));
    let bytes = std::fs::read(&path).map_err(|_| Error::NotFound(format!("{kind} of view {vid} for job {id}")))?;
    Ok(png(bytes))
}

async fn job_render(State(st): State<Arc<AppState>>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || Ok(job_png(&st.root, &id, "renders", &file)?)).await
}

async fn job_edit(State(st): State<Arc<AppState>>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    blocking(move || Ok(job_png(&st.root, &id, "edits", &file)?)).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint")
}

fn worker(rx: mpsc::Receiver<(PathBuf, String)>) {
    for (root, id) in rx {
        match execute_job(&root, &id, &JobHooks::default()) {
            Ok(job) => log::info!("job {id} finished in state {}", job.state),
            Err(e) => log::error!("job {id}: {e}"),
        }
    }
}

/// Router over a directory of projects (or a single project directory).
/// Spawns the job worker thread, which exits when the router is dropped.
pub fn router(root: &Path) -> Router {
    let (tx, rx) = mpsc::channel();
    std::thread::Builder::new()
        .name("iceg-jobs".into())
        .spawn(move || worker(rx))
        .expect("spawn job worker");
    let state = Arc::new(AppState { root: root.to_path_buf(), queue: Mutex::new(tx) });
    Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/{id}/views", get(list_views))
        .route("/api/scenes/{id}/views/{file}", get(view_png))
        .route("/api/segment", post(segment))
        .route("/api/match", post(match_view))
        .route("/api/preview", post(preview))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/renders/{file}", get(job_render))
        .route("/api/jobs/{id}/edits/{file}", get(job_edit))
        .fallback(not_found)
        .with_state(state)
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(root: &Path, addr: std::net::SocketAddr) -> Result<()> {
    scenes(root)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(root)).await?;
    Ok(())
}

/// Blocking entry point used by the CLI.
pub fn run(root: &Path, addr: std::net::SocketAddr) -> Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(root, addr))
}
