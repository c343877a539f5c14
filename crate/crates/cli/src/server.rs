//! Session HTTP API.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/session` | manifest plus view ids |
//! | GET | `/api/candidates` | `[{view_id, seed, image_url}]` |
//! | GET | `/api/images/{name}` | PNG artifact, e.g. `candidates/view1_seed0.png`, `gt.png` |
//! | POST | `/api/select-gt` | JSON `{view_id}` or multipart `view_id` + `image` |
//! | POST | `/api/phase/{op}` | `candidates`, `fit`, `propagate`, `edit`, `lift`, `eval`; starts a job |
//! | GET | `/api/progress` | latest job snapshot |
//! | GET | `/api/metrics` | `report.json` |
//! | GET | `/api/losslog` | loss records as JSON lines, `?since=N` skips the first N |
//!
//! Only one mutating request runs at a time. The session lock file also
//! excludes concurrent CLI writers.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use c3edit::evalmetrics::PyramidEmbedder;
use c3edit::image::ViewImage;
use c3edit::pipeline::{
    candidate_file_name, load_masks, read_manifest, EditSession, Phase, Progress, SessionLock, SessionManifest,
    VisitInfo, LOSS_LOG_FILE, REPORT_FILE,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct JobSnapshot {
    pub job_id: Option<u64>,
    pub operation: Option<String>,
    pub running: bool,
    pub error: Option<String>,
    pub phase: Option<String>,
    pub iteration: usize,
    pub total: usize,
    pub latest_loss: Option<f64>,
    pub visit: Option<VisitInfo>,
}

struct Inner {
    dir: PathBuf,
    job: Mutex<JobSnapshot>,
    next_job: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self(Arc::new(Inner {
            dir: dir.into(),
            job: Mutex::new(JobSnapshot::default()),
            next_job: AtomicU64::new(1),
        }))
    }

    fn snapshot(&self) -> JobSnapshot {
        self.0.job.lock().unwrap().clone()
    }

    /// Claims the single job slot; `None` when a job is already running.
    fn claim(&self, operation: &str) -> Option<u64> {
        let mut job = self.0.job.lock().unwrap();
        if job.running {
            return None;
        }
        let id = self.0.next_job.fetch_add(1, Ordering::SeqCst);
        *job = JobSnapshot {
            job_id: Some(id),
            operation: Some(operation.to_string()),
            running: true,
            ..JobSnapshot::default()
        };
        Some(id)
    }

    fn finish(&self, error: Option<String>) {
        let mut job = self.0.job.lock().unwrap();
        job.running = false;
        job.error = error;
    }

    fn publish(&self, p: &Progress) {
        let mut job = self.0.job.lock().unwrap();
        job.phase = Some(p.phase.clone());
        job.iteration = p.iteration;
        job.total = p.total;
        job.latest_loss = p.latest_loss;
        job.visit = p.visit;
    }
}

pub fn router(dir: impl Into<PathBuf>) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/candidates", get(candidates))
        .route("/api/images/{*name}", get(image))
        .route("/api/select-gt", post(select_gt))
        .route("/api/phase/{op}", post(start_phase))
        .route("/api/progress", get(progress))
        .route("/api/metrics", get(metrics))
        .route("/api/losslog", get(losslog))
        .with_state(AppState::new(dir))
}

pub async fn serve(dir: PathBuf, host: &str, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("serving {} on http://{}", dir.display(), listener.local_addr()?);
    axum::serve(listener, router(dir)).await?;
    Ok(())
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<c3edit::Error> for ApiError {
    fn from(e: c3edit::Error) -> Self {
        use c3edit::Error as E;
        let status = match &e {
            E::Phase { .. } | E::Locked(_) => StatusCode::CONFLICT,
            E::UnknownView(_) => StatusCode::NOT_FOUND,
            E::Shape(_) | E::Invalid(_) | E::Parse { .. } | E::Image(_) => StatusCode::BAD_REQUEST,
            E::Numeric { .. } | E::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> c3edit::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Serialize)]
struct SessionBody {
    #[serde(flatten)]
    manifest: SessionManifest,
    view_ids: Vec<u32>,
}

fn manifest_and_views(dir: &Path) -> c3edit::Result<(SessionManifest, Vec<u32>)> {
    let m = read_manifest(dir)?;
    let (_, cams) = c3edit::scene::load_scene(dir.join(&m.scene_path))?;
    let mut ids: Vec<u32> = cams.iter().map(|c| c.id).collect();
    if let Some(subset) = &m.config.view_subset {
        ids.retain(|id| subset.contains(id));
    }
    ids.sort_unstable();
    Ok((m, ids))
}

async fn session(State(st): State<AppState>) -> ApiResult<Json<SessionBody>> {
    let dir = st.0.dir.clone();
    let (manifest, view_ids) = blocking(move || manifest_and_views(&dir)).await?;
    Ok(Json(SessionBody { manifest, view_ids }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CandidateEntry {
    pub view_id: u32,
    pub seed: u64,
    pub image_url: String,
}

async fn candidates(State(st): State<AppState>) -> ApiResult<Json<Vec<CandidateEntry>>> {
    let dir = st.0.dir.clone();
    let (m, ids) = blocking(move || manifest_and_views(&dir)).await?;
    if m.phase < Phase::CandidatesReady {
        return Ok(Json(Vec::new()));
    }
    let list = ids
        .iter()
        .flat_map(|&view_id| {
            m.candidate_seeds.iter().map(move |&seed| CandidateEntry {
                view_id,
                seed,
                image_url: format!("/api/images/candidates/{}", candidate_file_name(view_id, seed)),
            })
        })
        .collect();
    Ok(Json(list))
}

fn artifact_path(dir: &Path, name: &str) -> Option<PathBuf> {
    let parts: Vec<&str> = name.split('/').collect();
    let safe = |p: &str| {
        !p.is_empty() && p != "." && p != ".." && p.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
    };
    if !name.ends_with(".png") || !parts.iter().all(|p| safe(p)) {
        return None;
    }
    match parts.as_slice() {
        [_file] | ["candidates" | "edits" | "targets", _file] => {
            Some(parts.iter().fold(dir.to_path_buf(), |p, s| p.join(s)))
        }
        _ => None,
    }
}

async fn image(State(st): State<AppState>, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    let path = artifact_path(&st.0.dir, &name).ok_or_else(|| bad_request(format!("invalid image name `{name}`")))?;
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(_) => Err(ApiError(StatusCode::NOT_FOUND, format!("no image `{name}`"))),
    }
}

#[derive(Deserialize)]
struct SelectBody {
    view_id: u32,
}

async fn read_selection(req: Request) -> ApiResult<(u32, Option<Vec<u8>>)> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        let Json(body) = Json::<SelectBody>::from_request(req, &())
            .await
            .map_err(|e| bad_request(e.body_text()))?;
        return Ok((body.view_id, None));
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| bad_request(e.body_text()))?;
    let (mut view_id, mut image) = (None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad_request(e.body_text()))? {
        match field.name() {
            Some("view_id") => {
                let text = field.text().await.map_err(|e| bad_request(e.body_text()))?;
                view_id = Some(
                    text.trim()
                        .parse::<u32>()
                        .map_err(|_| bad_request(format!("bad view_id `{text}`")))?,
                );
            }
            Some("image") => image = Some(field.bytes().await.map_err(|e| bad_request(e.body_text()))?.to_vec()),
            _ => {}
        }
    }
    let view_id = view_id.ok_or_else(|| bad_request("missing view_id"))?;
    Ok((view_id, image.filter(|b| !b.is_empty())))
}

async fn select_gt(State(st): State<AppState>, req: Request) -> ApiResult<Response> {
    let (view_id, png) = read_selection(req).await?;
    if st.claim("select-gt").is_none() {
        return Err(ApiError(StatusCode::CONFLICT, "a job is already running".into()));
    }
    let dir = st.0.dir.clone();
    let result = blocking(move || {
        let override_image = png.map(|b| ViewImage::decode_png(view_id, &b)).transpose()?;
        let _lock = SessionLock::acquire(&dir)?;
        let mut s = EditSession::open(&dir)?;
        s.select_gt(view_id, override_image)?;
        Ok(s.manifest().clone())
    })
    .await;
    st.finish(result.as_ref().err().map(|e| e.1.clone()));
    Ok(Json(result?).into_response())
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Candidates,
    Fit,
    Propagate,
    Edit,
    Lift,
    Eval,
}

impl Job {
    fn parse(op: &str) -> Option<(Job, &'static str, Phase)> {
        Some(match op {
            "candidates" => (Job::Candidates, "candidates", Phase::Created),
            "fit" => (Job::Fit, "fit", Phase::GtSelected),
            "propagate" => (Job::Propagate, "propagate", Phase::GtFitted),
            "edit" => (Job::Edit, "edit", Phase::Propagated),
            "lift" => (Job::Lift, "lift", Phase::Edited),
            "eval" => (Job::Eval, "eval", Phase::Edited),
            _ => return None,
        })
    }

    fn run(self, s: &mut EditSession, mask_dir: Option<&Path>) -> c3edit::Result<()> {
        match self {
            Job::Candidates => s.generate_candidates(),
            Job::Fit => s.fit_gt(),
            Job::Propagate => s.propagate(),
            Job::Edit => s.edit_all_views().map(drop),
            Job::Lift => {
                let masks = mask_dir.map(|d| load_masks(d, s.cameras())).transpose()?;
                s.lift_to_3d(masks.as_ref()).map(drop)
            }
            Job::Eval => s.evaluate(&PyramidEmbedder).map(drop),
        }
    }
}

async fn start_phase(
    State(st): State<AppState>,
    UrlPath(op): UrlPath<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let (job, name, required) =
        Job::parse(&op).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown operation `{op}`")))?;
    let Some(job_id) = st.claim(name) else {
        return Err(ApiError(StatusCode::CONFLICT, "a job is already running".into()));
    };
    let dir = st.0.dir.clone();
    let prepared = blocking(move || {
        let lock = SessionLock::acquire(&dir)?;
        let s = EditSession::open(&dir)?;
        let phase_ok = match job {
            Job::Eval => s.phase() >= required,
            _ => s.phase() == required,
        };
        if !phase_ok {
            return Err(c3edit::Error::Phase {
                operation: name,
                required: required.to_string(),
                actual: s.phase().to_string(),
            });
        }
        Ok((lock, s))
    })
    .await;
    let (lock, mut s) = match prepared {
        Ok(v) => v,
        Err(e) => {
            st.finish(Some(e.1.clone()));
            return Err(e);
        }
    };
    let mask_dir = params.get("mask_dir").map(PathBuf::from);
    let worker = st.clone();
    let observer_state = st.clone();
    s.set_observer(Box::new(move |p, _| observer_state.publish(p)));
    tokio::task::spawn_blocking(move || {
        let result = job.run(&mut s, mask_dir.as_deref());
        drop(lock);
        if let Err(e) = &result {
            log::error!("{name} failed: {e}");
        }
        worker.finish(result.err().map(|e| e.to_string()));
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job_id, "operation": name })),
    )
        .into_response())
}

async fn progress(State(st): State<AppState>) -> Json<JobSnapshot> {
    Json(st.snapshot())
}

async fn metrics(State(st): State<AppState>) -> ApiResult<Response> {
    match tokio::fs::read_to_string(st.0.dir.join(REPORT_FILE)).await {
        Ok(text) => Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response()),
        Err(_) => Err(ApiError(StatusCode::NOT_FOUND, "no report yet; run eval".into())),
    }
}

async fn losslog(State(st): State<AppState>, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let since = match params.get("since") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| bad_request(format!("bad since `{v}`")))?,
        None => 0,
    };
    let path = st.0.dir.join(LOSS_LOG_FILE);
    let text = tokio::task::spawn_blocking(move || fs::read_to_string(path).unwrap_or_default())
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let body: String = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .skip(since)
        .flat_map(|l| [l, "\n"])
        .collect();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
