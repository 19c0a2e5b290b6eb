//! HTTP API under `/api`.
//!
//! Stage-1 runs and session builds are jobs: they train on the blocking pool
//! and stream progress over server-sent events. Renders and variants are
//! synchronous and read-only on a finished session, so any number can run
//! at once.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/uploads` | multipart `file` → `{id, url, width, height}` |
//! | POST | `/api/jobs/stage1` | multipart `gray` or `gray_ref`, `prompt`, `negatives?`, `config?`, `seed?` → `{job_id}` |
//! | POST | `/api/jobs/session` | JSON `{image_ref, gray_ref, prompt, object_spans \| objects, session_id?, seed?}` → `{job_id, session_id}` |
//! | GET | `/api/jobs/{id}` | job record |
//! | GET | `/api/jobs/{id}/events` | SSE progress stream |
//! | GET | `/api/sessions/{id}` | session manifest, seeds, checkpoints, image URLs |
//! | POST | `/api/sessions/{id}/render` | JSON `{color_assignments, eta, seed?, suffix?}` → PNG |
//! | POST | `/api/sessions/{id}/variants` | JSON `{color_assignments, count, eta_range?, seeds?, suffix?}` → `{variants}` |
//! | POST | `/api/prompts/preview` | JSON `{context, object_spans \| objects, color_assignments?, options?}` → rewritten and target prompts |
//! | GET | `/api/files/{path}` | stored artifacts |

pub mod jobs;

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use diffcolor::diffusion::toy::{ToyBackend, ToyModels};
use diffcolor::diffusion::DiffusionBackend;
use diffcolor::stage2::{default_eta_grid, read_manifest, EditSession, Phase, PromptOptions, PromptSet, Span};
use diffcolor::{ColorImage, Error, GrayImage, PipelineConfig};
use futures::{Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::runs;
use jobs::{is_bucket_end, Job, JobKind, JobRegistry, JobStatus, Progress};

pub const MAX_VARIANTS: usize = 32;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::SessionIncomplete(_) => StatusCode::CONFLICT,
            Error::NonFiniteLoss { .. }
            | Error::BackendFrozenViolation(_)
            | Error::ChecksumMismatch
            | Error::BadCheckpoint(_)
            | Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone)]
enum SessionSlot {
    Building { job_id: String },
    Ready(Arc<EditSession<ToyBackend>>),
    Failed(String),
}

/// Shared state behind the router.
pub struct Service {
    data_dir: PathBuf,
    pipeline: PipelineConfig,
    models: ToyModels,
    jobs: JobRegistry,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    epoch: u64,
    counter: AtomicU64,
}

impl Service {
    /// Creates the data directory layout and loads every finished session
    /// already stored under `sessions/`.
    pub fn new(data_dir: impl Into<PathBuf>, pipeline: PipelineConfig, models: ToyModels) -> diffcolor::Result<Arc<Self>> {
        let data_dir = data_dir.into();
        for sub in ["uploads", "jobs", "sessions", "artifacts"] {
            let d = data_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut sessions = HashMap::new();
        let root = data_dir.join("sessions");
        for entry in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?.flatten() {
            let id = entry.file_name().to_string_lossy().into_owned();
            match EditSession::<ToyBackend>::load(entry.path()) {
                Ok(s) => {
                    sessions.insert(id, SessionSlot::Ready(Arc::new(s)));
                }
                Err(e) => eprintln!("skipping session {id}: {e}"),
            }
        }
        let epoch = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Arc::new(Self {
            data_dir,
            pipeline,
            models,
            jobs: JobRegistry::default(),
            sessions: RwLock::new(sessions),
            epoch,
            counter: AtomicU64::new(0),
        }))
    }

    pub fn data_dir(&self) -> &FsPath {
        &self.data_dir
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.get(id)
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:x}-{}", self.epoch, self.counter.fetch_add(1, Ordering::Relaxed))
    }

    fn url(&self, path: &FsPath) -> String {
        let rel = path.strip_prefix(&self.data_dir).unwrap_or(path);
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        format!("/api/files/{}", parts.join("/"))
    }

    fn slot(&self, id: &str) -> Option<SessionSlot> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn set_slot(&self, id: &str, slot: SessionSlot) {
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id.to_string(), slot);
    }

    fn ready_session(&self, id: &str) -> ApiResult<Arc<EditSession<ToyBackend>>> {
        match self.slot(id) {
            None => Err(ApiError::not_found("session", id)),
            Some(SessionSlot::Building { .. }) => Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} is still building"))),
            Some(SessionSlot::Failed(e)) => Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} failed to build: {e}"))),
            Some(SessionSlot::Ready(s)) => Ok(s),
        }
    }

    /// Stores `bytes` as `<dir>/<sha256>.png` after checking they decode.
    fn store_png(&self, dir: &str, bytes: &[u8]) -> ApiResult<(String, PathBuf, ColorImage)> {
        let id = runs::sha256_hex(bytes);
        let path = self.data_dir.join(dir).join(format!("{id}.png"));
        if !path.exists() {
            let tmp = self.data_dir.join(dir).join(format!("{id}.{}.part.png", self.counter.fetch_add(1, Ordering::Relaxed)));
            runs::write_file(&tmp, bytes)?;
            if let Err(e) = ColorImage::load(&tmp) {
                let _ = std::fs::remove_file(&tmp);
                return Err(ApiError::invalid(format!("not a readable PNG image: {e}")));
            }
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        let img = ColorImage::load(&path)?;
        Ok((id, path, img))
    }

    fn upload_path(&self, id: &str) -> ApiResult<PathBuf> {
        let valid = id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit());
        let path = self.data_dir.join("uploads").join(format!("{id}.png"));
        if !valid || !path.exists() {
            return Err(ApiError::invalid(format!("unknown upload {id:?}")));
        }
        Ok(path)
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { "ok" }))
        .route("/api/uploads", post(upload))
        .route("/api/files/{*path}", get(file))
        .route("/api/jobs/stage1", post(stage1_job))
        .route("/api/jobs/session", post(session_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/events", get(job_events))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/render", post(render))
        .route("/api/sessions/{id}/variants", post(variants))
        .route("/api/prompts/preview", post(preview))
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(service)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

async fn multipart_fields(mut mp: Multipart) -> ApiResult<HashMap<String, Bytes>> {
    let mut fields = HashMap::new();
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        fields.insert(name, bytes);
    }
    Ok(fields)
}

fn text_field(fields: &HashMap<String, Bytes>, name: &str) -> ApiResult<Option<String>> {
    fields
        .get(name)
        .map(|b| String::from_utf8(b.to_vec()).map_err(|_| ApiError::invalid(format!("field {name} is not UTF-8"))))
        .transpose()
}

async fn upload(State(s): State<Arc<Service>>, mp: Multipart) -> ApiResult<Json<Value>> {
    let fields = multipart_fields(mp).await?;
    let bytes = fields.get("file").ok_or_else(|| ApiError::invalid("missing multipart field \"file\""))?.clone();
    let s2 = s.clone();
    let (id, path, img) = blocking(move || s2.store_png("uploads", &bytes)).await?;
    Ok(Json(json!({ "id": id, "url": s.url(&path), "width": img.width(), "height": img.height() })))
}

async fn file(State(s): State<Arc<Service>>, Path(path): Path<String>) -> ApiResult<Response> {
    let rel = PathBuf::from(&path);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::not_found("file", &path));
    }
    let full = s.data_dir.join(&rel);
    let mime = match full.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("csv") => "text/csv",
        Some("md") => "text/markdown; charset=utf-8",
        _ => "application/octet-stream",
    };
    let bytes = blocking(move || std::fs::read(&full).map_err(|_| ApiError::not_found("file", &path))).await?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

fn parse_negatives(text: &str) -> ApiResult<Vec<String>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| ApiError::invalid(format!("negatives: {e}")));
    }
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

async fn stage1_job(State(s): State<Arc<Service>>, mp: Multipart) -> ApiResult<(StatusCode, Json<Value>)> {
    let fields = multipart_fields(mp).await?;
    let prompt = text_field(&fields, "prompt")?.unwrap_or_default();
    if prompt.trim().is_empty() {
        return Err(ApiError::invalid("prompt is required"));
    }
    let mut config = match text_field(&fields, "config")? {
        Some(text) if !text.trim().is_empty() => PipelineConfig::parse(&text)?,
        _ => s.pipeline.clone(),
    };
    if let Some(n) = text_field(&fields, "negatives")? {
        config.negatives = parse_negatives(&n)?;
    }
    if let Some(seed) = text_field(&fields, "seed")? {
        config = config.with_seed(seed.trim().parse().map_err(|_| ApiError::invalid(format!("bad seed {seed:?}")))?);
    }
    config.validate()?;

    let s2 = s.clone();
    let gray_bytes = fields.get("gray").cloned();
    let gray_ref = text_field(&fields, "gray_ref")?;
    let (gray_id, gray) = blocking(move || {
        let id = match (gray_bytes, gray_ref) {
            (Some(bytes), _) => s2.store_png("uploads", &bytes)?.0,
            (None, Some(r)) => r,
            (None, None) => return Err(ApiError::invalid("send a \"gray\" file or a \"gray_ref\" upload id")),
        };
        let gray = GrayImage::load(s2.upload_path(&id)?)?;
        Ok((id, gray))
    })
    .await?;

    let job_id = s.next_id("job");
    s.jobs.insert(Job {
        job_id: job_id.clone(),
        kind: JobKind::Stage1,
        status: JobStatus::Queued,
        progress: Progress { fraction: 0.0, step: 0, total: config.stage1.steps },
        session_id: None,
        result: None,
        error: None,
    });
    let (s2, id) = (s.clone(), job_id.clone());
    tokio::task::spawn_blocking(move || {
        s2.jobs.start(&id);
        let out = s2.data_dir.join("jobs").join(&id);
        let total = config.stage1.steps;
        let run = runs::colorize_to_dir(&gray, &prompt, &config, &s2.models, &out, |e| {
            if is_bucket_end(e.step, total) {
                s2.jobs.progress(&id, e.step + 1, total, json!(e));
            }
        });
        let result = run.map_err(ApiError::from).and_then(|manifest| {
            let aligned = std::fs::read(out.join(runs::ALIGNED)).map_err(|e| Error::io(out.join(runs::ALIGNED), e))?;
            let (aligned_ref, _, _) = s2.store_png("uploads", &aligned)?;
            let urls: BTreeMap<String, String> =
                runs::artifact_paths(&out).iter().map(|p| (file_stem(p).to_string(), s2.url(p))).collect();
            Ok(json!({ "manifest": manifest, "urls": urls, "gray_ref": gray_id, "aligned_ref": aligned_ref }))
        });
        match result {
            Ok(v) => s2.jobs.finish(&id, v),
            Err(e) => s2.jobs.fail(&id, e.message),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

fn file_stem(p: &FsPath) -> &str {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub image_ref: String,
    pub gray_ref: String,
    pub prompt: String,
    #[serde(default)]
    pub object_spans: Option<Vec<Span>>,
    #[serde(default)]
    pub objects: Option<Vec<String>>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn prompt_set(context: &str, spans: Option<Vec<Span>>, objects: Option<Vec<String>>, options: PromptOptions) -> ApiResult<PromptSet> {
    Ok(match (spans, objects) {
        (Some(spans), _) => PromptSet::new(context, spans, options)?,
        (None, Some(objects)) => PromptSet::from_objects(context, &objects, options)?,
        (None, None) => return Err(ApiError::invalid("give object_spans or objects")),
    })
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

async fn session_job(State(s): State<Arc<Service>>, Json(req): Json<SessionRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut config = s.pipeline.clone();
    if let Some(seed) = req.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    let prompts = prompt_set(&req.prompt, req.object_spans, req.objects, config.stage2.prompt)?;
    let (image_path, gray_path) = (s.upload_path(&req.image_ref)?, s.upload_path(&req.gray_ref)?);
    let (primary, gray) = blocking(move || Ok((ColorImage::load(image_path)?, GrayImage::load(gray_path)?))).await?;
    if primary.dims() != gray.dims() {
        return Err(Error::SizeMismatch { a: primary.dims(), b: gray.dims() }.into());
    }
    let session_id = req.session_id.unwrap_or_else(|| s.next_id("session"));
    if !valid_session_id(&session_id) {
        return Err(ApiError::invalid(format!("session id {session_id:?} must be 1-64 of [A-Za-z0-9_-]")));
    }
    let job_id = s.next_id("job");
    {
        // one training job per session at a time
        let mut sessions = s.sessions.write().unwrap_or_else(|e| e.into_inner());
        match sessions.get(&session_id) {
            Some(SessionSlot::Building { .. }) => {
                return Err(ApiError::new(StatusCode::CONFLICT, format!("session {session_id} is already building")))
            }
            Some(SessionSlot::Ready(_)) => {
                return Err(ApiError::new(StatusCode::CONFLICT, format!("session {session_id} already exists")))
            }
            _ => {}
        }
        sessions.insert(session_id.clone(), SessionSlot::Building { job_id: job_id.clone() });
    }
    let total = config.stage2.embed_steps + config.stage2.finetune_steps;
    s.jobs.insert(Job {
        job_id: job_id.clone(),
        kind: JobKind::SessionBuild,
        status: JobStatus::Queued,
        progress: Progress { fraction: 0.0, step: 0, total },
        session_id: Some(session_id.clone()),
        result: None,
        error: None,
    });
    let (s2, id, sid) = (s.clone(), job_id.clone(), session_id.clone());
    tokio::task::spawn_blocking(move || {
        s2.jobs.start(&id);
        let embed = config.stage2.embed_steps;
        let built = EditSession::build(
            &sid,
            &primary,
            &gray,
            prompts,
            &s2.models.backend,
            &s2.models.guidance,
            &config.stage2,
            &config.align,
            |e| {
                let (offset, n) = match e.phase {
                    Phase::Embedding => (0, embed),
                    Phase::Finetune => (embed, config.stage2.finetune_steps),
                };
                if is_bucket_end(e.step, n) {
                    s2.jobs.progress(&id, offset + e.step + 1, total, json!(e));
                }
            },
        );
        let dir = s2.data_dir.join("sessions").join(&sid);
        let saved = built.and_then(|session| {
            session.save(&dir)?;
            runs::write_file(&dir.join(runs::EFFECTIVE_CONFIG), config.to_json()?.as_bytes())?;
            Ok(session)
        });
        match saved {
            Ok(session) => {
                s2.set_slot(&sid, SessionSlot::Ready(Arc::new(session)));
                s2.jobs.finish(&id, json!({ "session_id": sid, "session_url": format!("/api/sessions/{sid}") }));
            }
            Err(e) => {
                s2.set_slot(&sid, SessionSlot::Failed(e.to_string()));
                s2.jobs.fail(&id, e.to_string());
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "session_id": session_id }))))
}

async fn get_job(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

/// Replays every event of the job so far, then follows it until it finishes.
async fn job_events(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let rx = s.jobs.subscribe(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let batches = futures::stream::unfold((s, id, 0usize, rx, false), |(s, id, next, mut rx, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let (events, done) = s.jobs.events_since(&id, next)?;
            if !events.is_empty() {
                let next = next + events.len();
                return Some((events, (s, id, next, rx, done)));
            }
            if done || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    let stream = batches.flat_map(|events| {
        futures::stream::iter(events.into_iter().map(|e| {
            let ev = Event::default().event(&e.event).id(e.seq.to_string());
            Ok(ev.json_data(&e.data).unwrap_or_else(|_| Event::default().event("error")))
        }))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn get_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    match s.slot(&id) {
        None => Err(ApiError::not_found("session", &id)),
        Some(SessionSlot::Building { job_id }) => Ok(Json(json!({ "id": id, "status": "building", "job_id": job_id }))),
        Some(SessionSlot::Failed(e)) => Ok(Json(json!({ "id": id, "status": "failed", "error": e }))),
        Some(SessionSlot::Ready(session)) => {
            let dir = s.data_dir.join("sessions").join(&id);
            let manifest = read_manifest(&dir).unwrap_or_else(|_| session.manifest());
            let url = |name: &str| s.url(&dir.join(name));
            Ok(Json(json!({
                "id": id,
                "status": "ready",
                "manifest": manifest,
                "prompts": session.prompts,
                "seeds": { "reconstruction": session.config.reconstruction_seed, "training": session.config.seed },
                "checkpoints": ["reference.ckpt", "finetuned.ckpt"],
                "urls": {
                    "gray": url("gray.png"),
                    "primary": url("primary.png"),
                    "reconstruction": url("reconstruction.png"),
                },
            })))
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub color_assignments: BTreeMap<String, String>,
    pub eta: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub suffix: String,
}

fn gradient_evaluations(session: &EditSession<ToyBackend>) -> u64 {
    session.reference.gradient_evaluations() + session.finetuned.gradient_evaluations()
}

async fn render(State(s): State<Arc<Service>>, Path(id): Path<String>, Json(req): Json<RenderRequest>) -> ApiResult<Response> {
    let session = s.ready_session(&id)?;
    let s2 = s.clone();
    let (png, prompt, seed, grads) = blocking(move || {
        let seed = req.seed.unwrap_or(session.config.reconstruction_seed);
        let before = gradient_evaluations(&session);
        let out = session.edit_with_suffix(&s2.models.guidance, &req.color_assignments, &req.suffix, req.eta, seed)?;
        let grads = gradient_evaluations(&session) - before;
        Ok((out.image.to_png_bytes()?, out.target_prompt, seed, grads))
    })
    .await?;
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    let h = resp.headers_mut();
    h.insert("x-gradient-evaluations", HeaderValue::from(grads));
    h.insert("x-seed", HeaderValue::from(seed));
    if let Ok(v) = HeaderValue::from_str(&prompt) {
        h.insert("x-target-prompt", v);
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantsRequest {
    #[serde(default)]
    pub color_assignments: BTreeMap<String, String>,
    pub count: usize,
    /// Inclusive `[lo, hi]`; `count` weights evenly spaced across it.
    #[serde(default)]
    pub eta_range: Option<[f64; 2]>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub suffix: String,
}

/// `count` evenly spaced weights over `[lo, hi]`.
pub fn eta_grid(count: usize, range: Option<[f64; 2]>) -> ApiResult<Vec<f64>> {
    let Some([lo, hi]) = range else { return Ok(default_eta_grid(count)) };
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(ApiError::invalid(format!("eta_range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
    }
    Ok(match count {
        1 => vec![lo],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    })
}

async fn variants(State(s): State<Arc<Service>>, Path(id): Path<String>, Json(req): Json<VariantsRequest>) -> ApiResult<Json<Value>> {
    let session = s.ready_session(&id)?;
    if req.count == 0 || req.count > MAX_VARIANTS {
        return Err(ApiError::invalid(format!("count must be 1..={MAX_VARIANTS}")));
    }
    let grid = eta_grid(req.count, req.eta_range)?;
    let seeds = req.seeds.unwrap_or_else(|| (0..req.count as u64).collect());
    if seeds.len() != req.count {
        return Err(ApiError::invalid(format!("{} seeds given for {} variants", seeds.len(), req.count)));
    }
    let s2 = s.clone();
    let list = blocking(move || {
        let before = gradient_evaluations(&session);
        let mut list = Vec::with_capacity(grid.len());
        for (&eta, &seed) in grid.iter().zip(&seeds) {
            let out = session.edit_with_suffix(&s2.models.guidance, &req.color_assignments, &req.suffix, eta, seed)?;
            let (_, path, _) = s2.store_png("artifacts", &out.image.to_png_bytes()?)?;
            list.push(json!({ "eta": eta, "seed": seed, "url": s2.url(&path), "target_prompt": out.target_prompt }));
        }
        Ok(json!({ "variants": list, "gradient_evaluations": gradient_evaluations(&session) - before }))
    })
    .await?;
    Ok(Json(list))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviewRequest {
    pub context: String,
    #[serde(default)]
    pub object_spans: Option<Vec<Span>>,
    #[serde(default)]
    pub objects: Option<Vec<String>>,
    #[serde(default)]
    pub color_assignments: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub options: Option<PromptOptions>,
}

/// Echoes the server's prompt rewriting so clients never re-implement it.
async fn preview(State(s): State<Arc<Service>>, Json(req): Json<PreviewRequest>) -> ApiResult<Json<Value>> {
    let options = req.options.unwrap_or(s.pipeline.stage2.prompt);
    let set = prompt_set(&req.context, req.object_spans, req.objects, options)?;
    let target = req.color_assignments.as_ref().map(|c| set.target(c)).transpose()?;
    Ok(Json(json!({
        "context": set.context,
        "rewritten": set.rewritten,
        "object_spans": set.object_spans,
        "objects": set.objects(),
        "target": target,
    })))
}
