//! HTTP session service for the interactive authentication flow.
//!
//! Sessions live in memory behind one mutex; every state change is
//! appended to `sessions.jsonl` (fsynced before the response goes out) and
//! uploads are kept under `blobs/<sha256>.png`, so a restart replays the
//! journal and completed verdicts stay readable.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::services::ServeDir;

use spotcheck::data::{CropSpec, DataError};
use spotcheck::detect::{
    identify_product, prepare_input, prepare_session_inputs, run_pipeline, DetectError, PipelineOutcome, ProductDecision,
    StageModels, Verdict,
};

pub const JOURNAL_FILE: &str = "sessions.jsonl";
pub const BLOB_DIR: &str = "blobs";
const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("journal line {line}: {reason}")]
    Journal { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingProduct,
    ProductKnown,
    ProductUnknown,
    Complete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputTag {
    Product,
    Detail,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredInput {
    pub tag: InputTag,
    /// Full SHA-256 of the upload; names the blob file.
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub session_id: String,
    pub state: SessionState,
    pub product_class: Option<String>,
    pub product_confidence: Option<f32>,
    pub inputs: Vec<StoredInput>,
    pub verdict: Option<Verdict>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub tau: f32,
    pub crop_seed: u64,
    /// Journal and blob directory; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            tau: spotcheck::detect::DEFAULT_TAU,
            crop_seed: 0,
            data_dir: None,
        }
    }
}

struct Entry {
    session: Session,
    /// Set while a request is running inference for this session.
    busy: bool,
}

pub struct AppState {
    models: Option<StageModels>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Entry>>,
    journal: Option<Mutex<File>>,
    /// Uploads kept in memory when there is no data directory.
    memory_blobs: Mutex<HashMap<String, Vec<u8>>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replays a journal: the last snapshot of each session wins. A torn final
/// line (crash mid-append) is ignored.
pub fn replay_journal(path: &Path) -> Result<HashMap<String, Session>, ServiceError> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let last = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Session>(line) {
            Ok(s) => {
                out.insert(s.session_id.clone(), s);
            }
            Err(_) if i + 1 == last => {}
            Err(e) => {
                return Err(ServiceError::Journal {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl AppState {
    pub fn new(models: Option<StageModels>, config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let mut sessions = HashMap::new();
        let mut journal = None;
        if let Some(dir) = &config.data_dir {
            fs::create_dir_all(dir.join(BLOB_DIR))?;
            let path = dir.join(JOURNAL_FILE);
            for (id, session) in replay_journal(&path)? {
                sessions.insert(id, Entry { session, busy: false });
            }
            journal = Some(Mutex::new(OpenOptions::new().create(true).append(true).open(&path)?));
        }
        Ok(Arc::new(AppState {
            models,
            config,
            sessions: Mutex::new(sessions),
            journal,
            memory_blobs: Mutex::new(HashMap::new()),
        }))
    }

    pub fn models_loaded(&self) -> bool {
        self.models.is_some()
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        self.sessions.lock().unwrap().get(id).map(|e| e.session.clone())
    }

    fn persist(&self, session: &Session) -> Result<(), ApiError> {
        if let Some(journal) = &self.journal {
            let mut line = serde_json::to_string(session).map_err(ApiError::internal)?;
            line.push('\n');
            let mut f = journal.lock().unwrap();
            f.write_all(line.as_bytes()).map_err(ApiError::internal)?;
            f.sync_data().map_err(ApiError::internal)?;
        }
        Ok(())
    }

    fn store_blob(&self, bytes: &[u8]) -> Result<String, ApiError> {
        let hash = sha256_hex(bytes);
        match &self.config.data_dir {
            Some(dir) => {
                let path = dir.join(BLOB_DIR).join(format!("{hash}.png"));
                if !path.exists() {
                    let tmp = path.with_extension("tmp");
                    let mut f = File::create(&tmp).map_err(ApiError::internal)?;
                    f.write_all(bytes).map_err(ApiError::internal)?;
                    f.sync_all().map_err(ApiError::internal)?;
                    fs::rename(&tmp, &path).map_err(ApiError::internal)?;
                }
            }
            None => {
                self.memory_blobs.lock().unwrap().insert(hash.clone(), bytes.to_vec());
            }
        }
        Ok(hash)
    }

    fn load_blob(&self, hash: &str) -> Result<Vec<u8>, ApiError> {
        match &self.config.data_dir {
            Some(dir) => fs::read(dir.join(BLOB_DIR).join(format!("{hash}.png"))).map_err(ApiError::internal),
            None => self
                .memory_blobs
                .lock()
                .unwrap()
                .get(hash)
                .cloned()
                .ok_or_else(|| ApiError::internal(format!("blob {hash} missing"))),
        }
    }

    /// Checks the state without claiming the session.
    fn check_state(&self, id: &str, wanted: SessionState) -> Result<(), ApiError> {
        let sessions = self.sessions.lock().unwrap();
        let entry = sessions.get(id).ok_or_else(|| ApiError::not_found(id))?;
        if entry.busy || entry.session.state != wanted {
            return Err(ApiError::conflict(&entry.session, wanted, entry.busy));
        }
        Ok(())
    }

    /// Marks the session busy if it is idle and in `wanted`. The guard
    /// clears the flag unless the request commits a new snapshot.
    fn claim(self: &Arc<Self>, id: &str, wanted: SessionState) -> Result<(Session, Claim), ApiError> {
        let mut sessions = self.sessions.lock().unwrap();
        let entry = sessions.get_mut(id).ok_or_else(|| ApiError::not_found(id))?;
        if entry.busy || entry.session.state != wanted {
            return Err(ApiError::conflict(&entry.session, wanted, entry.busy));
        }
        entry.busy = true;
        Ok((
            entry.session.clone(),
            Claim {
                state: Arc::clone(self),
                id: id.to_string(),
            },
        ))
    }

    fn commit(&self, claim: Claim, session: Session) -> Result<(), ApiError> {
        self.persist(&session)?;
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(entry) = sessions.get_mut(&claim.id) {
            entry.session = session;
            entry.busy = false;
        }
        std::mem::forget(claim);
        Ok(())
    }

    fn models(&self) -> Result<&StageModels, ApiError> {
        self.models.as_ref().ok_or_else(ApiError::models_not_loaded)
    }
}

struct Claim {
    state: Arc<AppState>,
    id: String,
}

impl Drop for Claim {
    fn drop(&mut self) {
        if let Ok(mut sessions) = self.state.sessions.lock() {
            if let Some(e) = sessions.get_mut(&self.id) {
                e.busy = false;
            }
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }

    fn conflict(session: &Session, wanted: SessionState, busy: bool) -> Self {
        let msg = if busy {
            "session is processing another request".to_string()
        } else {
            format!("session is {:?}, this request needs {:?}", session.state, wanted)
        };
        ApiError::new(StatusCode::CONFLICT, msg)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn models_not_loaded() -> Self {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models not loaded")
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }

    fn from_detect(e: DetectError) -> Self {
        match e {
            DetectError::Data(DataError::UndecodableImage { .. }) => ApiError::unprocessable(e.to_string()),
            DetectError::EmptyInput | DetectError::NoSecondStageInputs => ApiError::unprocessable(e.to_string()),
            other => ApiError::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSessionRequest {}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    models_loaded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductResponse {
    /// `known` or `unknown`.
    pub result: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub product_class: Option<String>,
    pub confidence: f32,
    pub next: String,
    /// Upload tags the detail step accepts; empty for unknown products.
    pub required_tags: Vec<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        models_loaded: state.models_loaded(),
    })
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    if !body.iter().all(u8::is_ascii_whitespace) {
        serde_json::from_slice::<CreateSessionRequest>(&body)
            .map_err(|e| ApiError::unprocessable(format!("bad request body: {e}")))?;
    }
    state.models()?;
    let id = format!("{:032x}", rand::random::<u128>());
    let t = now_ms();
    let session = Session {
        session_id: id.clone(),
        state: SessionState::AwaitingProduct,
        product_class: None,
        product_confidence: None,
        inputs: Vec::new(),
        verdict: None,
        created_at: t,
        updated_at: t,
    };
    state.persist(&session)?;
    state
        .sessions
        .lock()
        .unwrap()
        .insert(id.clone(), Entry { session, busy: false });
    Ok((StatusCode::CREATED, Json(Created { session_id: id })).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ApiError> {
    state.session(&id).map(Json).ok_or_else(|| ApiError::not_found(&id))
}

/// The verdict exactly as the detail upload returned it.
async fn get_verdict(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match session.verdict {
        Some(v) => Ok(json_text(v.to_json())),
        None => Err(ApiError::conflict(&session, SessionState::Complete, false)),
    }
}

fn json_text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

async fn product_image(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ProductResponse>, ApiError> {
    let (mut session, claim) = state.claim(&id, SessionState::AwaitingProduct)?;
    let models = state.models()?.clone();
    let tau = state.config.tau;
    let bytes = body.to_vec();
    let (decision, bytes) = blocking(move || {
        let (h, w, _) = models.product().input_shape();
        let input = prepare_input(&bytes, "product-image", (h, w))?;
        let (decision, _) = identify_product(models.product(), &input.image, tau)?;
        Ok::<_, DetectError>((decision, bytes))
    })
    .await?
    .map_err(ApiError::from_detect)?;

    let blob = state.store_blob(&bytes)?;
    session.inputs.push(StoredInput {
        tag: InputTag::Product,
        blob,
    });
    session.updated_at = now_ms();
    let response = match decision {
        ProductDecision::Known { name, confidence, .. } => {
            session.state = SessionState::ProductKnown;
            session.product_class = Some(name.clone());
            session.product_confidence = Some(confidence);
            ProductResponse {
                result: "known".into(),
                next: format!(
                    "Identified {name}. Upload close-up photos of its details (tag \"detail\") and texture (tag \"texture\")."
                ),
                product_class: Some(name),
                confidence,
                required_tags: vec!["detail".into(), "texture".into()],
            }
        }
        ProductDecision::Unknown { confidence } => {
            session.state = SessionState::ProductUnknown;
            session.product_confidence = Some(confidence);
            ProductResponse {
                result: "unknown".into(),
                product_class: None,
                confidence,
                next: "This product is not in the database. Start a new session to try another photo.".into(),
                required_tags: Vec::new(),
            }
        }
    };
    state.commit(claim, session)?;
    Ok(Json(response))
}

async fn detail_images(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    mut multipart: Multipart,
) -> Result<Response, ApiError> {
    state.check_state(&id, SessionState::ProductKnown)?;
    let mut parts: Vec<(InputTag, String, Vec<u8>)> = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::unprocessable(format!("malformed multipart body: {e}")))?
    {
        let tag = match field.name() {
            Some("detail") => InputTag::Detail,
            Some("texture") => InputTag::Texture,
            other => return Err(ApiError::unprocessable(format!("unknown part {other:?}; use detail or texture"))),
        };
        let name = field.file_name().unwrap_or("upload").to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::unprocessable(format!("unreadable part: {e}")))?;
        if bytes.is_empty() {
            return Err(ApiError::unprocessable(format!("part {name:?} is empty")));
        }
        parts.push((tag, name, bytes.to_vec()));
    }
    if parts.is_empty() {
        return Err(ApiError::unprocessable("no detail or texture images uploaded"));
    }

    let (mut session, claim) = state.claim(&id, SessionState::ProductKnown)?;
    let models = state.models()?.clone();
    let product_blob = session
        .inputs
        .iter()
        .find(|i| i.tag == InputTag::Product)
        .map(|i| i.blob.clone())
        .ok_or_else(|| ApiError::internal("session has no product image"))?;
    let product_bytes = state.load_blob(&product_blob)?;
    let (tau, crop_seed) = (state.config.tau, state.config.crop_seed);
    let parts_for_run = parts.clone();
    let outcome = blocking(move || {
        let select = |t: InputTag| -> Vec<(&str, &[u8])> {
            parts_for_run
                .iter()
                .filter(|p| p.0 == t)
                .map(|p| (p.1.as_str(), p.2.as_slice()))
                .collect()
        };
        detect_session(
            &models,
            ("product-image", &product_bytes),
            &select(InputTag::Detail),
            &select(InputTag::Texture),
            tau,
            crop_seed,
        )
    })
    .await?
    .map_err(ApiError::from_detect)?;
    let verdict = match outcome {
        PipelineOutcome::Verdict(v) => v,
        PipelineOutcome::UnknownProduct { .. } => return Err(ApiError::internal("product no longer identified")),
    };

    for (tag, _, bytes) in &parts {
        let blob = state.store_blob(bytes)?;
        session.inputs.push(StoredInput { tag: *tag, blob });
    }
    session.state = SessionState::Complete;
    session.verdict = Some(verdict.clone());
    session.updated_at = now_ms();
    state.commit(claim, session)?;
    Ok(json_text(verdict.to_json()))
}

/// The one code path shared by the service and offline detection.
pub fn detect_session(
    models: &StageModels,
    product: (&str, &[u8]),
    details: &[(&str, &[u8])],
    textures: &[(&str, &[u8])],
    tau: f32,
    crop_seed: u64,
) -> Result<PipelineOutcome, DetectError> {
    let (product, details, textures) = prepare_session_inputs(models, product, details, textures)?;
    run_pipeline(models, &product, &details, &textures, tau, &CropSpec::new(crop_seed))
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/verdict", get(get_verdict))
        .route("/sessions/{id}/product-image", post(product_image))
        .route("/sessions/{id}/detail-images", post(detail_images))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api);
    match static_dir {
        Some(dir) if dir.is_dir() => app.fallback_service(ServeDir::new(dir)),
        _ => app,
    }
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>, static_dir: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
