//! HTTP API under `/api/v1`.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::SystemTime;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{mpsc, Mutex};

use saferoad::apcam::{CamMethod, CamRequest, TargetClass};
use saferoad::classifier::predict_proba;
use saferoad::imagery::Label;
use saferoad::inpaint::{prompt_catalog, InpaintBackend, MockBackend};
use saferoad::maskkit::ScribbleSet;
use saferoad::saliency::{SaliencyBackend, SpectralResidual};
use saferoad::Classifier;

use crate::error::{GatewayError, Result};
use crate::jobs::JobState;
use crate::pipeline;
use crate::workspace::{atomic_write, valid_id, Workspace};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// Adapter clients. The HTTP ones wrap blocking clients, which must be
/// neither built nor dropped on a runtime thread.
struct Backends {
    inpaint: Arc<dyn InpaintBackend>,
    saliency: Arc<dyn SaliencyBackend>,
}

impl Drop for Backends {
    fn drop(&mut self) {
        if tokio::runtime::Handle::try_current().is_ok() {
            let inpaint = std::mem::replace(&mut self.inpaint, Arc::new(MockBackend));
            let saliency = std::mem::replace(&mut self.saliency, Arc::new(SpectralResidual::default()));
            std::thread::spawn(move || drop((inpaint, saliency)));
        }
    }
}

pub struct AppState {
    pub ws: Workspace,
    backends: Backends,
    queue: mpsc::UnboundedSender<String>,
    model: RwLock<Option<(SystemTime, Arc<Classifier>)>>,
    /// Serialises mutating requests so retries with the same idempotency key
    /// observe the first response.
    mutations: Mutex<()>,
}

impl AppState {
    /// The trained model, reloaded whenever the checkpoint file changes.
    fn model(&self) -> Result<Arc<Classifier>> {
        let path = self.ws.model_path();
        let modified = std::fs::metadata(&path).and_then(|m| m.modified()).map_err(|_| {
            GatewayError::unavailable(
                "MODEL_UNAVAILABLE",
                format!("no trained model at {}; run `saferoad train`", path.display()),
            )
        })?;
        if let Some((stamp, model)) = self.model.read().expect("model lock").as_ref() {
            if *stamp == modified {
                return Ok(model.clone());
            }
        }
        let model = Arc::new(self.ws.load_model()?);
        *self.model.write().expect("model lock") = Some((modified, model.clone()));
        Ok(model)
    }
}

pub type SharedState = Arc<AppState>;

async fn blocking<T, F>(f: F) -> Result<T>
where
    F: FnOnce() -> Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| GatewayError::internal(format!("worker panicked: {e}")))?
}

/// Builds the state and starts the inpaint worker. Jobs left queued by a
/// previous process are re-enqueued; jobs caught running are failed.
pub async fn start(ws: Workspace) -> Result<SharedState> {
    let (tx, rx) = mpsc::unbounded_channel();
    let (ws, inpaint, saliency) = blocking(move || {
        let inpaint = ws.inpaint_backend()?;
        let saliency = ws.saliency_backend()?;
        Ok((ws, inpaint, saliency))
    })
    .await?;
    let state = Arc::new(AppState {
        backends: Backends { inpaint, saliency },
        ws,
        queue: tx,
        model: RwLock::new(None),
        mutations: Mutex::new(()),
    });
    for id in pipeline::jobs(&state.ws).recover()? {
        let _ = state.queue.send(id);
    }
    tokio::spawn(worker(state.clone(), rx));
    Ok(state)
}

async fn worker(state: SharedState, mut rx: mpsc::UnboundedReceiver<String>) {
    while let Some(job_id) = rx.recv().await {
        let s = state.clone();
        let id = job_id.clone();
        let outcome = blocking(move || pipeline::run_inpaint_job(&s.ws, s.backends.inpaint.as_ref(), &id)).await;
        match outcome {
            Ok(job) => log::info!("job {} finished: {:?}", job.job_id, job.state),
            Err(e) => log::error!("job {job_id}: {e}"),
        }
    }
}

pub fn router(state: SharedState) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/file", get(image_file))
        .route("/images/{id}/cam", get(image_cam))
        .route("/images/{id}/mask", post(post_mask))
        .route("/masks/{id}", get(get_mask))
        .route("/prompts", get(prompts))
        .route("/inpaint", post(post_inpaint))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/candidates", get(job_candidates))
        .route("/jobs/{id}/candidates/{cid}", get(candidate_png))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/select", post(select))
        .route("/reports/latest", get(latest_report))
        .route("/saliency/{id}", get(saliency))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .with_state(state.clone());
    let console = state.ws.path(&state.ws.config.server.console_dir);
    Router::new()
        .nest("/api/v1", api)
        .fallback_service(tower_http::services::ServeDir::new(console))
}

#[derive(Serialize, Deserialize)]
struct StoredResponse {
    status: u16,
    content_type: Option<String>,
    body: String,
}

fn idempotency_path(ws: &Workspace, key: &str, method: &Method, uri: &str) -> PathBuf {
    let digest = saferoad::imagery::sha256_hex(format!("{method} {uri} {key}").as_bytes());
    ws.path(format!("jobs/idempotency/{digest}.json"))
}

/// Mutations run one at a time. With an `Idempotency-Key` header the first
/// non-5xx response is stored and replayed for every retry.
async fn idempotency(State(state): State<SharedState>, req: Request, next: Next) -> Response {
    if req.method() == Method::GET || req.method() == Method::HEAD {
        return next.run(req).await;
    }
    let _guard = state.mutations.lock().await;
    let key = req
        .headers()
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(String::from);
    let Some(key) = key else {
        return next.run(req).await;
    };
    let path = idempotency_path(&state.ws, &key, req.method(), &req.uri().to_string());
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(stored) = serde_json::from_slice::<StoredResponse>(&bytes) {
            let mut resp = Response::new(Body::from(B64.decode(stored.body).unwrap_or_default()));
            *resp.status_mut() = StatusCode::from_u16(stored.status).unwrap_or(StatusCode::OK);
            if let Some(ct) = stored.content_type.and_then(|c| HeaderValue::from_str(&c).ok()) {
                resp.headers_mut().insert(header::CONTENT_TYPE, ct);
            }
            resp.headers_mut().insert("idempotent-replay", HeaderValue::from_static("true"));
            return resp;
        }
    }
    let resp = next.run(req).await;
    if resp.status().is_server_error() {
        return resp;
    }
    let (parts, body) = resp.into_parts();
    let bytes = match to_bytes(body, 64 << 20).await {
        Ok(b) => b,
        Err(e) => return GatewayError::internal(e.to_string()).into_response(),
    };
    let stored = StoredResponse {
        status: parts.status.as_u16(),
        content_type: parts
            .headers
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(String::from),
        body: B64.encode(&bytes),
    };
    if let Err(e) = atomic_write(&path, &serde_json::to_vec(&stored).expect("stored response serializes")) {
        log::warn!("could not persist idempotent response: {e}");
    }
    Response::from_parts(parts, Body::from(bytes))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Deserialize)]
struct ImageQuery {
    label: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn list_images(State(state): State<SharedState>, Query(q): Query<ImageQuery>) -> Result<Json<Value>> {
    let label = match q.label.as_deref() {
        None | Some("") | Some("all") => None,
        Some(l) => Some(
            l.parse::<Label>()
                .map_err(|e| GatewayError::bad_request("INVALID_REQUEST", e))?,
        ),
    };
    let page = q.page.unwrap_or(1).max(1);
    let per_page = q.per_page.unwrap_or(state.ws.config.server.page_size).clamp(1, 500);
    blocking(move || {
        let manifest = state.ws.manifest()?;
        let matching: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| label.is_none_or(|l| r.label == l))
            .collect();
        let model = state.model().ok();
        let mut items = Vec::new();
        for r in matching.iter().skip((page - 1) * per_page).take(per_page) {
            let p = match &model {
                Some(m) => Some(predict_proba(m, &state.ws.load_image(r)?) as f64),
                None => None,
            };
            let mut v = serde_json::to_value(r).map_err(|e| GatewayError::internal(e.to_string()))?;
            v["p_hotspot"] = json!(p);
            items.push(v);
        }
        Ok(Json(json!({
            "items": items,
            "page": page,
            "per_page": per_page,
            "total": matching.len(),
        })))
    })
    .await
}

async fn get_image(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Value>> {
    blocking(move || {
        let record = state.ws.record(&id)?;
        let p = match state.model() {
            Ok(m) => Some(predict_proba(&m, &state.ws.load_image(&record)?) as f64),
            Err(_) => None,
        };
        let mut v = serde_json::to_value(&record).map_err(|e| GatewayError::internal(e.to_string()))?;
        v["p_hotspot"] = json!(p);
        Ok(Json(v))
    })
    .await
}

async fn image_file(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Response> {
    let record = state.ws.record(&id)?;
    let bytes = tokio::fs::read(state.ws.path(&record.file_path)).await?;
    let ct = match image::guess_format(&bytes) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

#[derive(Deserialize)]
struct CamQuery {
    method: Option<String>,
    threshold: Option<f64>,
    layer: Option<String>,
    target: Option<TargetClass>,
}

async fn image_cam(State(state): State<SharedState>, Path(id): Path<String>, Query(q): Query<CamQuery>) -> Result<Json<Value>> {
    let method = match q.method.as_deref() {
        None | Some("") => state.ws.config.cam.method,
        Some(m) => m
            .parse::<CamMethod>()
            .map_err(|e| GatewayError::bad_request("INVALID_REQUEST", e.to_string()))?,
    };
    let threshold = q.threshold.unwrap_or(state.ws.config.cam.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GatewayError::bad_request(
            "INVALID_THRESHOLD",
            format!("threshold must lie in (0, 1), got {threshold}"),
        ));
    }
    let request = CamRequest {
        method,
        target_class: q.target.unwrap_or_default(),
        layer: q.layer,
        ..CamRequest::default()
    };
    blocking(move || {
        let model = state.model()?;
        let out = pipeline::cam(&state.ws, &model, &id, &request, threshold)?;
        Ok(Json(serde_json::to_value(out).map_err(|e| GatewayError::internal(e.to_string()))?))
    })
    .await
}

async fn post_mask(State(state): State<SharedState>, Path(id): Path<String>, body: Bytes) -> Result<(StatusCode, Json<Value>)> {
    let scribbles: ScribbleSet = serde_json::from_slice(&body)
        .map_err(|e| GatewayError::bad_request("INVALID_SCRIBBLE", format!("invalid ScribbleSet: {e}")))?;
    blocking(move || Ok((StatusCode::CREATED, Json(pipeline::save_scribble_mask(&state.ws, &id, &scribbles)?)))).await
}

async fn get_mask(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Response> {
    if !valid_id(&id) {
        return Err(GatewayError::not_found("mask", &id));
    }
    match tokio::fs::read(state.ws.path(Workspace::mask_rel(&id))).await {
        Ok(b) => Ok(png(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GatewayError::not_found("mask", &id)),
        Err(e) => Err(e.into()),
    }
}

async fn prompts() -> Json<Value> {
    let items: Vec<Value> = prompt_catalog()
        .into_iter()
        .map(|p| {
            let full = p.full_prompt();
            let mut v = serde_json::to_value(p).expect("prompt serializes");
            v["full_prompt"] = json!(full);
            v
        })
        .collect();
    Json(Value::Array(items))
}

async fn post_inpaint(State(state): State<SharedState>, body: Bytes) -> Result<(StatusCode, Json<Value>)> {
    let body: Value = serde_json::from_slice(&body)
        .map_err(|e| GatewayError::bad_request("INVALID_REQUEST", format!("invalid JSON: {e}")))?;
    let s = state.clone();
    let (job, warnings) = blocking(move || {
        let payload = pipeline::parse_inpaint_body(&s.ws, &body)?;
        pipeline::submit_inpaint(&s.ws, payload)
    })
    .await?;
    state
        .queue
        .send(job.job_id.clone())
        .map_err(|_| GatewayError::unavailable("QUEUE_CLOSED", "inpaint worker is not running"))?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({
            "job_id": job.job_id,
            "session_id": job.job_id,
            "state": job.state,
            "warnings": warnings,
        })),
    ))
}

async fn list_jobs(State(state): State<SharedState>) -> Result<Json<Value>> {
    blocking(move || Ok(Json(json!(pipeline::jobs(&state.ws).list()?)))).await
}

async fn get_job(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Value>> {
    blocking(move || Ok(Json(json!(pipeline::jobs(&state.ws).get(&id)?)))).await
}

fn done_job(state: &AppState, id: &str) -> Result<crate::jobs::Job> {
    let job = pipeline::jobs(&state.ws).get(id)?;
    if job.state != JobState::Done {
        let detail = job.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default();
        return Err(GatewayError::conflict(
            "JOB_NOT_DONE",
            format!("job {id} is {:?}{detail}", job.state),
        ));
    }
    Ok(job)
}

async fn job_candidates(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Value>> {
    blocking(move || {
        let job = done_job(&state, &id)?;
        let result = job.result.unwrap_or_default();
        let mut out = Vec::new();
        for c in result["candidates"].as_array().cloned().unwrap_or_default() {
            let cid = c["candidate_id"].as_str().unwrap_or_default().to_string();
            let bytes = std::fs::read(state.ws.path(Workspace::candidate_rel(&id, &cid)))?;
            out.push(json!({
                "candidate_id": cid,
                "seed": c["seed"],
                "url": format!("/api/v1/jobs/{id}/candidates/{cid}"),
                "png_base64": B64.encode(bytes),
            }));
        }
        Ok(Json(json!({
            "job_id": id,
            "backend": result["backend"],
            "warnings": result["warnings"],
            "candidates": out,
        })))
    })
    .await
}

async fn candidate_png(State(state): State<SharedState>, Path((id, cid)): Path<(String, String)>) -> Result<Response> {
    done_job(&state, &id)?;
    if !valid_id(&cid) {
        return Err(GatewayError::not_found("candidate", &cid));
    }
    match tokio::fs::read(state.ws.path(Workspace::candidate_rel(&id, &cid))).await {
        Ok(b) => Ok(png(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GatewayError::not_found("candidate", &cid)),
        Err(e) => Err(e.into()),
    }
}

async fn list_sessions(State(state): State<SharedState>) -> Result<Json<Value>> {
    blocking(move || Ok(Json(json!(state.ws.sessions().latest()?)))).await
}

async fn get_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Value>> {
    blocking(move || {
        let s = state.ws.sessions().get(&id)?.ok_or_else(|| GatewayError::not_found("session", &id))?;
        Ok(Json(json!(s)))
    })
    .await
}

#[derive(Deserialize)]
struct SelectBody {
    candidate_id: String,
}

async fn select(State(state): State<SharedState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>> {
    let body: SelectBody = serde_json::from_slice(&body)
        .map_err(|e| GatewayError::bad_request("INVALID_REQUEST", format!("expected {{\"candidate_id\": ..}}: {e}")))?;
    blocking(move || {
        let model = state.model()?;
        let session = pipeline::select_candidate(&state.ws, &model, &id, &body.candidate_id)?;
        let change = match (session.p_before, session.p_after) {
            (Some(b), Some(a)) if b > 0.0 => Some(100.0 * (a - b) / b),
            _ => None,
        };
        Ok(Json(json!({
            "session": session,
            "p_before": session.p_before,
            "p_after": session.p_after,
            "change_percent": change,
        })))
    })
    .await
}

async fn latest_report(State(state): State<SharedState>) -> Result<Json<Value>> {
    blocking(move || Ok(Json(json!(pipeline::report(&state.ws)?)))).await
}

async fn saliency(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<Value>> {
    blocking(move || {
        let model = state.model()?;
        Ok(Json(pipeline::saliency_for(&state.ws, &model, state.backends.saliency.as_ref(), &id)?))
    })
    .await
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(ws: Workspace, addr: std::net::SocketAddr) -> Result<()> {
    let state = start(ws).await?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Serves on an already bound listener; used by tests and embedders.
pub async fn serve_on(ws: Workspace, listener: tokio::net::TcpListener) -> Result<()> {
    let state = start(ws).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
