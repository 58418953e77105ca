//! Workspace operations shared by the CLI and the HTTP API. Everything here
//! is blocking; the server calls it from `spawn_blocking`.

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use saferoad::apcam::{
    compute_cam, default_min_area, encode_png, save_heatmap, threshold_to_mask, CamMethod, CamRequest, HeatmapSidecar,
    OVERLAY_COLORMAP,
};
use saferoad::classifier::{build_model, evaluate, save_checkpoint, train, ModelSpec, TrainConfig};
use saferoad::evalreport::{aggregate, score_session, CamConfig, EvalReport, RedesignSession};
use saferoad::events::{parse_events, AccidentEvent, Schema};
use saferoad::hotspot::{
    cluster_centers, clusters_from_geojson, clusters_to_csv, clusters_to_geojson, dbscan, sample_non_hotspots,
    BoundingBox, ClusterParams, HotspotCluster, NOISE,
};
use saferoad::imagery::{
    build_manifest, plan_captures, sha256_hex, FixtureProvider, HttpProvider, ImageCache, ImageryProvider, Label,
    Location, LocationKey,
};
use saferoad::inpaint::{inpaint, InpaintBackend, InpaintParams, InpaintRequest};
use saferoad::maskkit::{rasterize_scribbles, save_mask, MaskSource, Polarity, ScribbleSet};
use saferoad::saliency::{ap_mask, ap_saliency_ratio, batch_saliency_report, CamMaskConfig, SaliencyBackend, SaliencyError, SaliencyReport};
use saferoad::toy::write_toy_dataset;
use saferoad::Classifier;

use crate::error::{GatewayError, Result};
use crate::jobs::{Job, JobKind, JobState, JobStore};
use crate::workspace::{atomic_write, valid_id, Workspace};

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| GatewayError::internal(e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(GatewayError::not_found(what, &path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    serde_json::from_slice(&bytes).map_err(|e| GatewayError::internal(format!("{}: {e}", path.display())))
}

pub fn ingest(ws: &Workspace, csv: &Path, schema: Option<&Path>) -> Result<Value> {
    let schema = match schema {
        Some(p) => Schema::from_file(p)?,
        None => Schema::default(),
    };
    let raw = std::fs::read(csv)?;
    let outcome = parse_events(&raw, &schema)?;
    atomic_write(&ws.events_path(), &to_json(&outcome.events)?)?;
    Ok(json!({
        "events": outcome.events.len(),
        "skipped": outcome.skipped_count,
        "duplicate_ids": outcome.duplicate_ids,
        "path": "events/events.json",
    }))
}

pub fn load_events(ws: &Workspace) -> Result<Vec<AccidentEvent>> {
    read_json(&ws.events_path(), "events file")
}

pub fn cluster(ws: &Workspace, params: &ClusterParams) -> Result<Value> {
    let events = load_events(ws)?;
    let labels = dbscan(&events, params)?;
    let clusters = cluster_centers(&events, &labels);
    let geojson = clusters_to_geojson(&clusters);
    atomic_write(&ws.clusters_path(), &to_json(&geojson)?)?;
    atomic_write(&ws.path("clusters/clusters.csv"), clusters_to_csv(&clusters).as_bytes())?;
    Ok(json!({
        "clusters": clusters.len(),
        "noise": labels.iter().filter(|&&l| l == NOISE).count(),
        "geojson": "clusters/clusters.geojson",
        "csv": "clusters/clusters.csv",
    }))
}

pub fn load_clusters(ws: &Workspace) -> Result<Vec<HotspotCluster>> {
    let value: Value = read_json(&ws.clusters_path(), "clusters file")?;
    clusters_from_geojson(&value).ok_or_else(|| GatewayError::internal("clusters file is not valid GeoJSON"))
}

fn events_bbox(events: &[AccidentEvent]) -> Option<BoundingBox> {
    let mut b = BoundingBox {
        min_lat: f64::INFINITY,
        min_lon: f64::INFINITY,
        max_lat: f64::NEG_INFINITY,
        max_lon: f64::NEG_INFINITY,
    };
    for e in events {
        b.min_lat = b.min_lat.min(e.latitude);
        b.max_lat = b.max_lat.max(e.latitude);
        b.min_lon = b.min_lon.min(e.longitude);
        b.max_lon = b.max_lon.max(e.longitude);
    }
    b.validate().ok().map(|_| b)
}

/// Captures every hotspot centre plus sampled non-hotspot locations and
/// writes the labelled manifest.
pub fn fetch(ws: &Workspace, total_fov: f64, per_image_fov: f64, fixture_dir: Option<&Path>) -> Result<Value> {
    let clusters = load_clusters(ws)?;
    let cfg = &ws.config;
    let mut labels: HashMap<LocationKey, Label> = HashMap::new();
    let mut locations = Vec::new();
    for c in &clusters {
        let loc = Location::new(c.center_latitude, c.center_longitude);
        labels.insert(loc.key(), Label::Hotspot);
        locations.push(loc);
    }
    let wanted = (clusters.len() as f64 * cfg.imagery.non_hotspot_ratio).round() as usize;
    if wanted > 0 {
        let events = load_events(ws)?;
        if let Some(bbox) = events_bbox(&events) {
            let points = sample_non_hotspots(
                &bbox,
                &clusters,
                wanted,
                cfg.imagery.non_hotspot_min_distance_m,
                cfg.split.seed,
            )?;
            for (lat, lon) in points {
                let loc = Location::new(lat, lon);
                labels.entry(loc.key()).or_insert(Label::NonHotspot);
                locations.push(loc);
            }
        }
    }
    let mut keys = Vec::new();
    for loc in &locations {
        let plan = plan_captures(*loc, total_fov, per_image_fov, cfg.capture.base_heading, cfg.capture.pitch)?;
        keys.extend(plan.keys());
    }

    let fixture = fixture_dir.map(Path::to_path_buf).or_else(|| cfg.imagery.fixture_dir.clone());
    let provider: Box<dyn ImageryProvider> = match fixture {
        Some(dir) => Box::new(FixtureProvider::new(ws.path(dir))),
        None => Box::new(HttpProvider::from_env(cfg.imagery.endpoint.clone())?),
    };
    let fetcher = saferoad::imagery::Fetcher::new(ImageCache::new(ws.root(), "images"), provider);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (key, result) in keys.iter().zip(fetcher.fetch_all(&keys, cfg.imagery.concurrency)) {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(json!({"key": key.file_stem(), "code": e.code(), "message": e.to_string()})),
        }
    }
    let manifest = build_manifest(records, &labels, cfg.split.seed, cfg.split.test_fraction)?;
    manifest.save(&ws.manifest_dir())?;
    Ok(json!({
        "images": manifest.records.len(),
        "hotspot_locations": clusters.len(),
        "non_hotspot_locations": locations.len() - clusters.len(),
        "failures": failures,
        "manifest_hash": manifest.content_hash(),
    }))
}

pub fn train_model(ws: &Workspace, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Value> {
    let manifest = ws.manifest()?;
    let model = build_model::<f32>(spec)?;
    let (model, log) = train(model, &manifest, ws.root(), cfg)?;
    let (_, test) = manifest.split();
    let metrics = evaluate(&model, &test, ws.root())?;
    save_checkpoint(&model, &ws.model_path(), Some(cfg), Some(&manifest.content_hash()))?;
    atomic_write(&ws.path("models/metrics.json"), &to_json(&metrics)?)?;
    atomic_write(&ws.path("models/training_log.json"), &to_json(&log)?)?;
    Ok(json!({
        "model": "models/model.json",
        "accuracy": metrics.accuracy,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "test_size": test.len(),
        "epochs": log.epochs.len(),
    }))
}

/// Stable identity of the trained model: architecture plus a weights digest.
pub fn model_identity(ws: &Workspace) -> Result<String> {
    let path = ws.model_path();
    let bytes = std::fs::read(&path)?;
    let sidecar: saferoad::classifier::CheckpointSidecar =
        read_json(&saferoad::classifier::sidecar_path(&path), "model sidecar")?;
    let spec = sidecar.model_spec;
    Ok(format!(
        "{}{}@{}",
        serde_json::to_value(spec.backbone).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        if spec.abm_enabled { "+abm" } else { "" },
        &sha256_hex(&bytes)[..12]
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CamOutput {
    pub image_id: String,
    pub method: CamMethod,
    pub threshold: f64,
    pub layer: String,
    pub mask_id: String,
    pub mask_area: usize,
    pub width: u32,
    pub height: u32,
    /// Base64 grayscale PNG of the normalised heatmap.
    pub heatmap_png: String,
    /// Base64 RGB PNG of the heatmap over the image.
    pub overlay_png: String,
}

pub fn cam_mask_id(image_id: &str, method: CamMethod, threshold: f64) -> String {
    let method = serde_json::to_value(method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!("{image_id}-cam-{method}-t{:03}", (threshold * 1000.0).round() as i64)
}

/// CAM heatmap and thresholded AP mask for one image, both persisted.
pub fn cam(ws: &Workspace, model: &Classifier, image_id: &str, request: &CamRequest, threshold: f64) -> Result<CamOutput> {
    let record = ws.record(image_id)?;
    let image = ws.load_image(&record)?;
    let heat = compute_cam(model, &image, request)?;
    let mask = threshold_to_mask(&heat, threshold, default_min_area(image.width(), image.height()))?;
    let layer = request.layer.clone().unwrap_or_else(|| model.default_cam_layer().to_string());
    let mask_id = cam_mask_id(image_id, request.method, threshold);
    let sidecar = HeatmapSidecar {
        method: request.method,
        target_class: request.target_class,
        layer: layer.clone(),
        threshold: Some(threshold),
        colormap: Some(OVERLAY_COLORMAP.into()),
        width: heat.width,
        height: heat.height,
    };
    save_heatmap(&heat, &ws.path(format!("masks/{mask_id}-heat.png")), &sidecar)?;
    save_mask(
        &mask,
        &ws.path(Workspace::mask_rel(&mask_id)),
        Polarity::Change,
        MaskSource::Cam,
        vec![image_id.to_string()],
    )?;
    let cam_cfg = CamConfig {
        request: request.clone(),
        threshold,
        min_area: Some(default_min_area(image.width(), image.height())),
    };
    atomic_write(&ws.path(format!("masks/{mask_id}.cam.json")), &to_json(&cam_cfg)?)?;
    Ok(CamOutput {
        image_id: image_id.into(),
        method: request.method,
        threshold,
        layer,
        mask_id,
        mask_area: mask.area(),
        width: image.width(),
        height: image.height(),
        heatmap_png: B64.encode(encode_png(&heat.to_gray())),
        overlay_png: B64.encode(encode_png(&heat.overlay(&image, 0.5))),
    })
}

/// Rasterises operator strokes at the image's size and stores the mask under
/// a content-derived id, so resubmitting the same strokes is a no-op.
pub fn save_scribble_mask(ws: &Workspace, image_id: &str, scribbles: &ScribbleSet) -> Result<Value> {
    scribbles.validate()?;
    let record = ws.record(image_id)?;
    let (w, h) = image::image_dimensions(ws.path(&record.file_path))
        .map_err(|e| GatewayError::internal(format!("{}: {e}", record.file_path)))?;
    let mask = rasterize_scribbles(scribbles, w, h);
    let png = mask.to_png(Polarity::Change);
    let mask_id = format!("{image_id}-scribble-{}", &sha256_hex(&png)[..12]);
    save_mask(
        &mask,
        &ws.path(Workspace::mask_rel(&mask_id)),
        Polarity::Change,
        MaskSource::Scribble,
        vec![image_id.to_string()],
    )?;
    Ok(json!({"mask_id": mask_id, "area": mask.area(), "width": w, "height": h}))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintJobPayload {
    pub image_id: String,
    pub mask_id: String,
    pub params: InpaintParams,
}

/// Parses an inpaint request body. Parameters may sit at the top level or
/// under `params`; omitted ones come from the workspace defaults.
pub fn parse_inpaint_body(ws: &Workspace, body: &Value) -> Result<InpaintJobPayload> {
    let obj = body
        .as_object()
        .ok_or_else(|| GatewayError::bad_request("INVALID_REQUEST", "request body must be a JSON object"))?;
    let field = |name: &str| {
        obj.get(name)
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| GatewayError::bad_request("INVALID_REQUEST", format!("`{name}` is required")))
    };
    let image_id = field("image_id")?;
    let mask_id = field("mask_id")?;
    let mut params = serde_json::to_value(&ws.config.inpaint.defaults).map_err(|e| GatewayError::internal(e.to_string()))?;
    let target = params.as_object_mut().expect("params serialize to an object");
    for (k, v) in obj {
        if k != "image_id" && k != "mask_id" && k != "params" {
            target.insert(k.clone(), v.clone());
        }
    }
    if let Some(Value::Object(nested)) = obj.get("params") {
        for (k, v) in nested {
            target.insert(k.clone(), v.clone());
        }
    }
    let params: InpaintParams = serde_json::from_value(params)
        .map_err(|e| GatewayError::bad_request("INVALID_REQUEST", format!("invalid inpaint parameters: {e}")))?;
    params.validate()?;
    Ok(InpaintJobPayload { image_id, mask_id, params })
}

pub fn jobs(ws: &Workspace) -> JobStore {
    JobStore::new(ws.jobs_dir())
}

/// Validates, records a queued job and opens the redesign session
/// (`session_id == job_id`).
pub fn submit_inpaint(ws: &Workspace, payload: InpaintJobPayload) -> Result<(Job, Vec<String>)> {
    let record = ws.record(&payload.image_id)?;
    let mask = ws.load_mask(&payload.mask_id)?;
    let (w, h) = image::image_dimensions(ws.path(&record.file_path))
        .map_err(|e| GatewayError::internal(format!("{}: {e}", record.file_path)))?;
    if mask.dimensions() != (w, h) {
        return Err(GatewayError::bad_request(
            "GEOMETRY_MISMATCH",
            format!("mask is {:?}, image is {:?}", mask.dimensions(), (w, h)),
        ));
    }
    let warnings = payload.params.warnings();
    let job = Job::new(
        JobKind::Inpaint,
        serde_json::to_value(&payload).map_err(|e| GatewayError::internal(e.to_string()))?,
    );
    jobs(ws).save(&job)?;
    let cam: Option<CamConfig> = read_json(&ws.path(format!("masks/{}.cam.json", payload.mask_id)), "cam config").ok();
    ws.sessions().append(RedesignSession {
        session_id: job.job_id.clone(),
        image_id: payload.image_id,
        original_path: record.file_path,
        cam,
        mask_id: Some(payload.mask_id),
        inpaint: Some(payload.params),
        ..Default::default()
    })?;
    Ok((job, warnings))
}

/// Runs a queued inpaint job to completion. Backend failures end the job in
/// `failed` with the error text; only bookkeeping failures are returned.
pub fn run_inpaint_job(ws: &Workspace, backend: &dyn InpaintBackend, job_id: &str) -> Result<Job> {
    let store = jobs(ws);
    let mut job = store.transition(job_id, JobState::Running)?;
    let outcome = execute_inpaint(ws, backend, &job);
    let candidate_ids = outcome
        .as_ref()
        .ok()
        .and_then(|v| v["candidates"].as_array().cloned())
        .map(|c| c.iter().filter_map(|c| c["candidate_id"].as_str().map(String::from)).collect::<Vec<_>>());
    // The session learns its candidates before the job reads as done, so a
    // client that saw `done` can select right away.
    if let Some(ids) = candidate_ids {
        if let Some(mut session) = ws.sessions().get(job_id)? {
            session.candidates = ids;
            ws.sessions().append(session)?;
        }
    }
    job.finish(outcome.map_err(|e| e.to_string()))?;
    store.save(&job)?;
    Ok(job)
}

fn execute_inpaint(ws: &Workspace, backend: &dyn InpaintBackend, job: &Job) -> Result<Value> {
    let payload: InpaintJobPayload =
        serde_json::from_value(job.payload.clone()).map_err(|e| GatewayError::internal(e.to_string()))?;
    let record = ws.record(&payload.image_id)?;
    let image = ws.load_image(&record)?;
    let mask = ws.load_mask(&payload.mask_id)?;
    let request = InpaintRequest {
        image_id: payload.image_id,
        mask,
        params: payload.params,
    };
    let result = inpaint(&request, &image, backend)?;
    let mut candidates = Vec::new();
    for (i, c) in result.candidates.iter().enumerate() {
        let candidate_id = format!("c{i}");
        let rel = Workspace::candidate_rel(&job.job_id, &candidate_id);
        atomic_write(&ws.path(&rel), &c.png())?;
        candidates.push(json!({"candidate_id": candidate_id, "seed": c.seed, "path": rel}));
    }
    Ok(json!({"candidates": candidates, "backend": result.backend, "warnings": result.warnings}))
}

/// Records the operator's choice and scores the session.
pub fn select_candidate(ws: &Workspace, model: &Classifier, session_id: &str, candidate_id: &str) -> Result<RedesignSession> {
    let store = ws.sessions();
    let mut session = store.get(session_id)?.ok_or_else(|| GatewayError::not_found("session", session_id))?;
    let job = jobs(ws).get(session_id)?;
    if job.state != JobState::Done {
        return Err(GatewayError::conflict(
            "JOB_NOT_DONE",
            format!("job {session_id} is {:?}; candidates exist only once it is done", job.state),
        ));
    }
    if !valid_id(candidate_id) || !session.candidates.iter().any(|c| c == candidate_id) {
        return Err(GatewayError::not_found("candidate", candidate_id));
    }
    session.choose(candidate_id, Workspace::candidate_rel(session_id, candidate_id))?;
    let (before, after) = score_session(model, &session, ws.root())?;
    session.p_before = Some(before);
    session.p_after = Some(after);
    session.operator_seconds = Some((chrono::Utc::now() - job.created_at).num_milliseconds() as f64 / 1000.0);
    Ok(store.append(session)?)
}

/// Aggregates the latest revision of every session into `reports/latest.*`.
pub fn report(ws: &Workspace) -> Result<EvalReport> {
    let sessions = ws.sessions().latest()?;
    let model = model_identity(ws).unwrap_or_else(|_| "unknown".into());
    let report = aggregate(&model, &sessions)?;
    report.save(&ws.reports_dir(), "latest")?;
    Ok(report)
}

fn cam_mask_config(ws: &Workspace) -> CamMaskConfig {
    CamMaskConfig {
        request: ws.config.cam_request(),
        threshold: ws.config.cam.threshold,
        min_area: None,
    }
}

pub fn saliency_for(ws: &Workspace, model: &Classifier, backend: &dyn SaliencyBackend, image_id: &str) -> Result<Value> {
    let record = ws.record(image_id)?;
    let image = ws.load_image(&record)?;
    let ap = ap_mask(model, &image, &cam_mask_config(ws))?;
    let salient = backend.salient_region(image_id, &image)?;
    let ratio = match ap_saliency_ratio(&salient.mask, &ap) {
        Ok(r) => Some(r),
        Err(SaliencyError::EmptyApMask) => None,
        Err(e) => return Err(e.into()),
    };
    let salient_id = format!("{image_id}-salient");
    save_mask(
        &salient.mask,
        &ws.path(Workspace::mask_rel(&salient_id)),
        Polarity::Change,
        MaskSource::Composed,
        vec![image_id.to_string()],
    )?;
    Ok(json!({
        "image_id": image_id,
        "source": salient.source,
        "salient_mask_id": salient_id,
        "salient_area": salient.mask.area(),
        "ap_area": ap.area(),
        "ratio_percent": ratio,
        "salient_mask_png": B64.encode(salient.mask.to_png(Polarity::Change)),
    }))
}

/// Saliency ratios over every hotspot image, written to `reports/saliency.*`.
pub fn saliency_batch(ws: &Workspace, model: &Classifier, backend: &dyn SaliencyBackend) -> Result<SaliencyReport> {
    let manifest = ws.manifest()?;
    let mut images = Vec::new();
    for r in manifest.records.iter().filter(|r| r.label == Label::Hotspot) {
        images.push((r.image_id.clone(), ws.load_image(r)?));
    }
    let report = batch_saliency_report(model, &images, &cam_mask_config(ws), backend)?;
    atomic_write(&ws.path("reports/saliency.csv"), report.to_csv().as_bytes())?;
    atomic_write(&ws.path("reports/saliency.json"), &to_json(&report)?)?;
    Ok(report)
}

/// Fills the workspace with a synthetic labelled dataset.
pub fn toy_workspace(ws: &Workspace, n: usize, seed: u64) -> Result<Value> {
    let (manifest, _) = write_toy_dataset(ws.root(), n, seed, ws.config.split.test_fraction)?;
    manifest.save(&ws.manifest_dir())?;
    Ok(json!({"images": manifest.records.len(), "manifest_hash": manifest.content_hash()}))
}
