//! On-disk workspace: a directory of plain files that every CLI command and
//! the server read and write. All stored paths are relative to the root.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use saferoad::apcam::{CamMethod, CamRequest, DEFAULT_THRESHOLD};
use saferoad::classifier::{load_checkpoint, Backbone, ModelSpec, TrainConfig};
use saferoad::evalreport::SessionStore;
use saferoad::hotspot::ClusterParams;
use saferoad::imagery::{DatasetManifest, ImageRecord};
use saferoad::inpaint::{HttpBackend, InpaintBackend, InpaintParams, MockBackend};
use saferoad::maskkit::{load_mask, BinaryMask};
use saferoad::saliency::{HttpSaliency, SaliencyBackend, SpectralResidual, DEFAULT_K};
use saferoad::Classifier;

use crate::error::{GatewayError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const INPAINT_BACKEND_ENV: &str = "INPAINT_BACKEND_URL";
pub const SALIENCY_BACKEND_ENV: &str = "SALIENCY_BACKEND_URL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub total_fov: f64,
    pub per_image_fov: f64,
    pub base_heading: f64,
    pub pitch: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            total_fov: 240.0,
            per_image_fov: 80.0,
            base_heading: 0.0,
            pitch: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageryConfig {
    pub endpoint: String,
    /// Offline mode: read captures from this directory instead of the API.
    pub fixture_dir: Option<PathBuf>,
    pub concurrency: usize,
    /// Non-hotspot locations sampled per hotspot.
    pub non_hotspot_ratio: f64,
    pub non_hotspot_min_distance_m: f64,
}

impl Default for ImageryConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://maps.googleapis.com/maps/api/streetview".into(),
            fixture_dir: None,
            concurrency: 4,
            non_hotspot_ratio: 1.0,
            non_hotspot_min_distance_m: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub abm: bool,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Tinycnn,
            abm: false,
            input_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamConfig {
    pub method: CamMethod,
    pub threshold: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            method: CamMethod::Gradcam,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    /// Overridden by `INPAINT_BACKEND_URL`. Without either the mock backend runs.
    pub backend_url: Option<String>,
    pub timeout_secs: u64,
    pub defaults: InpaintParams,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            backend_url: None,
            timeout_secs: 300,
            defaults: InpaintParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    /// Overridden by `SALIENCY_BACKEND_URL`. Without either the built-in
    /// spectral-residual baseline runs.
    pub backend_url: Option<String>,
    pub k: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            backend_url: None,
            k: DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    /// Static console assets, relative to the workspace root.
    pub console_dir: PathBuf,
    pub page_size: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            console_dir: "console".into(),
            page_size: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub version: u32,
    pub cluster: ClusterParams,
    pub capture: CaptureConfig,
    pub imagery: ImageryConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cam: CamConfig,
    pub inpaint: InpaintConfig,
    pub saliency: SaliencyConfig,
    pub server: ServerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            cluster: ClusterParams::default(),
            capture: CaptureConfig::default(),
            imagery: ImageryConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cam: CamConfig::default(),
            inpaint: InpaintConfig::default(),
            saliency: SaliencyConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl Config {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.model.backbone, self.model.abm, self.model.input_size)
    }

    pub fn cam_request(&self) -> CamRequest {
        CamRequest::new(self.cam.method)
    }
}

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    pub config: Config,
}

impl Workspace {
    pub const CONFIG_FILE: &'static str = "config.toml";

    /// Opens `root`, reading `config.toml` (or `config.json`) when present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let toml_path = root.join(Self::CONFIG_FILE);
        let json_path = root.join("config.json");
        let config = if toml_path.is_file() {
            toml::from_str(&std::fs::read_to_string(&toml_path)?)
                .map_err(|e| GatewayError::bad_request("INVALID_CONFIG", format!("{}: {e}", toml_path.display())))?
        } else if json_path.is_file() {
            serde_json::from_slice(&std::fs::read(&json_path)?)
                .map_err(|e| GatewayError::bad_request("INVALID_CONFIG", format!("{}: {e}", json_path.display())))?
        } else {
            Config::default()
        };
        let config: Config = config;
        if config.version > CONFIG_VERSION {
            return Err(GatewayError::bad_request(
                "INVALID_CONFIG",
                format!("config version {} is newer than supported {CONFIG_VERSION}", config.version),
            ));
        }
        Ok(Self { root, config })
    }

    /// Creates the directory layout and writes the config if missing.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self> {
        let ws = Self::open(root)?;
        for dir in ["manifest", "images", "models", "masks", "jobs", "candidates", "reports", "events", "clusters"] {
            std::fs::create_dir_all(ws.root.join(dir))?;
        }
        if !ws.root.join(Self::CONFIG_FILE).exists() && !ws.root.join("config.json").exists() {
            ws.save_config()?;
        }
        Ok(ws)
    }

    pub fn save_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let text = toml::to_string_pretty(&self.config).map_err(|e| GatewayError::internal(e.to_string()))?;
        std::fs::write(self.root.join(Self::CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events").join("events.json")
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.root.join("clusters").join("clusters.geojson")
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("models").join("model.json")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn sessions(&self) -> SessionStore {
        SessionStore::new(self.root.join("sessions.jsonl"))
    }

    /// Relative path of a stored mask.
    pub fn mask_rel(mask_id: &str) -> String {
        format!("masks/{mask_id}.png")
    }

    pub fn candidate_rel(job_id: &str, candidate_id: &str) -> String {
        format!("candidates/{job_id}/{candidate_id}.png")
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let dir = self.manifest_dir();
        if !dir.join("manifest.json").is_file() {
            return Err(GatewayError::not_found("manifest", &dir.display().to_string()));
        }
        Ok(DatasetManifest::load(&dir)?)
    }

    pub fn record(&self, image_id: &str) -> Result<ImageRecord> {
        self.manifest()?
            .get(image_id)
            .cloned()
            .ok_or_else(|| GatewayError::not_found("image", image_id))
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<image::RgbImage> {
        let bytes = std::fs::read(self.path(&record.file_path))?;
        image::load_from_memory(&bytes)
            .map(|i| i.to_rgb8())
            .map_err(|e| GatewayError::internal(format!("{}: {e}", record.file_path)))
    }

    pub fn load_mask(&self, mask_id: &str) -> Result<BinaryMask> {
        if !valid_id(mask_id) {
            return Err(GatewayError::not_found("mask", mask_id));
        }
        let path = self.path(Self::mask_rel(mask_id));
        if !path.is_file() {
            return Err(GatewayError::not_found("mask", mask_id));
        }
        Ok(load_mask(&path)?.0)
    }

    pub fn load_model(&self) -> Result<Classifier> {
        let path = self.model_path();
        if !path.is_file() {
            return Err(GatewayError::unavailable(
                "MODEL_UNAVAILABLE",
                format!("no trained model at {}; run `saferoad train`", path.display()),
            ));
        }
        Ok(load_checkpoint::<f32>(&path)?.0)
    }

    pub fn inpaint_backend(&self) -> Result<Arc<dyn InpaintBackend>> {
        let url = std::env::var(INPAINT_BACKEND_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.config.inpaint.backend_url.clone());
        Ok(match url {
            Some(url) => Arc::new(HttpBackend::new(url, Duration::from_secs(self.config.inpaint.timeout_secs))?),
            None => Arc::new(MockBackend),
        })
    }

    pub fn saliency_backend(&self) -> Result<Arc<dyn SaliencyBackend>> {
        let url = std::env::var(SALIENCY_BACKEND_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.config.saliency.backend_url.clone());
        Ok(match url {
            Some(url) => Arc::new(HttpSaliency::new(url, self.config.saliency.k)?),
            None => Arc::new(SpectralResidual {
                k: self.config.saliency.k,
                ..SpectralResidual::default()
            }),
        })
    }
}

/// Ids that are safe to use as a single path component.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

/// Writes through a temporary file so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    static SEQ: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let seq = SEQ.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.{}.{seq}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::init(dir.path()).unwrap();
        ws.config.cluster.eps_meters = 42.0;
        ws.save_config().unwrap();
        let back = Workspace::open(dir.path()).unwrap();
        assert_eq!(back.config, ws.config);
        assert!(dir.path().join("masks").is_dir());
    }

    #[test]
    fn newer_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), "version = 99\n").unwrap();
        assert_eq!(Workspace::open(dir.path()).unwrap_err().code, "INVALID_CONFIG");
    }

    #[test]
    fn ids() {
        assert!(valid_id("img-abc_1.2"));
        assert!(!valid_id("../x"));
        assert!(!valid_id(""));
        assert!(!valid_id(".hidden"));
    }
}
