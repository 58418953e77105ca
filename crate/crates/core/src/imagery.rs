//! Street-view capture planning, a content-addressed image cache with an
//! offline fixture mode, and the labelled dataset manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the imagery provider API key.
pub const API_KEY_ENV: &str = "IMAGERY_API_KEY";

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("invalid capture plan: {0}")]
    InvalidPlan(String),
    #[error("imagery provider quota exceeded")]
    ProviderQuotaExceeded,
    #[error("no imagery at {0}")]
    NoImageryAtLocation(String),
    #[error("network failure: {0}")]
    NetworkFailure(String),
    #[error("fixture missing: {0}")]
    FixtureMissing(String),
    #[error("provider credentials missing: set {API_KEY_ENV} or enable fixture mode")]
    MissingCredentials,
    #[error("cache corruption: {path} hashes to {actual}, expected {expected}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("record {0} has no label for its location")]
    UnlabeledRecord(String),
    #[error("record {0} already carries a different label")]
    LabelConflict(String),
    #[error("duplicate image id {0}")]
    DuplicateImageId(String),
    #[error("test_fraction must lie in (0,1), got {0}")]
    InvalidTestFraction(f64),
    #[error("manifest format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ImageryError {
    pub fn code(&self) -> &'static str {
        match self {
            ImageryError::InvalidPlan(_) => "INVALID_CAPTURE_PLAN",
            ImageryError::ProviderQuotaExceeded => "PROVIDER_QUOTA_EXCEEDED",
            ImageryError::NoImageryAtLocation(_) => "NO_IMAGERY_AT_LOCATION",
            ImageryError::NetworkFailure(_) => "NETWORK_FAILURE",
            ImageryError::FixtureMissing(_) => "FIXTURE_MISSING",
            ImageryError::MissingCredentials => "MISSING_CREDENTIALS",
            ImageryError::HashMismatch { .. } => "CACHE_HASH_MISMATCH",
            ImageryError::UnlabeledRecord(_) => "UNLABELED_RECORD",
            ImageryError::LabelConflict(_) => "LABEL_CONFLICT",
            ImageryError::DuplicateImageId(_) => "DUPLICATE_IMAGE_ID",
            ImageryError::InvalidTestFraction(_) => "INVALID_TEST_FRACTION",
            ImageryError::Format(_) => "MANIFEST_FORMAT",
            ImageryError::Io(_) => "IO_ERROR",
        }
    }

    /// Errors worth retrying under the fetch retry policy.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ImageryError::ProviderQuotaExceeded | ImageryError::NoImageryAtLocation(_) | ImageryError::NetworkFailure(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

impl Location {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    /// Microdegree-rounded key used to join records with location labels.
    pub fn key(&self) -> LocationKey {
        LocationKey((self.lat * 1e6).round() as i64, (self.lon * 1e6).round() as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocationKey(pub i64, pub i64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Hotspot,
    NonHotspot,
    Unlabeled,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Hotspot => "hotspot",
            Label::NonHotspot => "non_hotspot",
            Label::Unlabeled => "unlabeled",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hotspot" => Ok(Label::Hotspot),
            "non_hotspot" | "nonhotspot" | "non-hotspot" => Ok(Label::NonHotspot),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Provider,
    Fixture,
}

/// Headings to capture around one location.
///
/// Headings are listed in sweep order, from the most counter-clockwise tile
/// to the most clockwise one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapturePlan {
    pub location: Location,
    pub headings: Vec<f64>,
    pub per_image_fov: f64,
    pub pitch: f64,
}

impl CapturePlan {
    pub fn keys(&self) -> impl Iterator<Item = CaptureKey> + '_ {
        self.headings.iter().map(move |&heading| CaptureKey {
            location: self.location,
            heading,
            fov: self.per_image_fov,
            pitch: self.pitch,
        })
    }

    /// Angular span covered by the tiles.
    pub fn span(&self) -> f64 {
        self.per_image_fov * self.headings.len() as f64
    }
}

fn wrap_degrees(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Tiles `total_fov` degrees with non-overlapping `per_image_fov` views
/// centred on `base_heading`.
pub fn plan_captures(
    location: Location,
    total_fov: f64,
    per_image_fov: f64,
    base_heading: f64,
    pitch: f64,
) -> Result<CapturePlan, ImageryError> {
    if !(per_image_fov > 0.0 && per_image_fov <= total_fov && total_fov <= 360.0) {
        return Err(ImageryError::InvalidPlan(format!(
            "require 0 < per_image_fov ({per_image_fov}) <= total_fov ({total_fov}) <= 360"
        )));
    }
    // Tolerate float noise such as 240/80 = 3.0000000000000004.
    let count = ((total_fov / per_image_fov) - 1e-9).ceil().max(1.0) as usize;
    let centre = (count as f64 - 1.0) / 2.0;
    let headings = (0..count)
        .map(|i| wrap_degrees(base_heading + (i as f64 - centre) * per_image_fov))
        .collect();
    Ok(CapturePlan {
        location,
        headings,
        per_image_fov,
        pitch,
    })
}

/// Cache key of one capture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureKey {
    pub location: Location,
    pub heading: f64,
    pub fov: f64,
    pub pitch: f64,
}

impl CaptureKey {
    pub fn file_stem(&self) -> String {
        format!(
            "{:.6}_{:.6}_h{:.2}_f{:.2}_p{:.2}",
            self.location.lat, self.location.lon, self.heading, self.fov, self.pitch
        )
    }

    pub fn image_id(&self) -> String {
        let digest = Sha256::digest(self.file_stem().as_bytes());
        format!("img-{}", &hex::encode(digest)[..16])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub location: Location,
    pub heading: f64,
    pub label: Label,
    /// Path relative to the workspace root.
    pub file_path: String,
    pub content_hash: String,
    pub source: ImageSource,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Source of capture bytes.
pub trait ImageryProvider: Send + Sync {
    fn fetch(&self, key: &CaptureKey) -> Result<Vec<u8>, ImageryError>;
    fn source(&self) -> ImageSource;
}

impl<P: ImageryProvider + ?Sized> ImageryProvider for Box<P> {
    fn fetch(&self, key: &CaptureKey) -> Result<Vec<u8>, ImageryError> {
        (**self).fetch(key)
    }

    fn source(&self) -> ImageSource {
        (**self).source()
    }
}

/// Static street-view style HTTP API.
pub struct HttpProvider {
    pub endpoint: String,
    pub api_key: String,
    pub image_size: (u32, u32),
    client: reqwest::blocking::Client,
    requests: AtomicUsize,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Result<Self, ImageryError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ImageryError::NetworkFailure(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            image_size: (640, 640),
            client,
            requests: AtomicUsize::new(0),
        })
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, ImageryError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| ImageryError::MissingCredentials)?;
        Self::new(endpoint, key)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn request_url(&self, key: &CaptureKey) -> String {
        format!(
            "{}?size={}x{}&location={:.6},{:.6}&heading={}&fov={}&pitch={}&key={}",
            self.endpoint,
            self.image_size.0,
            self.image_size.1,
            key.location.lat,
            key.location.lon,
            key.heading,
            key.fov,
            key.pitch,
            self.api_key
        )
    }
}

impl ImageryProvider for HttpProvider {
    fn fetch(&self, key: &CaptureKey) -> Result<Vec<u8>, ImageryError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let response = self
            .client
            .get(self.request_url(key))
            .send()
            .map_err(|e| ImageryError::NetworkFailure(e.to_string()))?;
        match response.status().as_u16() {
            200 => response
                .bytes()
                .map(|b| b.to_vec())
                .map_err(|e| ImageryError::NetworkFailure(e.to_string())),
            404 => Err(ImageryError::NoImageryAtLocation(key.file_stem())),
            403 | 429 => Err(ImageryError::ProviderQuotaExceeded),
            code => Err(ImageryError::NetworkFailure(format!("HTTP {code}"))),
        }
    }

    fn source(&self) -> ImageSource {
        ImageSource::Provider
    }
}

/// Offline provider reading `<dir>/<file_stem>.{jpg,jpeg,png}`.
pub struct FixtureProvider {
    pub dir: PathBuf,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn fixture_path(&self, key: &CaptureKey) -> Option<PathBuf> {
        ["jpg", "jpeg", "png"]
            .iter()
            .map(|ext| self.dir.join(format!("{}.{ext}", key.file_stem())))
            .find(|p| p.is_file())
    }
}

impl ImageryProvider for FixtureProvider {
    fn fetch(&self, key: &CaptureKey) -> Result<Vec<u8>, ImageryError> {
        let path = self
            .fixture_path(key)
            .ok_or_else(|| ImageryError::FixtureMissing(self.dir.join(key.file_stem()).display().to_string()))?;
        Ok(std::fs::read(path)?)
    }

    fn source(&self) -> ImageSource {
        ImageSource::Fixture
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct KeyEntry {
    content_hash: String,
    file_path: String,
    source: ImageSource,
}

/// Content-addressed image cache under `<root>/<subdir>`.
///
/// Blobs are stored as `<sha256>.<ext>` and never rewritten; a key index maps
/// capture keys to blobs. Writes go through a temporary file and a rename.
pub struct ImageCache {
    root: PathBuf,
    subdir: String,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    // Fetch workers may write the same blob at once; each needs its own temp file.
    static SEQ: AtomicUsize = AtomicUsize::new(0);
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("blob"),
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}

fn extension_for(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Jpeg) => "jpg",
        _ => "bin",
    }
}

impl ImageCache {
    pub fn new(root: impl Into<PathBuf>, subdir: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            subdir: subdir.into(),
        }
    }

    fn index_path(&self, key: &CaptureKey) -> PathBuf {
        self.root
            .join(&self.subdir)
            .join("keys")
            .join(format!("{}.json", key.file_stem()))
    }

    /// Returns the cached record for `key`, verifying the blob hash.
    pub fn lookup(&self, key: &CaptureKey) -> Result<Option<ImageRecord>, ImageryError> {
        let index = self.index_path(key);
        if !index.is_file() {
            return Ok(None);
        }
        let entry: KeyEntry =
            serde_json::from_slice(&std::fs::read(&index)?).map_err(|e| ImageryError::Format(e.to_string()))?;
        let bytes = std::fs::read(self.root.join(&entry.file_path))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.content_hash {
            return Err(ImageryError::HashMismatch {
                path: entry.file_path,
                expected: entry.content_hash,
                actual,
            });
        }
        Ok(Some(ImageRecord {
            image_id: key.image_id(),
            location: key.location,
            heading: key.heading,
            label: Label::Unlabeled,
            file_path: entry.file_path,
            content_hash: entry.content_hash,
            source: entry.source,
        }))
    }

    pub fn store(&self, key: &CaptureKey, bytes: &[u8], source: ImageSource) -> Result<ImageRecord, ImageryError> {
        let hash = sha256_hex(bytes);
        let rel = format!("{}/{}.{}", self.subdir, hash, extension_for(bytes));
        let blob = self.root.join(&rel);
        if !blob.is_file() {
            atomic_write(&blob, bytes)?;
        }
        let entry = KeyEntry {
            content_hash: hash.clone(),
            file_path: rel.clone(),
            source,
        };
        atomic_write(
            &self.index_path(key),
            &serde_json::to_vec(&entry).map_err(|e| ImageryError::Format(e.to_string()))?,
        )?;
        Ok(ImageRecord {
            image_id: key.image_id(),
            location: key.location,
            heading: key.heading,
            label: Label::Unlabeled,
            file_path: rel,
            content_hash: hash,
            source,
        })
    }
}

/// Cache-first fetcher.
pub struct Fetcher<P> {
    pub cache: ImageCache,
    pub provider: P,
    pub retry: RetryPolicy,
}

impl<P: ImageryProvider> Fetcher<P> {
    pub fn new(cache: ImageCache, provider: P) -> Self {
        Self {
            cache,
            provider,
            retry: RetryPolicy::default(),
        }
    }

    /// Returns the cached image for `key`, fetching and caching it on a miss.
    pub fn fetch_image(&self, key: &CaptureKey) -> Result<ImageRecord, ImageryError> {
        if let Some(record) = self.cache.lookup(key)? {
            return Ok(record);
        }
        let mut attempt = 0;
        let bytes = loop {
            attempt += 1;
            match self.provider.fetch(key) {
                Ok(b) => break b,
                Err(e) if e.is_retriable() && attempt < self.retry.max_attempts => {
                    log::warn!("fetch {} failed ({e}); retrying", key.file_stem());
                    std::thread::sleep(Duration::from_millis(self.retry.backoff_ms * attempt as u64));
                }
                Err(e) => return Err(e),
            }
        };
        self.cache.store(key, &bytes, self.provider.source())
    }

    /// Fetches every key with at most `concurrency` requests in flight.
    /// Results are returned in input order.
    pub fn fetch_all(&self, keys: &[CaptureKey], concurrency: usize) -> Vec<Result<ImageRecord, ImageryError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<ImageRecord, ImageryError>>>> =
            keys.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..concurrency.clamp(1, keys.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= keys.len() {
                        break;
                    }
                    let r = self.fetch_image(&keys[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub split_seed: u64,
    pub test_fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    split_seed: u64,
    test_fraction: f64,
    record_count: usize,
    test_count: usize,
    label_counts: BTreeMap<String, usize>,
}

/// Applies per-location labels and fixes the split parameters.
pub fn build_manifest(
    records: Vec<ImageRecord>,
    labels: &HashMap<LocationKey, Label>,
    split_seed: u64,
    test_fraction: f64,
) -> Result<DatasetManifest, ImageryError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ImageryError::InvalidTestFraction(test_fraction));
    }
    let mut seen = HashSet::new();
    let mut labelled = Vec::with_capacity(records.len());
    for mut r in records {
        if !seen.insert(r.image_id.clone()) {
            return Err(ImageryError::DuplicateImageId(r.image_id));
        }
        let label = match labels.get(&r.location.key()) {
            Some(&l) if l != Label::Unlabeled => l,
            _ => return Err(ImageryError::UnlabeledRecord(r.image_id)),
        };
        if r.label != Label::Unlabeled && r.label != label {
            return Err(ImageryError::LabelConflict(r.image_id));
        }
        r.label = label;
        labelled.push(r);
    }
    Ok(DatasetManifest {
        records: labelled,
        split_seed,
        test_fraction,
    })
}

impl DatasetManifest {
    /// Number of test records per label.
    ///
    /// The total is `round(N * test_fraction)`; it is apportioned over labels
    /// by largest remainder so the split stays stratified.
    pub fn test_allocation(&self) -> BTreeMap<Label, usize> {
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_default() += 1;
        }
        let total = self.records.len() as f64;
        let target = (total * self.test_fraction).round() as usize;
        let mut alloc: BTreeMap<Label, usize> = BTreeMap::new();
        let mut remainders = Vec::new();
        for (&label, &n) in &counts {
            let exact = n as f64 * self.test_fraction;
            alloc.insert(label, exact.floor() as usize);
            remainders.push((exact - exact.floor(), label));
        }
        let mut assigned: usize = alloc.values().sum();
        // Largest remainder first; ties fall to the label order.
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        for (_, label) in remainders {
            if assigned >= target {
                break;
            }
            if alloc[&label] < counts[&label] {
                *alloc.get_mut(&label).expect("label present") += 1;
                assigned += 1;
            }
        }
        alloc
    }

    /// Deterministic stratified `(train, test)` split.
    pub fn split(&self) -> (Vec<&ImageRecord>, Vec<&ImageRecord>) {
        let alloc = self.test_allocation();
        let mut by_label: BTreeMap<Label, Vec<&ImageRecord>> = BTreeMap::new();
        for r in &self.records {
            by_label.entry(r.label).or_default().push(r);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed);
        let mut test_ids = HashSet::new();
        for (label, mut group) in by_label {
            group.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            group.shuffle(&mut rng);
            for r in group.into_iter().take(alloc[&label]) {
                test_ids.insert(r.image_id.as_str());
            }
        }
        self.records.iter().partition(|r| !test_ids.contains(r.image_id.as_str()))
    }

    pub fn has_both_labels(&self) -> bool {
        let labels: HashSet<Label> = self.records.iter().map(|r| r.label).collect();
        labels.contains(&Label::Hotspot) && labels.contains(&Label::NonHotspot)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the header fields and JSON Lines body.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}:{}\n", self.split_seed, self.test_fraction));
        h.update(self.records_jsonl());
        hex::encode(h.finalize())
    }

    /// Writes `<dir>/manifest.json` (split header) and `<dir>/records.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<(), ImageryError> {
        std::fs::create_dir_all(dir)?;
        let mut label_counts = BTreeMap::new();
        for r in &self.records {
            *label_counts.entry(r.label.to_string()).or_default() += 1;
        }
        let header = ManifestHeader {
            split_seed: self.split_seed,
            test_fraction: self.test_fraction,
            record_count: self.records.len(),
            test_count: self.test_allocation().values().sum(),
            label_counts,
        };
        atomic_write(
            &dir.join("manifest.json"),
            &serde_json::to_vec_pretty(&header).map_err(|e| ImageryError::Format(e.to_string()))?,
        )?;
        atomic_write(&dir.join("records.jsonl"), self.records_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ImageryError> {
        let header: ManifestHeader = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| ImageryError::Format(e.to_string()))?;
        let body = std::fs::read_to_string(dir.join("records.jsonl"))?;
        let records = body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ImageryError::Format(e.to_string())))
            .collect::<Result<Vec<ImageRecord>, _>>()?;
        if records.len() != header.record_count {
            return Err(ImageryError::Format(format!(
                "header lists {} records, body has {}",
                header.record_count,
                records.len()
            )));
        }
        Ok(Self {
            records,
            split_seed: header.split_seed,
            test_fraction: header.test_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn default_240_degree_plan_is_three_tiles() {
        let plan = plan_captures(Location::new(40.7, -74.0), 240.0, 80.0, 0.0, 0.0).unwrap();
        assert_eq!(plan.headings, vec![280.0, 0.0, 80.0]);
        assert_eq!(plan.span(), 240.0);
    }

    #[test]
    fn single_tile_plan() {
        let plan = plan_captures(Location::new(0.0, 0.0), 80.0, 80.0, 90.0, 0.0).unwrap();
        assert_eq!(plan.headings, vec![90.0]);
    }

    #[test]
    fn two_wide_tiles_cover_240() {
        let plan = plan_captures(Location::new(0.0, 0.0), 240.0, 120.0, 0.0, 0.0).unwrap();
        assert_eq!(sorted(plan.headings.clone()), vec![60.0, 300.0]);
        assert_eq!(plan.span(), 240.0);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let loc = Location::new(0.0, 0.0);
        assert!(plan_captures(loc, 80.0, 120.0, 0.0, 0.0).is_err());
        assert!(plan_captures(loc, 400.0, 80.0, 0.0, 0.0).is_err());
        assert!(plan_captures(loc, 80.0, 0.0, 0.0, 0.0).is_err());
    }

    fn record(id: &str, lat: f64) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            location: Location::new(lat, 0.0),
            heading: 0.0,
            label: Label::Unlabeled,
            file_path: format!("images/{id}.jpg"),
            content_hash: "00".into(),
            source: ImageSource::Fixture,
        }
    }

    #[test]
    fn ten_record_split_is_stratified_and_stable() {
        let records: Vec<_> = (0..10).map(|i| record(&format!("r{i}"), i as f64)).collect();
        let labels: HashMap<_, _> = (0..10)
            .map(|i| {
                let l = if i < 5 { Label::Hotspot } else { Label::NonHotspot };
                (Location::new(i as f64, 0.0).key(), l)
            })
            .collect();
        let m = build_manifest(records, &labels, 7, 0.3).unwrap();
        let (train, test) = m.split();
        assert_eq!(test.len(), 3);
        assert_eq!(train.len(), 7);
        for label in [Label::Hotspot, Label::NonHotspot] {
            let n = test.iter().filter(|r| r.label == label).count();
            assert!((1..=2).contains(&n));
        }
        let again: Vec<_> = m.split().1.iter().map(|r| r.image_id.clone()).collect();
        assert_eq!(again, test.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn corpus_sized_split_rounds_to_2999() {
        let mut records = Vec::new();
        let mut labels = HashMap::new();
        for i in 0..(5088 + 4908) {
            let lat = i as f64 * 1e-4;
            records.push(record(&format!("r{i}"), lat));
            let l = if i < 5088 { Label::Hotspot } else { Label::NonHotspot };
            labels.insert(Location::new(lat, 0.0).key(), l);
        }
        let m = build_manifest(records, &labels, 1, 0.3).unwrap();
        let alloc = m.test_allocation();
        assert_eq!(alloc.values().sum::<usize>(), 2999);
        assert_eq!(m.split().1.len(), 2999);
    }

    #[test]
    fn unlabeled_record_is_an_error() {
        let err = build_manifest(vec![record("x", 1.0)], &HashMap::new(), 0, 0.3).unwrap_err();
        assert!(matches!(err, ImageryError::UnlabeledRecord(_)));
    }
}
