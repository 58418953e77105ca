//! Safe-road-design prompt catalog, fine-tuning recipe emission and the
//! inpainting backend adapters.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apcam::encode_png;
use crate::maskkit::{BinaryMask, Polarity};

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown design {0:?}")]
    UnknownDesign(String),
    #[error("no instance images for {0}")]
    EmptyInstanceSet(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out after {0:?}")]
    BackendTimeout(Duration),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl InpaintError {
    pub fn code(&self) -> &'static str {
        match self {
            InpaintError::InvalidRequest(_) => "INVALID_REQUEST",
            InpaintError::UnknownDesign(_) => "UNKNOWN_DESIGN",
            InpaintError::EmptyInstanceSet(_) => "EMPTY_INSTANCE_SET",
            InpaintError::BackendUnavailable(_) => "BACKEND_UNAVAILABLE",
            InpaintError::BackendTimeout(_) => "BACKEND_TIMEOUT",
            InpaintError::GeometryMismatch(_) => "GEOMETRY_MISMATCH",
            InpaintError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Chicane,
    Choker,
    CurbExtension,
    RaisedMedian,
    Roundabout,
    StreetPlaza,
    BigIntersection,
}

impl Design {
    pub const ALL: [Design; 7] = [
        Design::Chicane,
        Design::Choker,
        Design::CurbExtension,
        Design::RaisedMedian,
        Design::Roundabout,
        Design::StreetPlaza,
        Design::BigIntersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::Chicane => "chicane",
            Design::Choker => "choker",
            Design::CurbExtension => "curb_extension",
            Design::RaisedMedian => "raised_median",
            Design::Roundabout => "roundabout",
            Design::StreetPlaza => "street_plaza",
            Design::BigIntersection => "big_intersection",
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Design {
    type Err = InpaintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| InpaintError::UnknownDesign(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub design_name: Design,
    pub subject_word: String,
    pub class_prompt: String,
}

const LEAD: &str = "photo of";

impl PromptSpec {
    /// Class prompt with the subject word inserted after the leading
    /// "photo of".
    pub fn full_prompt(&self) -> String {
        match self.class_prompt.strip_prefix(LEAD) {
            Some(rest) => format!("{LEAD} {}{rest}", self.subject_word),
            None => format!("{} {}", self.subject_word, self.class_prompt),
        }
    }
}

const CATALOG: [(Design, &str, &str); 7] = [
    // Every class prompt starts with "photo of"; full_prompt relies on it.
    (
        Design::Chicane,
        "road-chicane0",
        "photo of S-shaped curve in the vehicle driving path, created by offset curb extensions in straight road",
    ),
    (
        Design::Choker,
        "road-choker0",
        "photo of parallel or offsetting curb extensions, which effectively reduce road width for a specific distance",
    ),
    (
        Design::CurbExtension,
        "road-curb0",
        "photo of extension of sidewalk at intersection for reducing crossing distance and increasing visibility",
    ),
    (
        Design::RaisedMedian,
        "road-median0",
        "photo of barriers in center portion of street or roadway separating different lanes and traffic direction",
    ),
    (
        Design::Roundabout,
        "road-circle0",
        "photo of roundabouts or traffic circle with a circular central space in middle of an intersection",
    ),
    (
        Design::StreetPlaza,
        "road-plaza0",
        "photo of small public spaces on road sides for pedestrians usage and is equipped with landscaping elements, street furniture, light poles, bench, flowers",
    ),
    (
        Design::BigIntersection,
        "road-intersection0",
        "photo of big intersection with bus corridors, different lane marking, crossways",
    ),
];

pub fn prompt_catalog() -> Vec<PromptSpec> {
    CATALOG
        .iter()
        .map(|&(design_name, subject, prompt)| PromptSpec {
            design_name,
            subject_word: subject.to_string(),
            class_prompt: prompt.to_string(),
        })
        .collect()
}

pub fn prompt_for(design: Design) -> PromptSpec {
    prompt_catalog()
        .into_iter()
        .find(|p| p.design_name == design)
        .expect("every design has a catalog entry")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMethod {
    Dreambooth,
    TextualInversion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamBoothParams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub class_images_per_class: u32,
}

impl Default for DreamBoothParams {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-6,
            class_images_per_class: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextualInversionParams {
    pub epochs: u32,
    pub embedding_learning_rate: f64,
    pub tokens_per_word: u32,
}

impl Default for TextualInversionParams {
    fn default() -> Self {
        Self {
            epochs: 2000,
            embedding_learning_rate: 0.005,
            tokens_per_word: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeDesign {
    pub design: Design,
    pub subject_word: String,
    pub class_prompt: String,
    pub instance_images: Vec<PathBuf>,
    /// Textual inversion only: one prompt file per instance image.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecipe {
    pub method: FinetuneMethod,
    pub base_model: String,
    pub designs: Vec<RecipeDesign>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dreambooth: Option<DreamBoothParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub textual_inversion: Option<TextualInversionParams>,
}

pub const DEFAULT_BASE_MODEL: &str = "stable-diffusion-v1-5";

fn instance_images(dir: &Path) -> Result<Vec<PathBuf>, InpaintError> {
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "webp")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Builds a recipe for the given designs and their instance-image
/// directories, writing `<out_dir>/<method>.toml` and `.json`. For textual
/// inversion a `<out_dir>/prompts/<design>/<image stem>.txt` file holding
/// the full prompt is written for every instance image.
pub fn emit_finetune_recipe(
    designs: &[(Design, PathBuf)],
    method: FinetuneMethod,
    out_dir: &Path,
) -> Result<FinetuneRecipe, InpaintError> {
    let mut entries = Vec::with_capacity(designs.len());
    for (design, dir) in designs {
        let images = instance_images(dir)?;
        if images.is_empty() {
            return Err(InpaintError::EmptyInstanceSet(format!("{design} ({})", dir.display())));
        }
        let spec = prompt_for(*design);
        let mut prompt_files = Vec::new();
        if method == FinetuneMethod::TextualInversion {
            let pdir = out_dir.join("prompts").join(design.name());
            std::fs::create_dir_all(&pdir)?;
            for img in &images {
                let stem = img.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let path = pdir.join(format!("{stem}.txt"));
                std::fs::write(&path, spec.full_prompt())?;
                prompt_files.push(path);
            }
        }
        entries.push(RecipeDesign {
            design: *design,
            subject_word: spec.subject_word,
            class_prompt: spec.class_prompt,
            instance_images: images,
            prompt_files,
        });
    }
    let recipe = FinetuneRecipe {
        method,
        base_model: DEFAULT_BASE_MODEL.to_string(),
        designs: entries,
        dreambooth: (method == FinetuneMethod::Dreambooth).then(DreamBoothParams::default),
        textual_inversion: (method == FinetuneMethod::TextualInversion).then(TextualInversionParams::default),
    };
    std::fs::create_dir_all(out_dir)?;
    let stem = match method {
        FinetuneMethod::Dreambooth => "dreambooth",
        FinetuneMethod::TextualInversion => "textual_inversion",
    };
    let toml = toml::to_string_pretty(&recipe).map_err(|e| InpaintError::InvalidRequest(e.to_string()))?;
    std::fs::write(out_dir.join(format!("{stem}.toml")), toml)?;
    std::fs::write(
        out_dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&recipe).expect("recipe serializes"),
    )?;
    Ok(recipe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Design(Design),
    Text(String),
}

impl Prompt {
    pub fn text(&self) -> String {
        match self {
            Prompt::Design(d) => prompt_for(*d).full_prompt(),
            Prompt::Text(t) => t.clone(),
        }
    }
}

pub const CFG_RANGE: (f64, f64) = (0.0, 30.0);
pub const DENOISE_RANGE: (f64, f64) = (0.0, 1.0);
/// Bands that give photorealistic results; values outside only warn.
pub const CFG_BAND: (f64, f64) = (7.0, 18.0);
pub const DENOISE_BAND: (f64, f64) = (0.65, 0.75);

/// Everything in an inpaint request except the image and mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintParams {
    pub prompt: Prompt,
    pub cfg_scale: f64,
    pub denoise_strength: f64,
    pub seed: u64,
    pub sampler_name: String,
    pub n_candidates: u32,
}

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            prompt: Prompt::Design(Design::Roundabout),
            cfg_scale: 12.0,
            denoise_strength: 0.70,
            seed: 0,
            sampler_name: "Euler a".to_string(),
            n_candidates: 4,
        }
    }
}

impl InpaintParams {
    pub fn validate(&self) -> Result<(), InpaintError> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        if !in_range(self.cfg_scale, CFG_RANGE) {
            return Err(InpaintError::InvalidRequest(format!(
                "cfg_scale must be within [0, 30], got {}",
                self.cfg_scale
            )));
        }
        if !in_range(self.denoise_strength, DENOISE_RANGE) {
            return Err(InpaintError::InvalidRequest(format!(
                "denoise_strength must be within [0, 1], got {}",
                self.denoise_strength
            )));
        }
        if self.n_candidates == 0 {
            return Err(InpaintError::InvalidRequest("n_candidates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let outside = |v: f64, (lo, hi): (f64, f64)| v < lo || v > hi;
        if outside(self.cfg_scale, CFG_BAND) {
            out.push(format!(
                "cfg_scale {} is outside the photorealistic band [7, 18]",
                self.cfg_scale
            ));
        }
        if outside(self.denoise_strength, DENOISE_BAND) {
            out.push(format!(
                "denoise_strength {} is outside the photorealistic band [0.65, 0.75]",
                self.denoise_strength
            ));
        }
        out
    }

    pub fn candidate_seed(&self, index: u32) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug)]
pub struct InpaintRequest {
    pub image_id: String,
    pub mask: BinaryMask,
    pub params: InpaintParams,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub image: RgbImage,
    pub seed: u64,
}

impl Candidate {
    pub fn png(&self) -> Vec<u8> {
        encode_png(&self.image)
    }
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub image_id: String,
    pub candidates: Vec<Candidate>,
    pub backend: String,
    pub request: InpaintParams,
    pub warnings: Vec<String>,
}

/// A diffusion inpainting service. Implementations may touch pixels outside
/// the mask; [`inpaint`] composites the original back.
pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> String;

    /// Returns one image per candidate seed, each the size of `image`.
    fn generate(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        params: &InpaintParams,
        seeds: &[u64],
    ) -> Result<Vec<RgbImage>, InpaintError>;
}

/// Deterministic stand-in: fills the mask with seeded noise around the mean
/// colour of the unmasked pixels and feathers the fill into the original
/// over the innermost [`MockBackend::FEATHER`] pixels of the mask.
#[derive(Clone, Debug, Default)]
pub struct MockBackend;

impl MockBackend {
    pub const FEATHER: u32 = 3;
    const NOISE: i32 = 16;
}

fn unmasked_mean(image: &RgbImage, mask: &BinaryMask) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (x, y, p) in image.enumerate_pixels() {
        if !mask.get(x, y) {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        [128.0; 3]
    } else {
        sum.map(|s| s / n as f64)
    }
}

/// Distance from each masked pixel to the nearest unmasked one, capped at
/// `cap + 1`.
fn inner_distance(mask: &BinaryMask, cap: u32) -> Vec<f64> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let r = cap as i64 + 1;
    let limit = r as f64;
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as u32, y as u32) {
                continue;
            }
            let mut best = limit;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if (0..w).contains(&nx) && (0..h).contains(&ny) && !mask.get(nx as u32, ny as u32) {
                        best = best.min(((dx * dx + dy * dy) as f64).sqrt());
                    }
                }
            }
            out[(y * w + x) as usize] = best;
        }
    }
    out
}

impl InpaintBackend for MockBackend {
    fn name(&self) -> String {
        "mock".to_string()
    }

    fn generate(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        _params: &InpaintParams,
        seeds: &[u64],
    ) -> Result<Vec<RgbImage>, InpaintError> {
        let mean = unmasked_mean(image, mask);
        let dist = inner_distance(mask, Self::FEATHER);
        let full = (Self::FEATHER + 1) as f64;
        Ok(seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = image.clone();
                for (x, y, p) in out.enumerate_pixels_mut() {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let grain = rng.gen_range(-Self::NOISE..=Self::NOISE) as f64;
                    let alpha = (dist[(y * image.width() + x) as usize] / full).min(1.0);
                    *p = Rgb(std::array::from_fn(|c| {
                        let fill = (mean[c] + grain).clamp(0.0, 255.0);
                        (alpha * fill + (1.0 - alpha) * p[c] as f64).round() as u8
                    }));
                }
                out
            })
            .collect())
    }
}

/// JSON-over-HTTP diffusion service.
///
/// POSTs `{image, mask, prompt, cfg_scale, denoise_strength, seed, sampler, n}`
/// (PNG images base64-encoded, mask white = inpaint) once per candidate seed
/// and expects `{"images": ["<base64 PNG>", ...]}` back.
pub struct HttpBackend {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, InpaintError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| InpaintError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            timeout,
            client,
        })
    }
}

#[derive(Serialize)]
pub struct BackendRequest<'a> {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub cfg_scale: f64,
    pub denoise_strength: f64,
    pub seed: u64,
    pub sampler: &'a str,
    pub n: u32,
}

#[derive(Deserialize)]
struct BackendResponse {
    images: Vec<String>,
}

impl InpaintBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn generate(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        params: &InpaintParams,
        seeds: &[u64],
    ) -> Result<Vec<RgbImage>, InpaintError> {
        let image_b64 = B64.encode(encode_png(image));
        let mask_b64 = B64.encode(mask.to_png(Polarity::Change));
        let prompt = params.prompt.text();
        let mut out = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let body = BackendRequest {
                image: image_b64.clone(),
                mask: mask_b64.clone(),
                prompt: prompt.clone(),
                cfg_scale: params.cfg_scale,
                denoise_strength: params.denoise_strength,
                seed,
                sampler: &params.sampler_name,
                n: 1,
            };
            let resp = self.client.post(&self.endpoint).json(&body).send().map_err(|e| {
                if e.is_timeout() {
                    InpaintError::BackendTimeout(self.timeout)
                } else {
                    InpaintError::BackendUnavailable(e.to_string())
                }
            })?;
            let resp = resp
                .error_for_status()
                .map_err(|e| InpaintError::BackendUnavailable(e.to_string()))?;
            let parsed: BackendResponse = resp
                .json()
                .map_err(|e| InpaintError::BackendUnavailable(format!("bad response: {e}")))?;
            let first = parsed
                .images
                .first()
                .ok_or_else(|| InpaintError::BackendUnavailable("response contained no images".into()))?;
            let bytes = B64
                .decode(first)
                .map_err(|e| InpaintError::BackendUnavailable(format!("bad base64: {e}")))?;
            let img = image::load_from_memory(&bytes)
                .map_err(|e| InpaintError::BackendUnavailable(format!("undecodable candidate: {e}")))?;
            out.push(img.to_rgb8());
        }
        Ok(out)
    }
}

/// Copies `original` over every pixel of `candidate` outside `mask`.
pub fn composite(original: &RgbImage, candidate: &mut RgbImage, mask: &BinaryMask) {
    for (x, y, p) in candidate.enumerate_pixels_mut() {
        if !mask.get(x, y) {
            *p = *original.get_pixel(x, y);
        }
    }
}

/// Validates the request, runs the backend and restores every unmasked
/// pixel of each candidate to its original value.
pub fn inpaint(
    request: &InpaintRequest,
    image: &RgbImage,
    backend: &dyn InpaintBackend,
) -> Result<InpaintResult, InpaintError> {
    request.params.validate()?;
    if request.mask.dimensions() != image.dimensions() {
        return Err(InpaintError::GeometryMismatch(format!(
            "mask is {:?}, image is {:?}",
            request.mask.dimensions(),
            image.dimensions()
        )));
    }
    let seeds: Vec<u64> = (0..request.params.n_candidates)
        .map(|i| request.params.candidate_seed(i))
        .collect();
    let images = backend.generate(image, &request.mask, &request.params, &seeds)?;
    if images.len() != seeds.len() {
        return Err(InpaintError::BackendUnavailable(format!(
            "expected {} candidates, backend returned {}",
            seeds.len(),
            images.len()
        )));
    }
    let mut candidates = Vec::with_capacity(images.len());
    for (mut img, seed) in images.into_iter().zip(seeds) {
        if img.dimensions() != image.dimensions() {
            return Err(InpaintError::GeometryMismatch(format!(
                "candidate is {:?}, image is {:?}",
                img.dimensions(),
                image.dimensions()
            )));
        }
        composite(image, &mut img, &request.mask);
        candidates.push(Candidate { image: img, seed });
    }
    let warnings = request.params.warnings();
    for w in &warnings {
        log::warn!("{}: {w}", request.image_id);
    }
    Ok(InpaintResult {
        image_id: request.image_id.clone(),
        candidates,
        backend: backend.name(),
        request: request.params.clone(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x ^ y) * 3 % 256) as u8]))
    }

    fn request(mask: BinaryMask, params: InpaintParams) -> InpaintRequest {
        InpaintRequest { image_id: "img-1".into(), mask, params }
    }

    #[test]
    fn catalog_entries() {
        let c = prompt_catalog();
        assert_eq!(c.len(), 7);
        assert_eq!(prompt_for(Design::Roundabout).subject_word, "road-circle0");
        assert!(prompt_for(Design::StreetPlaza).class_prompt.contains("landscaping elements, street furniture"));
        let chicane = prompt_for(Design::Chicane);
        assert_eq!(chicane.subject_word, "road-chicane0");
        assert!(chicane.class_prompt.starts_with("photo of S-shaped curve in the vehicle driving path"));
        assert!(c.iter().all(|p| p.class_prompt.starts_with("photo of ")));
        assert_eq!(c, prompt_catalog());
    }

    #[test]
    fn full_prompt_inserts_subject() {
        assert_eq!(
            prompt_for(Design::BigIntersection).full_prompt(),
            "photo of road-intersection0 big intersection with bus corridors, different lane marking, crossways"
        );
        assert_eq!("street_plaza".parse::<Design>().unwrap(), Design::StreetPlaza);
        assert!("bridge".parse::<Design>().is_err());
    }

    #[test]
    fn recipes() {
        let dir = tempfile::tempdir().unwrap();
        let inst = dir.path().join("circle");
        std::fs::create_dir_all(&inst).unwrap();
        for i in 0..3 {
            std::fs::write(inst.join(format!("{i}.png")), encode_png(&textured(4, 4))).unwrap();
        }
        std::fs::write(inst.join("notes.md"), "x").unwrap();
        let out = dir.path().join("out");
        let db = emit_finetune_recipe(&[(Design::Roundabout, inst.clone())], FinetuneMethod::Dreambooth, &out).unwrap();
        let p = db.dreambooth.clone().unwrap();
        assert_eq!((p.epochs, p.learning_rate, p.class_images_per_class), (2000, 1e-6, 50));
        assert_eq!(db.designs[0].instance_images.len(), 3);
        let back: FinetuneRecipe = toml::from_str(&std::fs::read_to_string(out.join("dreambooth.toml")).unwrap()).unwrap();
        assert_eq!(back, db);

        let ti = emit_finetune_recipe(&[(Design::Roundabout, inst)], FinetuneMethod::TextualInversion, &out).unwrap();
        let p = ti.textual_inversion.clone().unwrap();
        assert_eq!((p.epochs, p.embedding_learning_rate, p.tokens_per_word), (2000, 0.005, 8));
        assert_eq!(ti.designs[0].prompt_files.len(), 3);
        let text = std::fs::read_to_string(&ti.designs[0].prompt_files[0]).unwrap();
        assert!(text.starts_with("photo of road-circle0 roundabouts"));

        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let err = emit_finetune_recipe(&[(Design::Choker, empty)], FinetuneMethod::Dreambooth, &out).unwrap_err();
        assert_eq!(err.code(), "EMPTY_INSTANCE_SET");
    }

    #[test]
    fn defaults_and_bounds() {
        let p = InpaintParams::default();
        assert_eq!((p.cfg_scale, p.denoise_strength), (12.0, 0.70));
        assert!(p.warnings().is_empty());
        let bad = InpaintParams { cfg_scale: 31.0, ..p.clone() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("[0, 30]"), "{msg}");
        assert!(InpaintParams { denoise_strength: 1.1, ..p.clone() }.validate().is_err());
        assert!(InpaintParams { n_candidates: 0, ..p.clone() }.validate().is_err());
        let edge = InpaintParams { cfg_scale: 30.0, denoise_strength: 0.0, ..p };
        edge.validate().unwrap();
        assert_eq!(edge.warnings().len(), 2);
    }

    #[test]
    fn empty_mask_is_identity() {
        let img = textured(32, 24);
        let r = inpaint(&request(BinaryMask::empty(32, 24), InpaintParams::default()), &img, &MockBackend).unwrap();
        assert_eq!(r.candidates.len(), 4);
        assert!(r.candidates.iter().all(|c| c.image == img));
    }

    #[test]
    fn seeded_determinism() {
        let img = textured(32, 32);
        let mask = BinaryMask::from_fn(32, 32, |x, y| (8..24).contains(&x) && (8..24).contains(&y));
        let params = InpaintParams { seed: 99, n_candidates: 2, ..Default::default() };
        let a = inpaint(&request(mask.clone(), params.clone()), &img, &MockBackend).unwrap();
        let b = inpaint(&request(mask, params), &img, &MockBackend).unwrap();
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(x.png(), y.png());
        }
        assert_ne!(a.candidates[0].image, a.candidates[1].image);
        assert_eq!((a.candidates[0].seed, a.candidates[1].seed), (99, 100));
    }

    #[test]
    fn square_mask_replaced_outside_preserved() {
        let img = textured(64, 64);
        let mask = BinaryMask::from_fn(64, 64, |x, y| (20..40).contains(&x) && (20..40).contains(&y));
        let r = inpaint(&request(mask.clone(), InpaintParams { n_candidates: 1, ..Default::default() }), &img, &MockBackend).unwrap();
        let out = &r.candidates[0].image;
        let mut changed = 0;
        for (x, y, p) in out.enumerate_pixels() {
            if mask.get(x, y) {
                changed += (p != img.get_pixel(x, y)) as usize;
            } else {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert!(changed > 350, "only {changed} masked pixels changed");
        assert_eq!(r.backend, "mock");
    }

    #[test]
    fn geometry_mismatch() {
        let err = inpaint(&request(BinaryMask::empty(8, 8), InpaintParams::default()), &textured(9, 8), &MockBackend).unwrap_err();
        assert_eq!(err.code(), "GEOMETRY_MISMATCH");
    }

    struct Noisy;

    impl InpaintBackend for Noisy {
        fn name(&self) -> String {
            "noisy".into()
        }

        fn generate(&self, image: &RgbImage, _: &BinaryMask, _: &InpaintParams, seeds: &[u64]) -> Result<Vec<RgbImage>, InpaintError> {
            Ok(seeds.iter().map(|&s| RgbImage::from_pixel(image.width(), image.height(), Rgb([s as u8, 1, 2]))).collect())
        }
    }

    #[test]
    fn unavailable_http_backend() {
        let b = HttpBackend::new("http://127.0.0.1:9/inpaint", Duration::from_secs(2)).unwrap();
        let img = textured(8, 8);
        let err = inpaint(&request(BinaryMask::full(8, 8), InpaintParams::default()), &img, &b).unwrap_err();
        assert!(matches!(err.code(), "BACKEND_UNAVAILABLE" | "BACKEND_TIMEOUT"));
    }

    proptest! {
        #[test]
        fn compositing_preserves_unmasked(bits in prop::collection::vec(any::<bool>(), 16 * 16), seed in any::<u64>()) {
            let img = textured(16, 16);
            let mask = BinaryMask::from_bits(16, 16, bits);
            let params = InpaintParams { seed, n_candidates: 2, ..Default::default() };
            for backend in [&MockBackend as &dyn InpaintBackend, &Noisy] {
                let r = inpaint(&request(mask.clone(), params.clone()), &img, backend).unwrap();
                for c in &r.candidates {
                    for (x, y, p) in c.image.enumerate_pixels() {
                        if !mask.get(x, y) {
                            prop_assert_eq!(p, img.get_pixel(x, y));
                        }
                    }
                }
            }
        }
    }
}
