//! Binary masks, operator scribbles and segmentation-mask adapters.
//!
//! Internally a set bit always marks a region to change (or, for saliency
//! work, to attend to). The opposite convention only exists at the PNG
//! boundary and is recorded in the sidecar.

use std::collections::{BTreeMap, VecDeque};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("geometry mismatch for {name}: expected {expected:?}, found {found:?}")]
    GeometryMismatch {
        name: String,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("invalid mask PNG: {0}")]
    InvalidPng(String),
    #[error("segmentation adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("invalid scribble: {0}")]
    InvalidScribble(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MaskError {
    pub fn code(&self) -> &'static str {
        match self {
            MaskError::DimensionMismatch(..) => "DIMENSION_MISMATCH",
            MaskError::GeometryMismatch { .. } => "GEOMETRY_MISMATCH",
            MaskError::InvalidPng(_) => "INVALID_MASK_PNG",
            MaskError::AdapterUnavailable(_) => "ADAPTER_UNAVAILABLE",
            MaskError::InvalidScribble(_) => "INVALID_SCRIBBLE",
            MaskError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Row-major bits; panics if the length does not match.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "bit count must equal width*height");
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width;
        self.bits[(y * w + x) as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check(&self, other: &Self) -> Result<(), MaskError> {
        if self.dimensions() == other.dimensions() {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch(self.width, self.height, other.width, other.height))
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self, MaskError> {
        self.check(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a && b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn difference(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Euclidean dilation: every pixel within `radius` of a set pixel.
    pub fn dilate(&self, radius: u32) -> Self {
        let r = radius as i64;
        let mut out = self.clone();
        let offsets: Vec<(i64, i64)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let (w, h) = (self.width as i64, self.height as i64);
        for y in 0..h {
            for x in 0..w {
                if !self.bits[(y * w + x) as usize] {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if (0..w).contains(&nx) && (0..h).contains(&ny) {
                        out.bits[(ny * w + nx) as usize] = true;
                    }
                }
            }
        }
        out
    }

    /// 8-connected components as lists of pixel indices, in scan order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut seen = vec![false; self.bits.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                let (x, y) = (i as i64 % w, i as i64 / w);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (0..w).contains(&nx) && (0..h).contains(&ny) {
                            let j = (ny * w + nx) as usize;
                            if self.bits[j] && !seen[j] {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Drops 8-connected components smaller than `min_area` pixels.
    pub fn despeckle(&self, min_area: usize) -> Self {
        let mut out = Self::empty(self.width, self.height);
        for comp in self.components().into_iter().filter(|c| c.len() >= min_area) {
            for i in comp {
                out.bits[i] = true;
            }
        }
        out
    }

    /// 8-bit grayscale with set pixels written as 255 under
    /// [`Polarity::Change`] and as 0 under [`Polarity::Keep`].
    pub fn to_gray(&self, polarity: Polarity) -> GrayImage {
        let on = if polarity == Polarity::Change { 255 } else { 0 };
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { on } else { 255 - on }])
        })
    }

    pub fn from_gray(img: &GrayImage, polarity: Polarity) -> Result<Self, MaskError> {
        let on = if polarity == Polarity::Change { 255 } else { 0 };
        let mut bits = Vec::with_capacity(img.len());
        for (i, p) in img.pixels().enumerate() {
            match p[0] {
                0 | 255 => bits.push(p[0] == on),
                v => {
                    return Err(MaskError::InvalidPng(format!(
                        "pixel {i} has value {v}; masks may only contain 0 and 255"
                    )))
                }
            }
        }
        Ok(Self::from_bits(img.width(), img.height(), bits))
    }

    pub fn to_png(&self, polarity: Polarity) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray(polarity)
            .write_to(&mut buf, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        buf.into_inner()
    }

    /// Parses an 8-bit grayscale PNG holding only 0 and 255.
    pub fn from_png(bytes: &[u8], polarity: Polarity) -> Result<Self, MaskError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| MaskError::InvalidPng(e.to_string()))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Self::from_gray(&g, polarity),
            other => Err(MaskError::InvalidPng(format!(
                "expected 8-bit grayscale, found {:?}",
                other.color()
            ))),
        }
    }
}

/// Which pixel value marks the region to change in an exported PNG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// 255 = change, 0 = keep.
    #[default]
    Change,
    /// 0 = change, 255 = keep.
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Cam,
    Scribble,
    Segmentation,
    Composed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub polarity: Polarity,
    pub source: MaskSource,
    #[serde(default)]
    pub parent_ids: Vec<String>,
    pub width: u32,
    pub height: u32,
}

fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes `<path>` (PNG) and `<path stem>.json` (sidecar).
pub fn save_mask(
    mask: &BinaryMask,
    path: &Path,
    polarity: Polarity,
    source: MaskSource,
    parent_ids: Vec<String>,
) -> Result<(), MaskError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, mask.to_png(polarity))?;
    let sidecar = MaskSidecar {
        polarity,
        source,
        parent_ids,
        width: mask.width,
        height: mask.height,
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

/// Loads a mask and honours the polarity recorded in its sidecar; without a
/// sidecar the PNG is read as [`Polarity::Change`].
pub fn load_mask(path: &Path) -> Result<(BinaryMask, Option<MaskSidecar>), MaskError> {
    let sidecar: Option<MaskSidecar> = match std::fs::read(sidecar_path(path)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| MaskError::InvalidPng(format!("sidecar: {e}")))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let polarity = sidecar.as_ref().map(|s| s.polarity).unwrap_or_default();
    Ok((BinaryMask::from_png(&std::fs::read(path)?, polarity)?, sidecar))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrokeMode {
    #[default]
    Paint,
    Erase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    /// Polyline vertices in pixel coordinates `(x, y)`.
    pub points: Vec<(f64, f64)>,
    pub radius: f64,
    #[serde(default)]
    pub mode: StrokeMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScribbleSet {
    pub strokes: Vec<Stroke>,
}

impl ScribbleSet {
    pub fn validate(&self) -> Result<(), MaskError> {
        for (i, s) in self.strokes.iter().enumerate() {
            if !(s.radius.is_finite() && s.radius >= 1.0) {
                return Err(MaskError::InvalidScribble(format!("stroke {i}: radius must be >= 1, got {}", s.radius)));
            }
            if s.points.is_empty() {
                return Err(MaskError::InvalidScribble(format!("stroke {i}: no points")));
            }
            if s.points.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
                return Err(MaskError::InvalidScribble(format!("stroke {i}: non-finite point")));
            }
        }
        Ok(())
    }
}

/// Whether the pixel centre `p` lies within `r2 = radius²` of segment `a`-`b`.
/// All inputs are integral so the test is exact.
fn near_segment(p: (i64, i64), a: (i64, i64), b: (i64, i64), r2: f64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (vx, vy) = (p.0 - a.0, p.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let dot = vx * dx + vy * dy;
    let d2 = |x: i64, y: i64| (x * x + y * y) as f64;
    if dot <= 0 || len2 == 0 {
        d2(vx, vy) <= r2
    } else if dot >= len2 {
        d2(p.0 - b.0, p.1 - b.1) <= r2
    } else {
        let cross = (vx * dy - vy * dx) as i128;
        ((cross * cross) as f64) <= r2 * len2 as f64
    }
}

/// Rasterises strokes in order onto an empty `width`x`height` mask.
///
/// Vertices are clamped into the image and snapped to the nearest pixel
/// centre; a pixel is covered when its centre lies within `radius` of the
/// polyline (boundary inclusive).
pub fn rasterize_scribbles(scribbles: &ScribbleSet, width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height);
    if width == 0 || height == 0 {
        return mask;
    }
    let snap = |(x, y): (f64, f64)| {
        (
            x.clamp(0.0, (width - 1) as f64).round() as i64,
            y.clamp(0.0, (height - 1) as f64).round() as i64,
        )
    };
    for stroke in &scribbles.strokes {
        let value = stroke.mode == StrokeMode::Paint;
        let r2 = stroke.radius * stroke.radius;
        let reach = stroke.radius.ceil() as i64;
        let pts: Vec<(i64, i64)> = stroke.points.iter().copied().map(snap).collect();
        let segments: Vec<_> = if pts.len() == 1 {
            vec![(pts[0], pts[0])]
        } else {
            pts.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (a, b) in segments {
            let x0 = (a.0.min(b.0) - reach).max(0);
            let x1 = (a.0.max(b.0) + reach).min(width as i64 - 1);
            let y0 = (a.1.min(b.1) - reach).max(0);
            let y1 = (a.1.max(b.1) + reach).min(height as i64 - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if near_segment((x, y), a, b, r2) {
                        mask.bits[(y * width as i64 + x) as usize] = value;
                    }
                }
            }
        }
    }
    mask
}

pub const TRAFFIC_SIGN: &str = "traffic_sign";
pub const TRAFFIC_SIGNAL: &str = "traffic_signal";
pub const SIDEWALK: &str = "sidewalk";
pub const ROAD: &str = "road";

/// Per-class masks sharing one geometry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentMaskSet {
    masks: BTreeMap<String, BinaryMask>,
}

impl SegmentMaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: impl Into<String>, mask: BinaryMask) -> Result<(), MaskError> {
        let class = class.into();
        if let Some(first) = self.masks.values().next() {
            if first.dimensions() != mask.dimensions() {
                return Err(MaskError::GeometryMismatch {
                    name: class,
                    expected: first.dimensions(),
                    found: mask.dimensions(),
                });
            }
        }
        self.masks.insert(class, mask);
        Ok(())
    }

    pub fn get(&self, class: &str) -> Option<&BinaryMask> {
        self.masks.get(class)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Union of the AP mask, traffic signs, traffic signals and road markings.
/// Absent segment classes contribute nothing.
pub fn compose_saliency_mask(
    ap_mask: &BinaryMask,
    segments: &SegmentMaskSet,
    road_marking_mask: Option<&BinaryMask>,
) -> Result<BinaryMask, MaskError> {
    let mut out = ap_mask.clone();
    for part in [segments.get(TRAFFIC_SIGN), segments.get(TRAFFIC_SIGNAL), road_marking_mask]
        .into_iter()
        .flatten()
    {
        out = out.union(part)?;
    }
    Ok(out)
}

/// Source of per-class segmentation masks for an image.
pub trait SegmentationAdapter: Send + Sync {
    /// Raw per-class masks; geometry is checked by [`load_segment_masks`].
    fn fetch(&self, image_id: &str) -> Result<Vec<(String, BinaryMask)>, MaskError>;
}

/// Reads `<dir>/<image_id>/<class>.png`.
#[derive(Clone, Debug)]
pub struct FixtureSegmenter {
    dir: PathBuf,
}

impl FixtureSegmenter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl SegmentationAdapter for FixtureSegmenter {
    fn fetch(&self, image_id: &str) -> Result<Vec<(String, BinaryMask)>, MaskError> {
        let dir = self.dir.join(image_id);
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(MaskError::AdapterUnavailable(format!("{}: {e}", dir.display()))),
        };
        let mut out = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let class = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((class, load_mask(&path)?.0));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}

/// Segmentation service reached over HTTP.
///
/// `GET {endpoint}/segments/{image_id}` must answer
/// `{"masks": {"<class>": "<base64 PNG>", ...}}` with change polarity.
pub struct HttpSegmenter {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpSegmenter {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, MaskError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| MaskError::AdapterUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            client,
        })
    }
}

#[derive(Deserialize)]
struct SegmentResponse {
    masks: BTreeMap<String, String>,
}

impl SegmentationAdapter for HttpSegmenter {
    fn fetch(&self, image_id: &str) -> Result<Vec<(String, BinaryMask)>, MaskError> {
        let unavailable = |e: reqwest::Error| MaskError::AdapterUnavailable(e.to_string());
        let resp = self
            .client
            .get(format!("{}/segments/{image_id}", self.endpoint))
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?;
        let body: SegmentResponse = resp.json().map_err(unavailable)?;
        body.masks
            .into_iter()
            .map(|(class, b64)| {
                let png = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| MaskError::InvalidPng(format!("{class}: {e}")))?;
                Ok((class, BinaryMask::from_png(&png, Polarity::Change)?))
            })
            .collect()
    }
}

/// Loads per-class masks and checks each against the image geometry.
/// Classes the adapter does not report are simply absent.
pub fn load_segment_masks(
    image_id: &str,
    adapter: &dyn SegmentationAdapter,
    geometry: (u32, u32),
) -> Result<SegmentMaskSet, MaskError> {
    let mut set = SegmentMaskSet::new();
    for (class, mask) in adapter.fetch(image_id)? {
        if mask.dimensions() != geometry {
            return Err(MaskError::GeometryMismatch {
                name: class,
                expected: geometry,
                found: mask.dimensions(),
            });
        }
        set.insert(class, mask)?;
    }
    Ok(set)
}
