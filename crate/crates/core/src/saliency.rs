//! Salient-region detection, the AP-feature saliency ratio and
//! luminance-preserving chrominance alteration.
//!
//! Colour work uses full-range BT.601 YCbCr:
//!
//! ```text
//! Y  =       0.299    R + 0.587    G + 0.114    B
//! Cb = 128 - 0.168736 R - 0.331264 G + 0.5      B
//! Cr = 128 + 0.5      R - 0.418688 G - 0.081312 B
//!
//! R = Y                        + 1.402    (Cr - 128)
//! G = Y - 0.344136 (Cb - 128)  - 0.714136 (Cr - 128)
//! B = Y + 1.772    (Cb - 128)
//! ```
//!
//! Hue is the angle `atan2(Cr - 128, Cb - 128)` in degrees and chroma the
//! length of `(Cb - 128, Cr - 128)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{GrayImage, Rgb, RgbImage};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apcam::{compute_cam, encode_png, threshold_to_mask, CamError, CamRequest};
use crate::classifier::ClassifierModel;
use crate::maskkit::{BinaryMask, MaskError, Polarity};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("saliency adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("AP mask is empty; the saliency ratio is undefined")]
    EmptyApMask,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SaliencyError {
    pub fn code(&self) -> &'static str {
        match self {
            SaliencyError::AdapterUnavailable(_) => "ADAPTER_UNAVAILABLE",
            SaliencyError::EmptyApMask => "EMPTY_AP_MASK",
            SaliencyError::GeometryMismatch(_) => "GEOMETRY_MISMATCH",
            SaliencyError::InvalidParams(_) => "INVALID_PARAMS",
            SaliencyError::Mask(e) => e.code(),
            SaliencyError::Cam(e) => e.code(),
            SaliencyError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    ExternalModel,
    BuiltinBaseline,
    Fixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SalientRegion {
    pub mask: BinaryMask,
    pub source: SaliencySource,
}

/// Default binarisation: mean + 1 standard deviation.
pub const DEFAULT_K: f64 = 1.0;

/// Binarises a continuous map at `mean + k * std`. A flat map has no
/// salient pixels.
pub fn binarize(values: &[f64], width: u32, height: u32, k: f64) -> BinaryMask {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-9 * mean.abs().max(1e-12)) {
        return BinaryMask::empty(width, height);
    }
    let t = mean + k * std;
    BinaryMask::from_bits(width, height, values.iter().map(|&v| v >= t).collect())
}

fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

fn box3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                    let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    s += src[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut s = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let o = k as i64 - r;
                    let (xx, yy) = if horizontal {
                        ((x + o).clamp(0, w as i64 - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h as i64 - 1))
                    };
                    s += wt * src[(yy * w as i64 + xx) as usize];
                }
                out[(y * w as i64 + x) as usize] = s / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Spectral-residual saliency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralResidual {
    /// Working resolution (longer side) for the frequency analysis.
    pub scale: u32,
    /// Gaussian smoothing of the saliency map at working resolution.
    pub sigma: f64,
    pub k: f64,
}

impl Default for SpectralResidual {
    fn default() -> Self {
        Self {
            scale: 64,
            sigma: 2.5,
            k: DEFAULT_K,
        }
    }
}

impl SpectralResidual {
    /// Continuous saliency map at the image's resolution.
    pub fn saliency_map(&self, image: &RgbImage) -> Vec<f64> {
        let (iw, ih) = image.dimensions();
        let long = iw.max(ih).max(1) as f64;
        let w = ((iw as f64 * self.scale as f64 / long).round() as usize).max(1);
        let h = ((ih as f64 * self.scale as f64 / long).round() as usize).max(1);
        let small = image::imageops::resize(image, w as u32, h as u32, image::imageops::FilterType::Triangle);
        let lum = luma(&small);
        let mut spec: Vec<Complex<f64>> = lum.iter().map(|&v| Complex::new(v / 255.0, 0.0)).collect();
        fft2(&mut spec, w, h, false);
        let log_amp: Vec<f64> = spec.iter().map(|c| (c.norm() + 1e-12).ln()).collect();
        let avg = box3(&log_amp, w, h);
        for (i, c) in spec.iter_mut().enumerate() {
            let phase = c.arg();
            *c = Complex::from_polar((log_amp[i] - avg[i]).exp(), phase);
        }
        fft2(&mut spec, w, h, true);
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        let smooth = gaussian_blur(&power, w, h, self.sigma);
        crate::apcam::upsample_bilinear(&smooth, h, w, ih as usize, iw as usize)
    }

    pub fn detect(&self, image: &RgbImage) -> BinaryMask {
        let (w, h) = image.dimensions();
        let lum = luma(image);
        let first = lum.first().copied().unwrap_or(0.0);
        if lum.iter().all(|&v| v == first) {
            return BinaryMask::empty(w, h);
        }
        binarize(&self.saliency_map(image), w, h, self.k)
    }
}

pub trait SaliencyBackend: Send + Sync {
    fn salient_region(&self, image_id: &str, image: &RgbImage) -> Result<SalientRegion, SaliencyError>;
}

impl SaliencyBackend for SpectralResidual {
    fn salient_region(&self, _: &str, image: &RgbImage) -> Result<SalientRegion, SaliencyError> {
        Ok(SalientRegion {
            mask: self.detect(image),
            source: SaliencySource::BuiltinBaseline,
        })
    }
}

/// Precomputed salient masks at `<dir>/<image_id>.png`.
#[derive(Clone, Debug)]
pub struct FixtureSaliency {
    pub dir: PathBuf,
}

impl SaliencyBackend for FixtureSaliency {
    fn salient_region(&self, image_id: &str, image: &RgbImage) -> Result<SalientRegion, SaliencyError> {
        let path = self.dir.join(format!("{image_id}.png"));
        let bytes = std::fs::read(&path)
            .map_err(|e| SaliencyError::AdapterUnavailable(format!("{}: {e}", path.display())))?;
        let mask = BinaryMask::from_png(&bytes, Polarity::Change)?;
        if mask.dimensions() != image.dimensions() {
            return Err(SaliencyError::GeometryMismatch(format!(
                "fixture {:?} vs image {:?}",
                mask.dimensions(),
                image.dimensions()
            )));
        }
        Ok(SalientRegion {
            mask,
            source: SaliencySource::Fixture,
        })
    }
}

/// External saliency model over HTTP.
///
/// POSTs `{"image_id", "image": <base64 PNG>}` and expects
/// `{"saliency": <base64 8-bit grayscale PNG>}` holding a continuous map,
/// which is binarised at `mean + k * std`.
pub struct HttpSaliency {
    endpoint: String,
    k: f64,
    client: reqwest::blocking::Client,
}

impl HttpSaliency {
    pub fn new(endpoint: impl Into<String>, k: f64) -> Result<Self, SaliencyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| SaliencyError::AdapterUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            k,
            client,
        })
    }
}

#[derive(Deserialize)]
struct SaliencyResponse {
    saliency: String,
}

impl SaliencyBackend for HttpSaliency {
    fn salient_region(&self, image_id: &str, image: &RgbImage) -> Result<SalientRegion, SaliencyError> {
        let unavailable = |e: reqwest::Error| SaliencyError::AdapterUnavailable(e.to_string());
        let body = serde_json::json!({"image_id": image_id, "image": B64.encode(encode_png(image))});
        let resp: SaliencyResponse = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?
            .json()
            .map_err(unavailable)?;
        let png = B64
            .decode(resp.saliency)
            .map_err(|e| SaliencyError::AdapterUnavailable(format!("bad base64: {e}")))?;
        let map = image::load_from_memory(&png)
            .map_err(|e| SaliencyError::AdapterUnavailable(format!("undecodable saliency map: {e}")))?
            .to_luma8();
        if map.dimensions() != image.dimensions() {
            return Err(SaliencyError::GeometryMismatch(format!(
                "saliency map {:?} vs image {:?}",
                map.dimensions(),
                image.dimensions()
            )));
        }
        let values: Vec<f64> = map.pixels().map(|p| p[0] as f64).collect();
        Ok(SalientRegion {
            mask: binarize(&values, map.width(), map.height(), self.k),
            source: SaliencySource::ExternalModel,
        })
    }
}

/// `100 * |salient ∩ ap| / |ap|`.
pub fn ap_saliency_ratio(salient: &BinaryMask, ap_mask: &BinaryMask) -> Result<f64, SaliencyError> {
    let both = salient.intersect(ap_mask)?.area();
    let ap = ap_mask.area();
    if ap == 0 {
        return Err(SaliencyError::EmptyApMask);
    }
    Ok(100.0 * both as f64 / ap as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub per_image: BTreeMap<String, f64>,
    /// Mean of `per_image` in key order; `None` when no image contributed.
    pub average: Option<f64>,
    /// Images whose AP mask was empty.
    pub excluded: Vec<String>,
}

impl SaliencyReport {
    /// Builds a report from per-image ratios (`None` = empty AP mask).
    pub fn from_ratios(items: impl IntoIterator<Item = (String, Option<f64>)>) -> Self {
        let mut report = SaliencyReport::default();
        for (id, ratio) in items {
            match ratio {
                Some(r) => {
                    report.per_image.insert(id, r);
                }
                None => report.excluded.push(id),
            }
        }
        report.excluded.sort();
        report.average = mean(report.per_image.values().copied());
        report
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,ratio_percent\n");
        for (id, r) in &self.per_image {
            let _ = writeln!(out, "{id},{r}");
        }
        for id in &self.excluded {
            let _ = writeln!(out, "{id},");
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug)]
pub struct CamMaskConfig {
    pub request: CamRequest,
    pub threshold: f64,
    /// `None` uses the default fraction of the image area.
    pub min_area: Option<usize>,
}

impl Default for CamMaskConfig {
    fn default() -> Self {
        Self {
            request: CamRequest::default(),
            threshold: crate::apcam::DEFAULT_THRESHOLD,
            min_area: None,
        }
    }
}

/// AP mask for one image: CAM heatmap thresholded and despeckled.
pub fn ap_mask<T: Scalar>(model: &ClassifierModel<T>, image: &RgbImage, cfg: &CamMaskConfig) -> Result<BinaryMask, SaliencyError> {
    let heat = compute_cam(model, image, &cfg.request)?;
    let min_area = cfg
        .min_area
        .unwrap_or_else(|| crate::apcam::default_min_area(image.width(), image.height()));
    Ok(threshold_to_mask(&heat, cfg.threshold, min_area)?)
}

/// Per-image AP saliency ratios over `images`, computed in parallel.
pub fn batch_saliency_report<T: Scalar>(
    model: &ClassifierModel<T>,
    images: &[(String, RgbImage)],
    cfg: &CamMaskConfig,
    backend: &dyn SaliencyBackend,
) -> Result<SaliencyReport, SaliencyError> {
    let ratios: Vec<(String, Option<f64>)> = images
        .par_iter()
        .map(|(id, img)| {
            let ap = ap_mask(model, img, cfg)?;
            let salient = backend.salient_region(id, img)?;
            match ap_saliency_ratio(&salient.mask, &ap) {
                Ok(r) => Ok((id.clone(), Some(r))),
                Err(SaliencyError::EmptyApMask) => Ok((id.clone(), None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, SaliencyError>>()?;
    Ok(SaliencyReport::from_ratios(ratios))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HueMode {
    #[default]
    AutoContrast,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChromaParams {
    pub strength: f64,
    pub target_hue_mode: HueMode,
    /// Target hue in degrees for [`HueMode::Fixed`], and the fallback when
    /// the surrounding ring has no measurable hue.
    pub fixed_hue: f64,
}

impl Default for ChromaParams {
    fn default() -> Self {
        Self {
            strength: 1.0,
            target_hue_mode: HueMode::AutoContrast,
            fixed_hue: 170.0,
        }
    }
}

/// Width in pixels of the ring whose hue drives auto-contrast.
pub const RING_WIDTH: u32 = 15;
/// Fraction of the in-gamut maximum chroma used for the target colour.
pub const TARGET_CHROMA: f64 = 0.9;

pub fn rgb_to_ycbcr(p: Rgb<u8>) -> (f64, f64, f64) {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    (
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    )
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> Rgb<u8> {
    let (u, v) = (cb - 128.0, cr - 128.0);
    let q = |x: f64| x.round().clamp(0.0, 255.0) as u8;
    Rgb([q(y + 1.402 * v), q(y - 0.344136 * u - 0.714136 * v), q(y + 1.772 * u)])
}

/// Hue in degrees, `[0, 360)`.
pub fn hue_deg(cb: f64, cr: f64) -> f64 {
    (cr - 128.0).atan2(cb - 128.0).to_degrees().rem_euclid(360.0)
}

/// Largest chroma along hue `theta` (radians) keeping RGB within [0, 255]
/// at luma `y`.
fn max_chroma(y: f64, theta: f64) -> f64 {
    let (c, s) = (theta.cos(), theta.sin());
    let slopes = [1.402 * s, -(0.344136 * c + 0.714136 * s), 1.772 * c];
    slopes
        .iter()
        .filter(|k| k.abs() > 1e-12)
        .map(|&k| if k > 0.0 { (255.0 - y) / k } else { y / -k })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Chroma-weighted mean hue of the ring around `region`, if any.
pub fn ring_mean_hue(image: &RgbImage, region: &BinaryMask) -> Option<f64> {
    let ring = region.dilate(RING_WIDTH).difference(region).ok()?;
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for (x, y, p) in image.enumerate_pixels() {
        if ring.get(x, y) {
            let (_, cb, cr) = rgb_to_ycbcr(*p);
            su += cb - 128.0;
            sv += cr - 128.0;
            n += 1;
        }
    }
    if n == 0 || (su / n as f64).hypot(sv / n as f64) < 1e-6 {
        return None;
    }
    Some(hue_deg(su + 128.0, sv + 128.0))
}

/// Shifts the chrominance of pixels inside `region` towards a saturated
/// target hue while keeping their luma. Pixels outside are never touched.
pub fn chrominance_alter(image: &RgbImage, region: &BinaryMask, params: &ChromaParams) -> Result<RgbImage, SaliencyError> {
    if region.dimensions() != image.dimensions() {
        return Err(SaliencyError::GeometryMismatch(format!(
            "region {:?} vs image {:?}",
            region.dimensions(),
            image.dimensions()
        )));
    }
    if !(0.0..=1.0).contains(&params.strength) {
        return Err(SaliencyError::InvalidParams(format!(
            "strength must be within [0, 1], got {}",
            params.strength
        )));
    }
    let mut out = image.clone();
    if params.strength == 0.0 || region.is_empty() {
        return Ok(out);
    }
    let target_hue = match params.target_hue_mode {
        HueMode::Fixed => params.fixed_hue,
        HueMode::AutoContrast => ring_mean_hue(image, region)
            .map(|h| (h + 180.0).rem_euclid(360.0))
            .unwrap_or(params.fixed_hue),
    };
    let theta = target_hue.to_radians();
    let s = params.strength;
    for (x, y, p) in out.enumerate_pixels_mut() {
        if !region.get(x, y) {
            continue;
        }
        let (yy, cb, cr) = rgb_to_ycbcr(*p);
        let c = TARGET_CHROMA * max_chroma(yy, theta);
        let u = (1.0 - s) * (cb - 128.0) + s * c * theta.cos();
        let v = (1.0 - s) * (cr - 128.0) + s * c * theta.sin();
        *p = ycbcr_to_rgb(yy, u + 128.0, v + 128.0);
    }
    Ok(out)
}

/// Writes the altered image as PNG plus a `.json` sidecar of the params.
pub fn save_altered(image: &RgbImage, path: &Path, params: &ChromaParams) -> Result<(), SaliencyError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_png(image))?;
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_vec_pretty(params).expect("params serialize"),
    )?;
    Ok(())
}

/// Grayscale rendering of a saliency mask, for inspection.
pub fn mask_preview(mask: &BinaryMask) -> GrayImage {
    mask.to_gray(Polarity::Change)
}

/// Shared handle used by services that hold one backend for many requests.
pub type SharedSaliency = Arc<dyn SaliencyBackend>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk_mask(w: u32, h: u32, cx: i64, cy: i64, r: i64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x as i64 - cx).pow(2) + (y as i64 - cy).pow(2) <= r * r)
    }

    #[test]
    fn uniform_gray_has_no_salient_region() {
        let img = RgbImage::from_pixel(96, 64, Rgb([120, 120, 120]));
        let m = SpectralResidual::default().detect(&img);
        assert!(m.area() as f64 <= 0.01 * 96.0 * 64.0);
    }

    #[test]
    fn bright_disk_is_salient() {
        let disk = disk_mask(128, 128, 50, 70, 10);
        let img = RgbImage::from_fn(128, 128, |x, y| if disk.get(x, y) { Rgb([240, 240, 240]) } else { Rgb([15, 15, 15]) });
        let m = SpectralResidual::default().detect(&img);
        let covered = m.intersect(&disk).unwrap().area() as f64 / disk.area() as f64;
        assert!(covered >= 0.8, "covered {covered}");
    }

    #[test]
    fn fixture_backend_returns_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let m = disk_mask(32, 32, 10, 10, 5);
        std::fs::write(dir.path().join("img-a.png"), m.to_png(Polarity::Change)).unwrap();
        let b = FixtureSaliency { dir: dir.path().to_path_buf() };
        let r = b.salient_region("img-a", &RgbImage::new(32, 32)).unwrap();
        assert_eq!(r.mask, m);
        assert_eq!(r.source, SaliencySource::Fixture);
        assert_eq!(b.salient_region("img-b", &RgbImage::new(32, 32)).unwrap_err().code(), "ADAPTER_UNAVAILABLE");
        assert_eq!(b.salient_region("img-a", &RgbImage::new(16, 32)).unwrap_err().code(), "GEOMETRY_MISMATCH");
    }

    #[test]
    fn ratio_examples() {
        let ap = BinaryMask::from_fn(64, 64, |x, y| x < 20 && y < 10);
        assert_eq!(ap.area(), 200);
        assert_eq!(ap_saliency_ratio(&BinaryMask::full(64, 64), &ap).unwrap(), 100.0);
        assert_eq!(ap_saliency_ratio(&ap.complement(), &ap).unwrap(), 0.0);
        let half = BinaryMask::from_fn(64, 64, |x, _| x < 10);
        assert_eq!(ap_saliency_ratio(&half, &ap).unwrap(), 50.0);
        assert_eq!(ap_saliency_ratio(&ap, &ap).unwrap(), 100.0);
        let err = ap_saliency_ratio(&ap, &BinaryMask::empty(64, 64)).unwrap_err();
        assert_eq!(err.code(), "EMPTY_AP_MASK");
    }

    #[test]
    fn report_average() {
        let r = SaliencyReport::from_ratios([("a".into(), Some(40.0)), ("b".into(), Some(60.0))]);
        assert_eq!(r.average, Some(50.0));
        let r = SaliencyReport::from_ratios([("a".to_string(), None)]);
        assert_eq!((r.per_image.len(), r.excluded_count(), r.average), (0, 1, None));
        assert!(r.to_csv().ends_with("a,\n"));
    }

    #[test]
    fn conversions_round_trip() {
        for p in [Rgb([0, 0, 0]), Rgb([255, 255, 255]), Rgb([255, 0, 0]), Rgb([12, 200, 77])] {
            let (y, cb, cr) = rgb_to_ycbcr(p);
            assert_eq!(ycbcr_to_rgb(y, cb, cr), p);
        }
    }

    #[test]
    fn chroma_identities() {
        let img = RgbImage::from_fn(40, 40, |x, y| Rgb([(x * 6) as u8, (y * 6) as u8, 90]));
        let region = disk_mask(40, 40, 20, 20, 8);
        let zero = ChromaParams { strength: 0.0, ..Default::default() };
        assert_eq!(chrominance_alter(&img, &region, &zero).unwrap(), img);
        assert_eq!(chrominance_alter(&img, &BinaryMask::empty(40, 40), &ChromaParams::default()).unwrap(), img);
        assert_eq!(
            chrominance_alter(&img, &BinaryMask::empty(4, 4), &ChromaParams::default()).unwrap_err().code(),
            "GEOMETRY_MISMATCH"
        );
        let bad = ChromaParams { strength: 1.5, ..Default::default() };
        assert!(chrominance_alter(&img, &region, &bad).is_err());
    }

    fn circular_distance(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(360.0);
        d.min(360.0 - d)
    }

    #[test]
    fn gray_square_on_green_turns_opposite() {
        let region = BinaryMask::from_fn(80, 80, |x, y| (30..50).contains(&x) && (30..50).contains(&y));
        let img = RgbImage::from_fn(80, 80, |x, y| if region.get(x, y) { Rgb([128, 128, 128]) } else { Rgb([40, 170, 60]) });
        let out = chrominance_alter(&img, &region, &ChromaParams::default()).unwrap();
        let (_, gcb, gcr) = rgb_to_ycbcr(Rgb([40, 170, 60]));
        let opposite = (hue_deg(gcb, gcr) + 180.0).rem_euclid(360.0);
        for (x, y, p) in out.enumerate_pixels() {
            let orig = img.get_pixel(x, y);
            if !region.get(x, y) {
                assert_eq!(p, orig);
                continue;
            }
            let (y0, _, _) = rgb_to_ycbcr(*orig);
            let (y1, cb, cr) = rgb_to_ycbcr(*p);
            assert!((y1 - y0).abs() <= 2.0);
            assert!(circular_distance(hue_deg(cb, cr), opposite) <= 15.0);
            assert!((cb - 128.0).hypot(cr - 128.0) > 20.0);
        }
    }

    proptest! {
        #[test]
        fn ratio_bounds_and_monotonicity(a in prop::collection::vec(any::<bool>(), 256), b in prop::collection::vec(any::<bool>(), 256), ap in prop::collection::vec(any::<bool>(), 256)) {
            let ap = BinaryMask::from_bits(16, 16, ap);
            prop_assume!(!ap.is_empty());
            let s = BinaryMask::from_bits(16, 16, a);
            let grown = s.union(&BinaryMask::from_bits(16, 16, b)).unwrap();
            let r1 = ap_saliency_ratio(&s, &ap).unwrap();
            let r2 = ap_saliency_ratio(&grown, &ap).unwrap();
            prop_assert!((0.0..=100.0).contains(&r1));
            prop_assert!(r2 >= r1);
        }

        #[test]
        fn chroma_preserves_luma_and_outside(
            pixels in prop::collection::vec(any::<[u8; 3]>(), 24 * 24),
            bits in prop::collection::vec(any::<bool>(), 24 * 24),
            strength in 0.0f64..=1.0,
            fixed in any::<bool>(),
            hue in 0.0f64..360.0,
        ) {
            let img = RgbImage::from_fn(24, 24, |x, y| Rgb(pixels[(y * 24 + x) as usize]));
            let region = BinaryMask::from_bits(24, 24, bits);
            let params = ChromaParams {
                strength,
                target_hue_mode: if fixed { HueMode::Fixed } else { HueMode::AutoContrast },
                fixed_hue: hue,
            };
            let out = chrominance_alter(&img, &region, &params).unwrap();
            for (x, y, p) in out.enumerate_pixels() {
                let o = img.get_pixel(x, y);
                if region.get(x, y) {
                    prop_assert!((rgb_to_ycbcr(*p).0 - rgb_to_ycbcr(*o).0).abs() <= 2.0);
                } else {
                    prop_assert_eq!(p, o);
                }
            }
        }
    }
}
