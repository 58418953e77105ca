//! Class activation maps for the hotspot classifier and their conversion
//! into binary AP-feature masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{image_tensor, ClassifierError, ClassifierModel, GradMode, HOTSPOT, NON_HOTSPOT, NUM_CLASSES};
use crate::maskkit::BinaryMask;
use crate::nn::{softmax, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CamError {
    #[error("layer not found: {0}")]
    LayerNotFound(String),
    #[error("non-finite gradient at layer {0}")]
    NonFiniteGradient(String),
    #[error("undecodable image: {0}")]
    UndecodableImage(String),
    #[error("invalid threshold {0}; must lie in (0,1)")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CamError {
    pub fn code(&self) -> &'static str {
        match self {
            CamError::LayerNotFound(_) => "LAYER_NOT_FOUND",
            CamError::NonFiniteGradient(_) => "NON_FINITE_GRADIENT",
            CamError::UndecodableImage(_) => "UNDECODABLE_IMAGE",
            CamError::InvalidThreshold(_) => "INVALID_THRESHOLD",
            CamError::Io(_) => "IO_ERROR",
        }
    }
}

impl From<ClassifierError> for CamError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::LayerNotFound(l) => CamError::LayerNotFound(l),
            ClassifierError::UndecodableImage(m) => CamError::UndecodableImage(m),
            other => CamError::UndecodableImage(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    #[default]
    Gradcam,
    Gradcampp,
    Scorecam,
}

impl std::str::FromStr for CamMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gradcam" => Ok(CamMethod::Gradcam),
            "gradcampp" | "gradcam++" => Ok(CamMethod::Gradcampp),
            "scorecam" => Ok(CamMethod::Scorecam),
            other => Err(format!("unknown CAM method {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetClass {
    #[default]
    Hotspot,
    NonHotspot,
}

impl TargetClass {
    pub fn index(self) -> usize {
        match self {
            TargetClass::Hotspot => HOTSPOT,
            TargetClass::NonHotspot => NON_HOTSPOT,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CamRequest {
    #[serde(default)]
    pub method: CamMethod,
    #[serde(default)]
    pub target_class: TargetClass,
    /// Backbone stage name; the model's default CAM layer when absent.
    #[serde(default)]
    pub layer: Option<String>,
    /// ScoreCAM only: grey level (0..=1) of the baseline image the masked
    /// input is blended towards.
    #[serde(default)]
    pub scorecam_baseline: f64,
}

impl CamRequest {
    pub fn new(method: CamMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

/// Per-pixel relevance in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    pub width: u32,
    pub height: u32,
    pub values: Vec<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![T::zero(); width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> T {
        self.values[(y * self.width + x) as usize]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    /// Clips negatives to 0 and scales so the maximum is 1 (when positive).
    pub fn normalized(mut self) -> Self {
        for v in &mut self.values {
            *v = v.max(T::zero());
        }
        let m = self.max();
        if m > T::zero() {
            for v in &mut self.values {
                *v = (*v / m).min(T::one());
            }
        }
        self
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let v = self.get(x, y).as_f64().clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// Blends the jet-coloured heatmap over `base` with weight `alpha`.
    pub fn overlay(&self, base: &RgbImage, alpha: f64) -> RgbImage {
        let base = if base.dimensions() == (self.width, self.height) {
            base.clone()
        } else {
            image::imageops::resize(base, self.width, self.height, image::imageops::FilterType::Triangle)
        };
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let c = jet(self.get(x, y).as_f64());
            let b = base.get_pixel(x, y);
            Rgb(std::array::from_fn(|i| {
                ((1.0 - alpha) * b[i] as f64 + alpha * c[i] as f64).round().clamp(0.0, 255.0) as u8
            }))
        })
    }
}

/// Name of the colormap used by [`Heatmap::overlay`].
pub const OVERLAY_COLORMAP: &str = "jet";

fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Bilinear resampling of a `h x w` plane to `out_h x out_w`, sampling at
/// pixel centres.
pub fn upsample_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, T::cast(c - i0 as f64))
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    out
}

/// Activations `[C,H,W]` and per-channel weights behind a heatmap.
#[derive(Clone, Debug)]
pub struct CamComponents<T> {
    pub layer: String,
    pub activations: Tensor<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> CamComponents<T> {
    /// `relu(sum_k w_k A_k)` at feature resolution.
    pub fn coarse_map(&self) -> Vec<T> {
        let (_, c, h, w) = self.activations.dims4();
        let hw = h * w;
        let a = self.activations.data();
        (0..hw)
            .map(|p| {
                let s: T = (0..c).map(|k| self.weights[k] * a[k * hw + p]).sum();
                s.max(T::zero())
            })
            .collect()
    }
}

fn resolve_layer<'a, T: Scalar>(model: &'a ClassifierModel<T>, req: &'a CamRequest) -> Result<&'a str, CamError> {
    let layer = req.layer.as_deref().unwrap_or_else(|| model.default_cam_layer());
    if model.has_layer(layer) {
        Ok(layer)
    } else {
        Err(CamError::LayerNotFound(layer.to_string()))
    }
}

/// Target-logit gradient with respect to the activations of `layer`.
fn layer_gradient<T: Scalar>(
    model: &ClassifierModel<T>,
    layer: &str,
    activations: &Tensor<T>,
    target: usize,
) -> Result<Tensor<T>, CamError> {
    let trace = model.trace_from(layer, activations.clone(), GradMode::Input)?;
    let mut seed = Tensor::zeros(&[1, NUM_CLASSES]);
    seed.data_mut()[target] = T::one();
    let grads = model.backprop(&trace, seed);
    let g = grads.get(trace.input).cloned().unwrap_or_else(|| Tensor::zeros(activations.shape()));
    if !g.all_finite() {
        return Err(CamError::NonFiniteGradient(layer.to_string()));
    }
    Ok(g)
}

fn gradcam_weights<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    let (_, c, h, w) = grad.dims4();
    let hw = h * w;
    let inv = T::cast(1.0 / hw as f64);
    (0..c).map(|k| grad.data()[k * hw..(k + 1) * hw].iter().copied().sum::<T>() * inv).collect()
}

/// Closed-form GradCAM++ weights assuming an exponential link between the
/// target score and the logit, which turns higher-order derivatives into
/// powers of the first-order gradient.
fn gradcampp_weights<T: Scalar>(act: &Tensor<T>, grad: &Tensor<T>) -> Vec<T> {
    let (_, c, h, w) = grad.dims4();
    let hw = h * w;
    let two = T::cast(2.0);
    (0..c)
        .map(|k| {
            let a = &act.data()[k * hw..(k + 1) * hw];
            let g = &grad.data()[k * hw..(k + 1) * hw];
            let sum_a: T = a.iter().copied().sum();
            g.iter()
                .map(|&gi| {
                    let g2 = gi * gi;
                    let denom = two * g2 + sum_a * g2 * gi;
                    let alpha = if denom != T::zero() { g2 / denom } else { T::zero() };
                    alpha * gi.max(T::zero())
                })
                .sum()
        })
        .collect()
}

/// Per-channel ScoreCAM weights: each channel, min-max normalised and
/// upsampled to the input size, masks the input; the masked input's
/// softmax probability for `target` is that channel's score, and the
/// scores are softmax-normalised across channels. No gradients are used.
pub fn scorecam_weights<T: Scalar>(
    model: &ClassifierModel<T>,
    input: &Tensor<T>,
    activations: &Tensor<T>,
    target: usize,
    baseline: T,
) -> Vec<T> {
    let (_, c, h, w) = activations.dims4();
    let (_, ci, s_h, s_w) = input.dims4();
    let hw = h * w;
    let plane = s_h * s_w;
    const CHUNK: usize = 16;
    let mut scores = Vec::with_capacity(c);
    for start in (0..c).step_by(CHUNK) {
        let end = (start + CHUNK).min(c);
        let mut batch = Vec::with_capacity((end - start) * ci * plane);
        for k in start..end {
            let a = &activations.data()[k * hw..(k + 1) * hw];
            let lo = a.iter().copied().fold(T::infinity(), T::min);
            let hi = a.iter().copied().fold(T::neg_infinity(), T::max);
            let span = hi - lo;
            let norm: Vec<T> = if span > T::zero() {
                a.iter().map(|&v| (v - lo) / span).collect()
            } else {
                vec![T::zero(); hw]
            };
            let m = upsample_bilinear(&norm, h, w, s_h, s_w);
            for ch in 0..ci {
                let x = &input.data()[ch * plane..(ch + 1) * plane];
                batch.extend(x.iter().zip(&m).map(|(&xv, &mv)| baseline + (xv - baseline) * mv));
            }
        }
        let probs = model.probabilities(&Tensor::from_vec(&[end - start, ci, s_h, s_w], batch));
        scores.extend(probs.iter().map(|p| p[target]));
    }
    softmax(&scores)
}

/// CAM components for an input tensor already at model resolution.
pub fn cam_components<T: Scalar>(
    model: &ClassifierModel<T>,
    input: &Tensor<T>,
    req: &CamRequest,
) -> Result<CamComponents<T>, CamError> {
    let layer = resolve_layer(model, req)?;
    let act = model.activation(input, layer)?;
    let target = req.target_class.index();
    let weights = match req.method {
        CamMethod::Gradcam => gradcam_weights(&layer_gradient(model, layer, &act, target)?),
        CamMethod::Gradcampp => gradcampp_weights(&act, &layer_gradient(model, layer, &act, target)?),
        CamMethod::Scorecam => scorecam_weights(model, input, &act, target, T::cast(req.scorecam_baseline)),
    };
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(CamError::NonFiniteGradient(layer.to_string()));
    }
    Ok(CamComponents {
        layer: layer.to_string(),
        activations: act,
        weights,
    })
}

/// Heatmap for `input` (`[1,3,S,S]`), upsampled to `width x height`.
pub fn compute_cam_tensor<T: Scalar>(
    model: &ClassifierModel<T>,
    input: &Tensor<T>,
    req: &CamRequest,
    width: u32,
    height: u32,
) -> Result<Heatmap<T>, CamError> {
    let comps = cam_components(model, input, req)?;
    let (_, _, h, w) = comps.activations.dims4();
    let values = upsample_bilinear(&comps.coarse_map(), h, w, height as usize, width as usize);
    Ok(Heatmap { width, height, values }.normalized())
}

/// Heatmap at the resolution of `image`.
pub fn compute_cam<T: Scalar>(model: &ClassifierModel<T>, image: &RgbImage, req: &CamRequest) -> Result<Heatmap<T>, CamError> {
    let x = image_tensor(image, model.spec().input_size);
    compute_cam_tensor(model, &x, req, image.width(), image.height())
}

pub fn compute_cam_bytes<T: Scalar>(model: &ClassifierModel<T>, bytes: &[u8], req: &CamRequest) -> Result<Heatmap<T>, CamError> {
    let img = image::load_from_memory(bytes).map_err(|e| CamError::UndecodableImage(e.to_string()))?;
    compute_cam(model, &img.to_rgb8(), req)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Default despeckling area as a fraction of the image.
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.001;

pub fn default_min_area(width: u32, height: u32) -> usize {
    (DEFAULT_MIN_AREA_FRACTION * width as f64 * height as f64).ceil() as usize
}

/// Pixels with `value >= threshold`, before despeckling.
pub fn threshold_raw<T: Scalar>(heatmap: &Heatmap<T>, threshold: f64) -> BinaryMask {
    let t = T::cast(threshold);
    BinaryMask::from_bits(heatmap.width, heatmap.height, heatmap.values.iter().map(|&v| v >= t).collect())
}

/// Thresholds (inclusive) and drops 8-connected components smaller than
/// `min_area` pixels.
pub fn threshold_to_mask<T: Scalar>(heatmap: &Heatmap<T>, threshold: f64, min_area: usize) -> Result<BinaryMask, CamError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CamError::InvalidThreshold(threshold));
    }
    Ok(threshold_raw(heatmap, threshold).despeckle(min_area))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub method: CamMethod,
    pub target_class: TargetClass,
    pub layer: String,
    pub threshold: Option<f64>,
    pub colormap: Option<String>,
    pub width: u32,
    pub height: u32,
}

/// Writes the heatmap as 8-bit grayscale PNG with a `.json` sidecar next to it.
pub fn save_heatmap<T: Scalar>(heatmap: &Heatmap<T>, path: &Path, sidecar: &HeatmapSidecar) -> Result<(), CamError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_png(&heatmap.to_gray()))?;
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_vec_pretty(sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}
