//! Two-class hotspot classifier: CNN backbone, optional attention block and a
//! two-output fully connected head followed by softmax.
//!
//! Class index 1 is the hotspot (positive) class throughout.

mod abm;
mod backbone;
mod checkpoint;
mod metrics;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{softmax, Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub use abm::{AbmSpec, AbmTrace};
pub use backbone::Backbone;
pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointSidecar};
pub use metrics::{evaluate, evaluate_samples, EvalMetrics};
pub use train::{train, train_samples, EpochLog, Sample, TrainConfig, TrainingLog};

use abm::Abm;
use backbone::{apply_stage, build_layout, ParamStore, Stage};

pub const NON_HOTSPOT: usize = 0;
pub const HOTSPOT: usize = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split contains no records")]
    EmptyDataset,
    #[error("training split contains only one class")]
    SingleClassDataset,
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("layer `{0}` not found in model")]
    LayerNotFound(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClassifierError {
    pub fn code(&self) -> &'static str {
        match self {
            ClassifierError::UnknownBackbone(_) => "UNKNOWN_BACKBONE",
            ClassifierError::InvalidSpec(_) => "INVALID_MODEL_SPEC",
            ClassifierError::InvalidConfig(_) => "INVALID_TRAIN_CONFIG",
            ClassifierError::EmptyDataset => "EMPTY_DATASET",
            ClassifierError::SingleClassDataset => "SINGLE_CLASS_DATASET",
            ClassifierError::EmptyTestSplit => "EMPTY_TEST_SPLIT",
            ClassifierError::UndecodableImage(_) => "UNDECODABLE_IMAGE",
            ClassifierError::LayerNotFound(_) => "LAYER_NOT_FOUND",
            ClassifierError::Checkpoint(_) => "CHECKPOINT_ERROR",
            ClassifierError::Io(_) => "IO_ERROR",
        }
    }
}

fn default_width() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub abm_enabled: bool,
    /// Square input edge in pixels.
    pub input_size: usize,
    pub num_classes: usize,
    /// Channel count of the first backbone stage; later stages scale from it.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub abm: AbmSpec,
    /// Seed for parameter initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(backbone: Backbone, abm_enabled: bool, input_size: usize) -> Self {
        Self {
            backbone,
            abm_enabled,
            input_size,
            num_classes: NUM_CLASSES,
            width: default_width(),
            abm: AbmSpec::default(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.num_classes != NUM_CLASSES {
            return Err(ClassifierError::InvalidSpec(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.input_size == 0 {
            return Err(ClassifierError::InvalidSpec("input_size must be positive".into()));
        }
        if self.width == 0 {
            return Err(ClassifierError::InvalidSpec("width must be positive".into()));
        }
        if self.abm.spatial_kernel.is_multiple_of(2) {
            return Err(ClassifierError::InvalidSpec("abm spatial_kernel must be odd".into()));
        }
        if self.abm.channel_reduction == 0 {
            return Err(ClassifierError::InvalidSpec("abm channel_reduction must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which leaves of a traced forward pass accumulate gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    None,
    Input,
    Parameters,
}

/// A recorded forward pass.
pub struct Trace<T> {
    pub tape: Tape<T>,
    pub input: Var,
    /// Output of every backbone stage executed, in order.
    pub layers: Vec<(String, Var)>,
    pub abm: Option<AbmTrace>,
    /// `[N, 2]` pre-softmax scores.
    pub logits: Var,
    pub param_vars: Vec<Var>,
}

impl<T: Scalar> Trace<T> {
    pub fn layer(&self, name: &str) -> Option<Var> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub struct ClassifierModel<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    stages: Vec<(String, Stage)>,
    abm: Option<Abm>,
    head_w: usize,
    head_b: usize,
    default_cam_layer: String,
    gradient_passes: AtomicUsize,
}

impl<T: Scalar> Clone for ClassifierModel<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            stages: self.stages.clone(),
            abm: self.abm.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
            default_cam_layer: self.default_cam_layer.clone(),
            gradient_passes: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for ClassifierModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("spec", &self.spec)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a randomly initialised model for `spec`.
pub fn build_model<T: Scalar>(spec: &ModelSpec) -> Result<ClassifierModel<T>, ClassifierError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut params = ParamStore::default();
    let layout = build_layout(spec.backbone, spec.width, &mut params, &mut rng);
    let abm = spec
        .abm_enabled
        .then(|| Abm::build(&spec.abm, layout.out_channels, &mut params, &mut rng));
    let head_w = params.init(&[NUM_CLASSES, layout.out_channels], layout.out_channels, &mut rng);
    let head_b = params.zeros(&[NUM_CLASSES]);
    let model = ClassifierModel {
        spec: spec.clone(),
        params,
        stages: layout.stages,
        abm,
        head_w,
        head_b,
        default_cam_layer: layout.default_cam_layer,
        gradient_passes: AtomicUsize::new(0),
    };
    if backbone::output_size(&model.stages, spec.input_size).is_none() {
        return Err(ClassifierError::InvalidSpec(format!(
            "input_size {} is too small for backbone {}",
            spec.input_size, spec.backbone
        )));
    }
    Ok(model)
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn default_cam_layer(&self) -> &str {
        &self.default_cam_layer
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.stages.iter().any(|(n, _)| n == name)
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params.tensors
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors.iter().map(|t| t.len()).sum()
    }

    /// Index of the head bias within [`Self::parameters`].
    pub fn head_bias_index(&self) -> usize {
        self.head_b
    }

    /// Number of backward passes run through [`Self::backprop`] so far.
    pub fn gradient_passes(&self) -> usize {
        self.gradient_passes.load(Ordering::Relaxed)
    }

    /// Forces every attention weight of the attention block to exactly 1.
    /// No-op when the block is disabled.
    pub fn set_abm_identity(&mut self) {
        if let Some(abm) = &self.abm {
            abm.set_identity(&mut self.params);
        }
    }

    /// Copies all parameters from `other` whose shapes line up positionally.
    /// Used to share backbone and head weights between models that differ
    /// only in the attention block.
    pub fn copy_shared_parameters(&mut self, other: &ClassifierModel<T>) {
        let n_stage_params = |m: &ClassifierModel<T>| m.abm.as_ref().map(|a| a.fc1_w).unwrap_or(m.head_w);
        let mine = n_stage_params(self);
        let theirs = n_stage_params(other);
        assert_eq!(mine, theirs, "backbones differ");
        for i in 0..mine {
            self.params.tensors[i] = other.params.tensors[i].clone();
        }
        self.params.tensors[self.head_w] = other.params.tensors[other.head_w].clone();
        self.params.tensors[self.head_b] = other.params.tensors[other.head_b].clone();
    }

    fn stage_index(&self, layer: &str) -> Result<usize, ClassifierError> {
        self.stages
            .iter()
            .position(|(n, _)| n == layer)
            .ok_or_else(|| ClassifierError::LayerNotFound(layer.to_string()))
    }

    fn register_params(&self, tape: &mut Tape<T>, mode: GradMode) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|p| {
                if mode == GradMode::Parameters {
                    tape.variable(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn run(&self, tape: &mut Tape<T>, pv: &[Var], start: usize, x: Var) -> (Vec<(String, Var)>, Option<AbmTrace>, Var) {
        let mut layers = Vec::with_capacity(self.stages.len() - start);
        let mut h = x;
        for (name, stage) in &self.stages[start..] {
            h = apply_stage(tape, pv, stage, h);
            layers.push((name.clone(), h));
        }
        let abm = self.abm.as_ref().map(|a| a.apply(tape, pv, h));
        if let Some(a) = &abm {
            h = a.output;
        }
        let pooled = tape.global_avg_pool(h);
        let logits = tape.linear(pooled, pv[self.head_w], pv[self.head_b]);
        (layers, abm, logits)
    }

    /// Runs the full network on an `[N,3,S,S]` batch, recording the tape.
    pub fn trace(&self, input: Tensor<T>, mode: GradMode) -> Trace<T> {
        let mut tape = Tape::new();
        let param_vars = self.register_params(&mut tape, mode);
        let input = if mode == GradMode::Input {
            tape.variable(input)
        } else {
            tape.constant(input)
        };
        let (layers, abm, logits) = self.run(&mut tape, &param_vars, 0, input);
        Trace {
            tape,
            input,
            layers,
            abm,
            logits,
            param_vars,
        }
    }

    /// Resumes the forward pass with `features` standing in for the output of
    /// `layer`. With [`GradMode::Input`] the features are differentiable.
    pub fn trace_from(&self, layer: &str, features: Tensor<T>, mode: GradMode) -> Result<Trace<T>, ClassifierError> {
        let idx = self.stage_index(layer)?;
        let mut tape = Tape::new();
        let param_vars = self.register_params(&mut tape, mode);
        let input = if mode == GradMode::Input {
            tape.variable(features)
        } else {
            tape.constant(features)
        };
        let (mut layers, abm, logits) = self.run(&mut tape, &param_vars, idx + 1, input);
        layers.insert(0, (layer.to_string(), input));
        Ok(Trace {
            tape,
            input,
            layers,
            abm,
            logits,
            param_vars,
        })
    }

    /// Backward pass from the logits of `trace` seeded with `seed` (`[N,2]`).
    pub fn backprop(&self, trace: &Trace<T>, seed: Tensor<T>) -> Gradients<T> {
        self.gradient_passes.fetch_add(1, Ordering::Relaxed);
        trace.tape.backward(trace.logits, seed)
    }

    /// `[N,2]` logits without recording gradients.
    pub fn logits(&self, input: &Tensor<T>) -> Tensor<T> {
        let trace = self.trace(input.clone(), GradMode::None);
        trace.tape.value(trace.logits).clone()
    }

    /// Logits computed from a stage output (see [`Self::trace_from`]).
    pub fn logits_from(&self, layer: &str, features: &Tensor<T>) -> Result<Tensor<T>, ClassifierError> {
        let trace = self.trace_from(layer, features.clone(), GradMode::None)?;
        Ok(trace.tape.value(trace.logits).clone())
    }

    /// Output of `layer` for `input`.
    pub fn activation(&self, input: &Tensor<T>, layer: &str) -> Result<Tensor<T>, ClassifierError> {
        self.stage_index(layer)?;
        let trace = self.trace(input.clone(), GradMode::None);
        let v = trace.layer(layer).expect("stage was executed");
        Ok(trace.tape.value(v).clone())
    }

    /// Per-sample class probabilities `[p_non_hotspot, p_hotspot]`.
    pub fn probabilities(&self, input: &Tensor<T>) -> Vec<[T; NUM_CLASSES]> {
        let logits = self.logits(input);
        logits
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| {
                let p = softmax(row);
                [p[0], p[1]]
            })
            .collect()
    }
}

/// Converts an RGB image into a `[1,3,S,S]` tensor with values in `[0,1]`,
/// resizing (bilinear) when the image is not already `S×S`.
pub fn image_tensor<T: Scalar>(img: &RgbImage, size: usize) -> Tensor<T> {
    let resized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    let inv = T::cast(1.0 / 255.0);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::cast(px[c] as f64) * inv;
        }
    }
    Tensor::from_vec(&[1, 3, size, size], data)
}

/// Probability of the hotspot class for one image.
pub fn predict_proba<T: Scalar>(model: &ClassifierModel<T>, img: &RgbImage) -> T {
    let x = image_tensor(img, model.spec().input_size);
    model.probabilities(&x)[0][HOTSPOT]
}

/// [`predict_proba`] on encoded image bytes (PNG or JPEG).
pub fn predict_proba_bytes<T: Scalar>(model: &ClassifierModel<T>, bytes: &[u8]) -> Result<T, ClassifierError> {
    let img = image::load_from_memory(bytes).map_err(|e| ClassifierError::UndecodableImage(e.to_string()))?;
    Ok(predict_proba(model, &img.to_rgb8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_image(size: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let v = (x * 31 + y * 17 + seed * 7) % 251;
            image::Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
        })
    }

    #[test]
    fn every_backbone_emits_two_normalised_probabilities() {
        for backbone in Backbone::ALL {
            for abm in [false, true] {
                let model = build_model::<f32>(&ModelSpec::new(backbone, abm, 64)).unwrap();
                let p = model.probabilities(&image_tensor(&pseudo_image(64, 3), 64));
                assert_eq!(p.len(), 1);
                assert!((p[0][0] + p[0][1] - 1.0).abs() < 1e-6, "{backbone} abm={abm}");
                assert!(model.has_layer(model.default_cam_layer()));
            }
        }
    }

    #[test]
    fn tinycnn_64_forward_has_two_outputs() {
        let model = build_model::<f32>(&ModelSpec::new(Backbone::Tinycnn, false, 64)).unwrap();
        let logits = model.logits(&image_tensor(&pseudo_image(64, 1), 64));
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn identity_attention_reproduces_plain_logits() {
        let plain = build_model::<f64>(&ModelSpec::new(Backbone::Tinycnn, false, 32)).unwrap();
        let mut with_abm = build_model::<f64>(&ModelSpec::new(Backbone::Tinycnn, true, 32)).unwrap();
        with_abm.copy_shared_parameters(&plain);
        with_abm.set_abm_identity();
        let x = image_tensor(&pseudo_image(32, 9), 32);
        let trace = with_abm.trace(x.clone(), GradMode::None);
        let abm = trace.abm.unwrap();
        assert!(trace.tape.value(abm.channel_gate).data().iter().all(|&g| g == 1.0));
        assert!(trace.tape.value(abm.spatial_gate).data().iter().all(|&g| g == 1.0));
        assert_eq!(with_abm.logits(&x), plain.logits(&x));
    }

    #[test]
    fn unknown_backbone_is_rejected() {
        let err = "alexnet".parse::<Backbone>().unwrap_err();
        assert_eq!(err.code(), "UNKNOWN_BACKBONE");
        assert_eq!("ResNet-18".parse::<Backbone>().unwrap(), Backbone::Resnet18);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ModelSpec::new(Backbone::Tinycnn, false, 64);
        spec.num_classes = 3;
        assert!(build_model::<f32>(&spec).is_err());
        let spec = ModelSpec::new(Backbone::Tinycnn, false, 0);
        assert!(build_model::<f32>(&spec).is_err());
        let spec = ModelSpec::new(Backbone::Tinycnn, false, 2);
        assert!(matches!(build_model::<f32>(&spec), Err(ClassifierError::InvalidSpec(_))));
    }

    #[test]
    fn undecodable_bytes_are_reported() {
        let model = build_model::<f32>(&ModelSpec::new(Backbone::Tinycnn, false, 16)).unwrap();
        let err = predict_proba_bytes(&model, b"not an image").unwrap_err();
        assert_eq!(err.code(), "UNDECODABLE_IMAGE");
    }

    #[test]
    fn inference_is_deterministic() {
        let model = build_model::<f32>(&ModelSpec::new(Backbone::Squeezenet, true, 64)).unwrap();
        let img = pseudo_image(80, 4);
        assert_eq!(predict_proba(&model, &img), predict_proba(&model, &img));
    }
}
