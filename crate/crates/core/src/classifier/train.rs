use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_tensor, ClassifierError, ClassifierModel, GradMode, HOTSPOT, NON_HOTSPOT, NUM_CLASSES};
use crate::imagery::{DatasetManifest, Label};
use crate::nn::{softmax, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `adam` or `sgd` (plain SGD with momentum 0.9).
    pub optimizer_name: String,
    pub seed: u64,
    /// Random horizontal flips of training images.
    #[serde(default)]
    pub augment_hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            optimizer_name: "adam".into(),
            seed: 0,
            augment_hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::InvalidConfig("learning_rate must be > 0".into()));
        }
        match self.optimizer_name.as_str() {
            "adam" | "sgd" => Ok(()),
            other => Err(ClassifierError::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub train_size: usize,
    /// Statement of how reproducible the run is.
    pub nondeterminism: String,
}

/// Preprocessed training example: `[1,3,S,S]` input and hotspot flag.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub hotspot: bool,
}

enum Optimizer<T> {
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: i32 },
    Sgd { velocity: Vec<Vec<T>> },
}

impl<T: Scalar> Optimizer<T> {
    fn new(name: &str, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        match name {
            "sgd" => Optimizer::Sgd { velocity: zeros() },
            _ => Optimizer::Adam {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        match self {
            Optimizer::Adam { m, v, step } => {
                *step += 1;
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                let c1 = 1.0 - b1.powi(*step);
                let c2 = 1.0 - b2.powi(*step);
                let (b1t, b2t) = (T::cast(b1), T::cast(b2));
                for (i, p) in params.iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i][j] = b1t * m[i][j] + (T::one() - b1t) * gj;
                        v[i][j] = b2t * v[i][j] + (T::one() - b2t) * gj * gj;
                        let mhat = m[i][j].as_f64() / c1;
                        let vhat = v[i][j].as_f64() / c2;
                        *w -= T::cast(lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
            Optimizer::Sgd { velocity } => {
                let mu = T::cast(0.9);
                let lr = T::cast(lr);
                for (i, p) in params.iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        velocity[i][j] = mu * velocity[i][j] + gj;
                        *w -= lr * velocity[i][j];
                    }
                }
            }
        }
    }
}

fn hflip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = x.clone();
    for plane in 0..n * c {
        for y in 0..h {
            let row = &mut out.data_mut()[(plane * h + y) * w..(plane * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

/// Mini-batch training with softmax cross-entropy. Deterministic for a fixed
/// config: shuffling and augmentation draw from a seeded ChaCha stream and
/// batch gradients are reduced in sample order.
pub fn train_samples<T: Scalar>(
    model: &mut ClassifierModel<T>,
    samples: &[Sample<T>],
    config: &TrainConfig,
) -> Result<TrainingLog, ClassifierError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let positives = samples.iter().filter(|s| s.hotspot).count();
    if positives == 0 || positives == samples.len() {
        return Err(ClassifierError::SingleClassDataset);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(&config.optimizer_name, model.parameters());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainingLog {
        epochs: Vec::with_capacity(config.epochs),
        train_size: samples.len(),
        nondeterminism: "none: seeded shuffling and augmentation, ordered gradient reduction".into(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<Tensor<T>> = batch
                .iter()
                .map(|&i| {
                    let x = &samples[i].input;
                    if config.augment_hflip && rand::Rng::gen_bool(&mut rng, 0.5) {
                        hflip(x)
                    } else {
                        x.clone()
                    }
                })
                .collect();
            let x = Tensor::stack(&inputs);
            let trace = model.trace(x, GradMode::Parameters);
            let logits = trace.tape.value(trace.logits);
            let n = batch.len();
            let mut seed = Tensor::zeros(&[n, NUM_CLASSES]);
            for (row, &i) in batch.iter().enumerate() {
                let target = if samples[i].hotspot { HOTSPOT } else { NON_HOTSPOT };
                let p = softmax(&logits.data()[row * NUM_CLASSES..(row + 1) * NUM_CLASSES]);
                loss_sum -= p[target].as_f64().max(1e-12).ln();
                let predicted = if p[HOTSPOT] >= p[NON_HOTSPOT] { HOTSPOT } else { NON_HOTSPOT };
                if predicted == target {
                    correct += 1;
                }
                let inv_n = T::cast(1.0 / n as f64);
                for k in 0..NUM_CLASSES {
                    let onehot = if k == target { T::one() } else { T::zero() };
                    seed.data_mut()[row * NUM_CLASSES + k] = (p[k] - onehot) * inv_n;
                }
            }
            let mut grads = model.backprop(&trace, seed);
            let param_grads: Vec<Option<Tensor<T>>> = trace.param_vars.iter().map(|&v| grads.take(v)).collect();
            optimizer.step(model.parameters_mut(), &param_grads, config.learning_rate);
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        log::debug!(
            "epoch {} loss {:.4} acc {:.3}",
            entry.epoch,
            entry.mean_loss,
            entry.train_accuracy
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Loads the train split of `manifest` (paths relative to `root`) and trains
/// `model` on it.
pub fn train<T: Scalar>(
    mut model: ClassifierModel<T>,
    manifest: &DatasetManifest,
    root: &Path,
    config: &TrainConfig,
) -> Result<(ClassifierModel<T>, TrainingLog), ClassifierError> {
    let (train_split, _) = manifest.split();
    let size = model.spec().input_size;
    let mut samples = Vec::with_capacity(train_split.len());
    for record in train_split {
        let hotspot = match record.label {
            Label::Hotspot => true,
            Label::NonHotspot => false,
            Label::Unlabeled => continue,
        };
        let bytes = std::fs::read(root.join(&record.file_path))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ClassifierError::UndecodableImage(format!("{}: {e}", record.file_path)))?;
        samples.push(Sample {
            input: image_tensor(&img.to_rgb8(), size),
            hotspot,
        });
    }
    let log = train_samples(&mut model, &samples, config)?;
    Ok((model, log))
}
