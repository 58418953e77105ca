//! Checkpoints: a weights file plus a JSON sidecar (`<weights>.json`)
//! carrying the model spec, training config and data-manifest hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, ClassifierError, ClassifierModel, ModelSpec, TrainConfig};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub model_spec: ModelSpec,
    pub train_config: Option<TrainConfig>,
    pub manifest_hash: Option<String>,
    pub parameter_count: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(
    model: &ClassifierModel<T>,
    weights_path: &Path,
    train_config: Option<&TrainConfig>,
    manifest_hash: Option<&str>,
) -> Result<(), ClassifierError> {
    let weights = WeightsFile {
        tensors: model
            .parameters()
            .iter()
            .map(|t| StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    let sidecar = CheckpointSidecar {
        model_spec: model.spec().clone(),
        train_config: train_config.cloned(),
        manifest_hash: manifest_hash.map(str::to_string),
        parameter_count: model.parameter_count(),
    };
    if let Some(dir) = weights_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let encode = |e: serde_json::Error| ClassifierError::Checkpoint(e.to_string());
    std::fs::write(weights_path, serde_json::to_vec(&weights).map_err(encode)?)?;
    std::fs::write(
        sidecar_path(weights_path),
        serde_json::to_vec_pretty(&sidecar).map_err(encode)?,
    )?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(weights_path: &Path) -> Result<(ClassifierModel<T>, CheckpointSidecar), ClassifierError> {
    let decode = |e: serde_json::Error| ClassifierError::Checkpoint(e.to_string());
    let sidecar: CheckpointSidecar =
        serde_json::from_slice(&std::fs::read(sidecar_path(weights_path))?).map_err(decode)?;
    let weights: WeightsFile = serde_json::from_slice(&std::fs::read(weights_path)?).map_err(decode)?;
    let mut model = build_model::<T>(&sidecar.model_spec)?;
    if weights.tensors.len() != model.parameters().len() {
        return Err(ClassifierError::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.parameters().len(),
            weights.tensors.len()
        )));
    }
    for (slot, stored) in model.parameters_mut().iter_mut().zip(weights.tensors) {
        if slot.shape() != stored.shape.as_slice() {
            return Err(ClassifierError::Checkpoint(format!(
                "shape mismatch: expected {:?}, found {:?}",
                slot.shape(),
                stored.shape
            )));
        }
        *slot = Tensor::from_vec(&stored.shape, stored.data.into_iter().map(T::cast).collect());
    }
    Ok((model, sidecar))
}
