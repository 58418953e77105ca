//! Road-safety redesign pipeline: accident hotspot clustering, a hotspot
//! image classifier, CAM-based extraction of accident-prone regions, mask
//! tooling, inpainting adapters, saliency metrics and before/after scoring.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix it
//! to `f32`, which is what the CLI and server use.

pub mod apcam;
pub mod classifier;
pub mod evalreport;
pub mod events;
pub mod hotspot;
pub mod imagery;
pub mod inpaint;
pub mod maskkit;
pub mod nn;
pub mod saliency;
pub mod scalar;
pub mod toy;

pub use scalar::Scalar;

pub type Classifier = classifier::ClassifierModel<f32>;
pub type Heatmap = apcam::Heatmap<f32>;
pub type Tensor = nn::Tensor<f32>;
pub type Sample = classifier::Sample<f32>;
