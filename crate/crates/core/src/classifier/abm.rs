//! Attention-based module: channel attention (pooled MLP gate) followed by
//! spatial attention (convolution over channel-wise mean and max), both
//! sigmoid gated and applied multiplicatively.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{ConvRef, ParamStore};
use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbmSpec {
    pub channel_reduction: usize,
    /// Odd kernel size of the spatial gate convolution.
    pub spatial_kernel: usize,
}

impl Default for AbmSpec {
    fn default() -> Self {
        Self {
            channel_reduction: 4,
            spatial_kernel: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Abm {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub spatial: ConvRef,
}

/// Nodes produced by one application of the block.
#[derive(Clone, Copy, Debug)]
pub struct AbmTrace {
    /// `[N, C]` channel attention vector.
    pub channel_gate: Var,
    /// `[N, 1, H, W]` spatial attention map.
    pub spatial_gate: Var,
    pub output: Var,
}

/// Bias that saturates a sigmoid to exactly 1.0 in both f32 and f64.
const SATURATING_BIAS: f64 = 50.0;

impl Abm {
    pub fn build<T: Scalar>(spec: &AbmSpec, channels: usize, params: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (channels / spec.channel_reduction.max(1)).max(1);
        let fc1_w = params.init(&[hidden, channels], channels, rng);
        let fc1_b = params.zeros(&[hidden]);
        let fc2_w = params.init(&[channels, hidden], hidden, rng);
        let fc2_b = params.zeros(&[channels]);
        let spatial = params.conv(2, 1, spec.spatial_kernel, 1, rng);
        Self {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            spatial,
        }
    }

    /// Rewrites the gate parameters so every attention weight is exactly 1,
    /// turning the block into the identity map.
    pub fn set_identity<T: Scalar>(&self, params: &mut ParamStore<T>) {
        for idx in [self.fc2_w, self.spatial.w] {
            let shape = params.tensors[idx].shape().to_vec();
            params.tensors[idx] = Tensor::zeros(&shape);
        }
        for idx in [self.fc2_b, self.spatial.b] {
            let shape = params.tensors[idx].shape().to_vec();
            params.tensors[idx] = Tensor::filled(&shape, T::cast(SATURATING_BIAS));
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> AbmTrace {
        let pooled = tape.global_avg_pool(x);
        let h = tape.linear(pooled, pv[self.fc1_w], pv[self.fc1_b]);
        let h = tape.relu(h);
        let logits = tape.linear(h, pv[self.fc2_w], pv[self.fc2_b]);
        let channel_gate = tape.sigmoid(logits);
        let refined = tape.scale_channels(x, channel_gate);

        let stats = tape.channel_mean_max(refined);
        let s = tape.conv2d(stats, pv[self.spatial.w], pv[self.spatial.b], 1, self.spatial.pad);
        let spatial_gate = tape.sigmoid(s);
        let output = tape.scale_spatial(refined, spatial_gate);
        AbmTrace {
            channel_gate,
            spatial_gate,
            output,
        }
    }
}
