//! Backbone topologies. Each backbone is a list of named stages; any stage
//! output can serve as a CAM layer, and the forward pass can be resumed from
//! any stage boundary.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Squeezenet,
    Resnet18,
    Vgg,
    Densenet,
    Tinycnn,
}

impl Backbone {
    pub const ALL: [Backbone; 5] = [
        Backbone::Squeezenet,
        Backbone::Resnet18,
        Backbone::Vgg,
        Backbone::Densenet,
        Backbone::Tinycnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Squeezenet => "squeezenet",
            Backbone::Resnet18 => "resnet18",
            Backbone::Vgg => "vgg",
            Backbone::Densenet => "densenet",
            Backbone::Tinycnn => "tinycnn",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "squeezenet" => Ok(Backbone::Squeezenet),
            "resnet18" | "resnet" => Ok(Backbone::Resnet18),
            "vgg" => Ok(Backbone::Vgg),
            "densenet" => Ok(Backbone::Densenet),
            "tinycnn" => Ok(Backbone::Tinycnn),
            _ => Err(ClassifierError::UnknownBackbone(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvRef {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Stage {
    Conv(ConvRef),
    MaxPool { size: usize, stride: usize },
    Fire { squeeze: ConvRef, expand1: ConvRef, expand3: ConvRef },
    Residual { conv1: ConvRef, conv2: ConvRef, shortcut: Option<ConvRef> },
    Dense { layers: Vec<ConvRef> },
    Transition { conv: ConvRef },
}

impl Stage {
    pub(crate) fn is_conv(&self) -> bool {
        !matches!(self, Stage::MaxPool { .. })
    }
}

/// Parameter storage shared by backbone, attention block and head.
#[derive(Clone, Debug, Default)]
pub(crate) struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, t: Tensor<T>) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform He-style initialisation scaled by fan-in.
    pub fn init(&mut self, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> usize {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| T::cast(rng.gen_range(-bound..bound))).collect();
        self.push(Tensor::from_vec(shape, data))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> usize {
        self.push(Tensor::zeros(shape))
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvRef {
        let w = self.init(&[cout, cin, k, k], cin * k * k, rng);
        let b = self.zeros(&[cout]);
        ConvRef {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }
}

/// Stage list plus the number of output channels of the final stage.
pub(crate) struct BackboneLayout {
    pub stages: Vec<(String, Stage)>,
    pub out_channels: usize,
    pub default_cam_layer: String,
}

pub(crate) fn build_layout<T: Scalar>(
    backbone: Backbone,
    width: usize,
    params: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> BackboneLayout {
    let w = width.max(2);
    let pool = || Stage::MaxPool { size: 2, stride: 2 };
    let mut stages: Vec<(String, Stage)> = Vec::new();
    let out_channels;
    match backbone {
        Backbone::Tinycnn => {
            stages.push(("conv1".into(), Stage::Conv(params.conv(3, w, 3, 1, rng))));
            stages.push(("pool1".into(), pool()));
            stages.push(("conv2".into(), Stage::Conv(params.conv(w, 2 * w, 3, 1, rng))));
            stages.push(("pool2".into(), pool()));
            stages.push(("conv3".into(), Stage::Conv(params.conv(2 * w, 4 * w, 3, 1, rng))));
            stages.push(("pool3".into(), pool()));
            out_channels = 4 * w;
        }
        Backbone::Vgg => {
            let plan: [&[usize]; 3] = [&[w, w], &[2 * w, 2 * w], &[4 * w, 4 * w, 4 * w]];
            let mut cin = 3;
            for (bi, block) in plan.iter().enumerate() {
                for (li, &cout) in block.iter().enumerate() {
                    let name = format!("block{}.conv{}", bi + 1, li + 1);
                    stages.push((name, Stage::Conv(params.conv(cin, cout, 3, 1, rng))));
                    cin = cout;
                }
                stages.push((format!("block{}.pool", bi + 1), pool()));
            }
            out_channels = cin;
        }
        Backbone::Squeezenet => {
            stages.push(("conv1".into(), Stage::Conv(params.conv(3, 2 * w, 3, 2, rng))));
            stages.push(("pool1".into(), pool()));
            let half = (w / 2).max(1);
            stages.push(("fire2".into(), fire(params, rng, 2 * w, half, w)));
            stages.push(("fire3".into(), fire(params, rng, 2 * w, half, w)));
            stages.push(("pool3".into(), pool()));
            stages.push(("fire4".into(), fire(params, rng, 2 * w, w, 2 * w)));
            stages.push(("fire5".into(), fire(params, rng, 4 * w, w, 2 * w)));
            out_channels = 4 * w;
        }
        Backbone::Resnet18 => {
            stages.push(("stem".into(), Stage::Conv(params.conv(3, w, 3, 1, rng))));
            stages.push(("pool".into(), pool()));
            let mut cin = w;
            for (li, cout) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                for bi in 0..2 {
                    let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                    let conv1 = params.conv(cin, cout, 3, stride, rng);
                    let conv2 = params.conv(cout, cout, 3, 1, rng);
                    let shortcut = (stride != 1 || cin != cout).then(|| params.conv(cin, cout, 1, stride, rng));
                    stages.push((
                        format!("layer{}.{}", li + 1, bi),
                        Stage::Residual { conv1, conv2, shortcut },
                    ));
                    cin = cout;
                }
            }
            out_channels = cin;
        }
        Backbone::Densenet => {
            let growth = (w / 2).max(2);
            let mut cin = 2 * w;
            stages.push(("stem".into(), Stage::Conv(params.conv(3, cin, 3, 1, rng))));
            stages.push(("pool".into(), pool()));
            for block in 1..=3 {
                let layers = (0..4)
                    .map(|i| params.conv(cin + i * growth, growth, 3, 1, rng))
                    .collect();
                stages.push((format!("dense{block}"), Stage::Dense { layers }));
                cin += 4 * growth;
                if block < 3 {
                    let cout = cin / 2;
                    let conv = params.conv(cin, cout, 1, 1, rng);
                    stages.push((format!("transition{block}"), Stage::Transition { conv }));
                    cin = cout;
                }
            }
            out_channels = cin;
        }
    }
    let default_cam_layer = stages
        .iter()
        .rev()
        .find(|(_, s)| s.is_conv())
        .map(|(n, _)| n.clone())
        .expect("every backbone has a convolutional stage");
    BackboneLayout {
        stages,
        out_channels,
        default_cam_layer,
    }
}

/// Spatial edge length after all stages, or `None` if some stage would see
/// an input smaller than its window.
pub(crate) fn output_size(stages: &[(String, Stage)], input: usize) -> Option<usize> {
    fn conv_out(size: usize, c: &ConvRef) -> Option<usize> {
        let k = 2 * c.pad + 1;
        (size + 2 * c.pad >= k && size > 0).then(|| (size + 2 * c.pad - k) / c.stride + 1)
    }
    let mut size = input;
    for (_, stage) in stages {
        size = match stage {
            Stage::Conv(c) => conv_out(size, c)?,
            Stage::MaxPool { size: k, stride } => (size >= *k).then(|| (size - k) / stride + 1)?,
            Stage::Fire { squeeze, .. } => conv_out(size, squeeze)?,
            Stage::Residual { conv1, .. } => conv_out(size, conv1)?,
            Stage::Dense { .. } => size,
            Stage::Transition { .. } => (size >= 2).then_some(size / 2)?,
        };
    }
    (size > 0).then_some(size)
}

fn fire<T: Scalar>(
    params: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cin: usize,
    squeeze: usize,
    expand: usize,
) -> Stage {
    let squeeze_conv = params.conv(cin, squeeze, 1, 1, rng);
    Stage::Fire {
        squeeze: squeeze_conv,
        expand1: params.conv(squeeze, expand, 1, 1, rng),
        expand3: params.conv(squeeze, expand, 3, 1, rng),
    }
}

fn conv(tape: &mut Tape<impl Scalar>, pv: &[Var], x: Var, c: ConvRef) -> Var {
    tape.conv2d(x, pv[c.w], pv[c.b], c.stride, c.pad)
}

pub(crate) fn apply_stage<T: Scalar>(tape: &mut Tape<T>, pv: &[Var], stage: &Stage, x: Var) -> Var {
    match stage {
        Stage::Conv(c) => {
            let y = conv(tape, pv, x, *c);
            tape.relu(y)
        }
        Stage::MaxPool { size, stride } => tape.max_pool2d(x, *size, *stride),
        Stage::Fire {
            squeeze,
            expand1,
            expand3,
        } => {
            let s = conv(tape, pv, x, *squeeze);
            let s = tape.relu(s);
            let e1 = conv(tape, pv, s, *expand1);
            let e1 = tape.relu(e1);
            let e3 = conv(tape, pv, s, *expand3);
            let e3 = tape.relu(e3);
            tape.concat_channels(&[e1, e3])
        }
        Stage::Residual { conv1, conv2, shortcut } => {
            let y = conv(tape, pv, x, *conv1);
            let y = tape.relu(y);
            let y = conv(tape, pv, y, *conv2);
            let skip = match shortcut {
                Some(s) => conv(tape, pv, x, *s),
                None => x,
            };
            let sum = tape.add(y, skip);
            tape.relu(sum)
        }
        Stage::Dense { layers } => {
            let mut features = x;
            for l in layers {
                let y = conv(tape, pv, features, *l);
                let y = tape.relu(y);
                features = tape.concat_channels(&[features, y]);
            }
            features
        }
        Stage::Transition { conv: c } => {
            let y = conv(tape, pv, x, *c);
            let y = tape.relu(y);
            tape.avg_pool2d(y, 2)
        }
    }
}
