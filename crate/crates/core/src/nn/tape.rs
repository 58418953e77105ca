//! Reverse-mode automatic differentiation over a per-call tape.
//!
//! Every forward pass records its intermediate values on a fresh [`Tape`];
//! nodes are appended in evaluation order, so walking them backwards is a
//! valid topological order for gradient propagation. Tapes are never shared
//! between calls, which keeps concurrent inference and CAM requests against
//! one set of weights independent.

use super::kernels;
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, size: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    ConcatChannels(Vec<Var>),
    ScaleChannels { x: Var, gate: Var },
    ScaleSpatial { x: Var, gate: Var },
    ChannelMeanMax { x: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not need one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameters, or inputs under a gradient check).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let ng = self.needs(&[x, w, b]);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Var {
        let (out, argmax) = kernels::max_pool2d(self.value(x), size, stride);
        let ng = self.needs(&[x]);
        self.push(out, Op::MaxPool2d { x, argmax }, ng)
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Var {
        let out = kernels::avg_pool2d(self.value(x), size);
        let ng = self.needs(&[x]);
        self.push(out, Op::AvgPool2d { x, size }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = kernels::global_avg_pool(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total_c: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let (pn, pc, ph, pw) = t.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat operands disagree in N/H/W");
                let per = pc * h * w;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let ng = self.needs(parts);
        self.push(
            Tensor::from_vec(&[n, total_c, h, w], data),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    /// `x: [N,C,H,W]` times `gate: [N,C]` broadcast over space.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let gv = self.value(gate);
        assert_eq!(gv.dims2(), (n, c));
        let mut out = xv.clone();
        for (plane, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let g = gv.data()[plane];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        let ng = self.needs(&[x, gate]);
        self.push(out, Op::ScaleChannels { x, gate }, ng)
    }

    /// `x: [N,C,H,W]` times `gate: [N,1,H,W]` broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let gv = self.value(gate);
        assert_eq!(gv.dims4(), (n, 1, h, w));
        let mut out = xv.clone();
        let hw = h * w;
        for i in 0..n {
            let g = &gv.data()[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for (v, &gg) in out.data_mut()[base..base + hw].iter_mut().zip(g) {
                    *v *= gg;
                }
            }
        }
        let ng = self.needs(&[x, gate]);
        self.push(out, Op::ScaleSpatial { x, gate }, ng)
    }

    /// Channel-wise mean and max: `[N,C,H,W] -> [N,2,H,W]`.
    pub fn channel_mean_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        let mut argmax = vec![0usize; n * hw];
        let norm = T::cast(c as f64);
        for i in 0..n {
            for p in 0..hw {
                let mut sum = T::zero();
                let mut best = (i * c) * hw + p;
                for ch in 0..c {
                    let idx = (i * c + ch) * hw + p;
                    let v = xv.data()[idx];
                    sum += v;
                    if v > xv.data()[best] {
                        best = idx;
                    }
                }
                out.data_mut()[(i * 2) * hw + p] = sum / norm;
                out.data_mut()[(i * 2 + 1) * hw + p] = xv.data()[best];
                argmax[i * hw + p] = best;
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::ChannelMeanMax { x, argmax }, ng)
    }

    /// Back-propagates `seed` (the gradient of some scalar objective w.r.t.
    /// `root`) through the tape.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, need_x);
                    if let Some(gx) = gx {
                        acc(*x, gx, &mut grads);
                    }
                    acc(*w, gw, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= s * (T::one() - s);
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[o];
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::AvgPool2d { x, size } => {
                    let gx = kernels::avg_pool2d_backward(self.value(*x).shape(), &g, *size);
                    acc(*x, gx, &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let norm = T::cast((h * w) as f64);
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for (plane, chunk) in gx.data_mut().chunks_mut(h * w).enumerate() {
                        let v = g.data()[plane] / norm;
                        chunk.iter_mut().for_each(|e| *e = v);
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, gx, &mut grads);
                    acc(*w, gw, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::ConcatChannels(parts) => {
                    let (n, total_c, h, w) = g.dims4();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).dims4().1;
                        let mut gp = Tensor::zeros(&[n, pc, h, w]);
                        for i in 0..n {
                            let src = (i * total_c + offset) * h * w;
                            let dst = i * pc * h * w;
                            gp.data_mut()[dst..dst + pc * h * w]
                                .copy_from_slice(&g.data()[src..src + pc * h * w]);
                        }
                        offset += pc;
                        acc(p, gp, &mut grads);
                    }
                }
                Op::ScaleChannels { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let (n, c, h, w) = xv.dims4();
                    let hw = h * w;
                    let mut gx = g.clone();
                    let mut ggate = Tensor::zeros(&[n, c]);
                    for plane in 0..n * c {
                        let gate_v = gv.data()[plane];
                        let gchunk = &g.data()[plane * hw..(plane + 1) * hw];
                        let xchunk = &xv.data()[plane * hw..(plane + 1) * hw];
                        ggate.data_mut()[plane] = gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum();
                        gx.data_mut()[plane * hw..(plane + 1) * hw]
                            .iter_mut()
                            .for_each(|e| *e *= gate_v);
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gate, ggate, &mut grads);
                }
                Op::ScaleSpatial { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let (n, c, h, w) = xv.dims4();
                    let hw = h * w;
                    let mut gx = g.clone();
                    let mut ggate = Tensor::zeros(&[n, 1, h, w]);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                ggate.data_mut()[i * hw + p] += g.data()[base + p] * xv.data()[base + p];
                                gx.data_mut()[base + p] *= gv.data()[i * hw + p];
                            }
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gate, ggate, &mut grads);
                }
                Op::ChannelMeanMax { x, argmax } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let hw = h * w;
                    let norm = T::cast(c as f64);
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for i in 0..n {
                        for p in 0..hw {
                            let gm = g.data()[(i * 2) * hw + p] / norm;
                            for ch in 0..c {
                                gx.data_mut()[(i * c + ch) * hw + p] += gm;
                            }
                            gx.data_mut()[argmax[i * hw + p]] += g.data()[(i * 2 + 1) * hw + p];
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + 1.0) * seed).sin()).collect())
    }

    /// Objective: weighted sum of the root's entries with fixed weights.
    fn objective(build: &dyn Fn(&mut Tape<f64>, Var) -> Var, x: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = build(&mut tape, xv);
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    fn check(build: &dyn Fn(&mut Tape<f64>, Var) -> Var, x: Tensor<f64>) {
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone());
        let out = build(&mut tape, xv);
        let weights = pseudo(tape.value(out).shape(), 0.77);
        let grads = tape.backward(out, weights.clone());
        let analytic = grads.get(xv).expect("input gradient").clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (objective(build, &plus, &weights) - objective(build, &minus, &weights)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "component {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv_relu_pool_gradients() {
        let w = pseudo(&[3, 2, 3, 3], 0.31);
        let b = pseudo(&[3], 0.5);
        check(
            &move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let c = t.conv2d(x, wv, bv, 1, 1);
                let r = t.relu(c);
                t.max_pool2d(r, 2, 2)
            },
            pseudo(&[2, 2, 6, 6], 0.13),
        );
    }

    #[test]
    fn strided_conv_and_avg_pool_gradients() {
        let w = pseudo(&[2, 2, 3, 3], 0.41);
        let b = pseudo(&[2], 0.2);
        check(
            &move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let c = t.conv2d(x, wv, bv, 2, 1);
                t.avg_pool2d(c, 2)
            },
            pseudo(&[1, 2, 8, 8], 0.29),
        );
    }

    #[test]
    fn attention_style_gradients() {
        let wl = pseudo(&[3, 3], 0.6);
        let bl = pseudo(&[3], 0.9);
        let ws = pseudo(&[1, 2, 3, 3], 0.45);
        let bs = pseudo(&[1], 0.1);
        check(
            &move |t, x| {
                let pooled = t.global_avg_pool(x);
                let wlv = t.constant(wl.clone());
                let blv = t.constant(bl.clone());
                let lin = t.linear(pooled, wlv, blv);
                let gate = t.sigmoid(lin);
                let scaled = t.scale_channels(x, gate);
                let mm = t.channel_mean_max(scaled);
                let wsv = t.constant(ws.clone());
                let bsv = t.constant(bs.clone());
                let sc = t.conv2d(mm, wsv, bsv, 1, 1);
                let sg = t.sigmoid(sc);
                let out = t.scale_spatial(scaled, sg);
                let sum = t.add(out, x);
                t.concat_channels(&[sum, x])
            },
            pseudo(&[2, 3, 4, 4], 0.37),
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(pseudo(&[1, 1, 2, 2], 0.3));
        let r = tape.relu(x);
        let grads = tape.backward(r, Tensor::filled(&[1, 1, 2, 2], 1.0));
        assert!(grads.get(x).is_none());
    }
}
