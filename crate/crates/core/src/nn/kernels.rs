//! Forward and backward kernels for the layers used by the classifier
//! backbones. All kernels take and return NCHW buffers; batch items are
//! processed in parallel and reduced in index order so results do not depend
//! on thread scheduling.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride as isize, self.pad as isize, self.in_w as isize);
        let kx = kx as isize;
        let lo = if p > kx { (p - kx + s - 1) / s } else { 0 };
        let hi = (w - 1 + p - kx).div_euclid(s) + 1;
        let hi = hi.clamp(0, self.out_w() as isize);
        (lo.max(0) as usize, (hi as usize).max(lo.max(0) as usize))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> ConvGeometry {
    let (_, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv input channels {c} != weight channels {wc}");
    assert_eq!(k, k2, "only square kernels are supported");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
    ConvGeometry {
        in_channels: c,
        out_channels: o,
        kernel: k,
        stride,
        pad,
        in_h: h,
        in_w: wd,
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let g = conv_geometry(x, w, stride, pad);
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_per = g.out_channels * oh * ow;
    let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    out.data_mut()
        .par_chunks_mut(out_per.max(1))
        .enumerate()
        .for_each(|(i, out_i)| {
            let x_i = &xd[i * in_per..(i + 1) * in_per];
            for o in 0..g.out_channels {
                let out_o = &mut out_i[o * oh * ow..(o + 1) * oh * ow];
                out_o.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..g.in_channels {
                    let x_c = &x_i[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let wv = wd[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                            let (lo, hi) = g.col_range(kx);
                            for oy in 0..oh {
                                let Some(iy) = g.in_row(oy, ky) else { continue };
                                let row = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                                let orow = &mut out_o[oy * ow..(oy + 1) * ow];
                                for ox in lo..hi {
                                    orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_grad_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = conv_geometry(x, w, stride, pad);
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_per = g.out_channels * oh * ow;
    let (xd, wd, god) = (x.data(), w.data(), grad_out.data());

    let grad_x = need_grad_x.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        gx.data_mut()
            .par_chunks_mut(in_per.max(1))
            .enumerate()
            .for_each(|(i, gx_i)| {
                let go_i = &god[i * out_per..(i + 1) * out_per];
                for o in 0..g.out_channels {
                    let go_o = &go_i[o * oh * ow..(o + 1) * oh * ow];
                    for c in 0..g.in_channels {
                        let gx_c = &mut gx_i[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let wv = wd[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                                let (lo, hi) = g.col_range(kx);
                                for oy in 0..oh {
                                    let Some(iy) = g.in_row(oy, ky) else { continue };
                                    let grow = &go_o[oy * ow..(oy + 1) * ow];
                                    let xrow = &mut gx_c[iy * g.in_w..(iy + 1) * g.in_w];
                                    for ox in lo..hi {
                                        xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gx
    });

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x_i = &xd[i * in_per..(i + 1) * in_per];
            let go_i = &god[i * out_per..(i + 1) * out_per];
            let mut gw = vec![T::zero(); wd.len()];
            let mut gb = vec![T::zero(); g.out_channels];
            for o in 0..g.out_channels {
                let go_o = &go_i[o * oh * ow..(o + 1) * oh * ow];
                gb[o] = go_o.iter().copied().sum();
                for c in 0..g.in_channels {
                    let x_c = &x_i[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let (lo, hi) = g.col_range(kx);
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let Some(iy) = g.in_row(oy, ky) else { continue };
                                let grow = &go_o[oy * ow..(oy + 1) * ow];
                                let xrow = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                                for ox in lo..hi {
                                    acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                            gw[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx] = acc;
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_b = Tensor::zeros(&[g.out_channels]);
    for (gw, gb) in per_sample {
        for (a, b) in grad_w.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_b.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
    }
    (grad_x, grad_w, grad_b)
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index that won.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h >= size && w >= size, "pool window larger than input");
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

/// Non-overlapping average pooling with window `size`.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / size, w / size);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let norm = T::cast((size * size) as f64);
    let xd = x.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..size {
                    for kx in 0..size {
                        acc += xd[plane * h * w + (oy * size + ky) * w + ox * size + kx];
                    }
                }
                out.data_mut()[(plane * oh + oy) * ow + ox] = acc / norm;
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>, size: usize) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, oh, ow) = grad_out.dims4();
    let mut gx = Tensor::zeros(input_shape);
    let norm = T::cast((size * size) as f64);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[(plane * oh + oy) * ow + ox] / norm;
                for ky in 0..size {
                    for kx in 0..size {
                        gx.data_mut()[plane * h * w + (oy * size + ky) * w + ox * size + kx] += g;
                    }
                }
            }
        }
    }
    gx
}

/// `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let norm = T::cast(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() / norm)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

/// `x: [N,F]`, `w: [O,F]`, `b: [O]` -> `[N,O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, f) = x.dims2();
    let (o, wf) = w.dims2();
    assert_eq!(f, wf, "linear input width {f} != weight width {wf}");
    let mut out = Tensor::zeros(&[n, o]);
    for i in 0..n {
        let xi = &x.data()[i * f..(i + 1) * f];
        for j in 0..o {
            let wj = &w.data()[j * f..(j + 1) * f];
            let dot: T = xi.iter().zip(wj).map(|(&a, &b)| a * b).sum();
            out.data_mut()[i * o + j] = dot + b.data()[j];
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = x.dims2();
    let (o, _) = w.dims2();
    let mut gx = Tensor::zeros(&[n, f]);
    let mut gw = Tensor::zeros(&[o, f]);
    let mut gb = Tensor::zeros(&[o]);
    for i in 0..n {
        for j in 0..o {
            let g = grad_out.data()[i * o + j];
            gb.data_mut()[j] += g;
            for k in 0..f {
                gx.data_mut()[i * f + k] += g * w.data()[j * f + k];
                gw.data_mut()[j * f + k] += g * x.data()[i * f + k];
            }
        }
    }
    (gx, gw, gb)
}
