//! Convolutional building blocks with hand-derived backward passes.
//!
//! Everything operates on single samples shaped (channels, rows, cols) in
//! f64; batching is a loop at the training level. Convolutions go through
//! im2col + GEMM so the heavy lifting stays in matrix products.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Leaky-ReLU forward.
pub fn leaky_relu(x: &Array3<f64>, alpha: f64) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { alpha * v })
}

/// Leaky-ReLU backward given the pre-activation input.
pub fn leaky_relu_backward(z: &Array3<f64>, gy: &Array3<f64>, alpha: f64) -> Array3<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(z, |g, &v| {
        if v <= 0.0 {
            *g *= alpha;
        }
    });
    gx
}

/// Lay out k x k patches of `x` (with zero padding) as columns.
///
/// For stride 1 each (channel, ky, kx) row of the column matrix is a set of
/// contiguous slices of the input, which keeps this memory-bound step out of
/// per-element index arithmetic.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (ch, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((ch * k * k, oh * ow));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    for c in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (c * h + iy as usize) * w;
                    let out_base = row_base + oy * ow;
                    if stride == 1 {
                        // ix = ox + kx - pad; clamp ox to keep ix in bounds.
                        let shift = kx as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let src_lo = (ox_lo as isize + shift) as usize;
                        let n = ox_hi - ox_lo;
                        cs[out_base + ox_lo..out_base + ox_lo + n]
                            .copy_from_slice(&xs[in_base + src_lo..in_base + src_lo + n]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[out_base + ox] = xs[in_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add columns back into image layout (adjoint of [`im2col`]).
fn col2im(
    col: &Array2<f64>,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::zeros((ch, h, w));
    let cs = col.as_slice().expect("contiguous col");
    let xs = x.as_slice_mut().expect("contiguous output");
    for c in 0..ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (c * h + iy as usize) * w;
                    let out_base = row_base + oy * ow;
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let dst_lo = in_base + (ox_lo as isize + shift) as usize;
                        for (dst, src) in xs[dst_lo..dst_lo + ox_hi - ox_lo]
                            .iter_mut()
                            .zip(&cs[out_base + ox_lo..out_base + ox_hi])
                        {
                            *dst += *src;
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[in_base + ix as usize] += cs[out_base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution, weight layout (out, in, k, k).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-style normal init scaled by fan-in; deterministic given the stream.
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || {
            let n: f64 = rng.sample(StandardNormal);
            n * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn zeroed(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn grad_zeros(&self) -> Conv2dGrad {
        Conv2dGrad {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = in_shape;
        let k = self.weight.dim().2;
        (
            self.weight.dim().0,
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (out_ch, in_ch, k, _) = self.weight.dim();
        debug_assert_eq!(x.dim().0, in_ch);
        let (_, oh, ow) = self.out_shape(x.dim());
        let col = im2col(x, k, self.stride, self.pad);
        let w2 = self
            .weight
            .to_shape((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let mut y2 = w2.dot(&col);
        for (o, mut row) in y2.outer_iter_mut().enumerate() {
            row += self.bias[o];
        }
        y2.into_shape_with_order((out_ch, oh, ow)).unwrap()
    }

    /// Backward pass: accumulates weight/bias grads, returns input grad.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        gy: &Array3<f64>,
        grad: &mut Conv2dGrad,
    ) -> Array3<f64> {
        let (out_ch, in_ch, k, _) = self.weight.dim();
        let (ch, h, w) = x.dim();
        let (_, oh, ow) = self.out_shape(x.dim());
        let col = im2col(x, k, self.stride, self.pad);
        let gy2 = gy
            .to_shape((out_ch, oh * ow))
            .expect("contiguous grad")
            .to_owned();
        // dW = gy2 col^T, db = row sums of gy2.
        let gw = gy2.dot(&col.t());
        let gw4 = gw.into_shape_with_order((out_ch, in_ch, k, k)).unwrap();
        grad.weight += &gw4;
        for (o, row) in gy2.outer_iter().enumerate() {
            grad.bias[o] += row.sum();
        }
        // dx = col2im(W^T gy2).
        let w2 = self
            .weight
            .to_shape((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let gcol = w2.t().dot(&gy2);
        col2im(&gcol, ch, h, w, k, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 2x2 stride-2 transposed convolution, weight layout (in, out, 2, 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2 {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2x2Grad {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvTranspose2x2 {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_ch as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((in_ch, out_ch, 2, 2), || {
            let n: f64 = rng.sample(StandardNormal);
            n * std
        });
        ConvTranspose2x2 {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn grad_zeros(&self) -> ConvTranspose2x2Grad {
        ConvTranspose2x2Grad {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (in_ch, out_ch, _, _) = self.weight.dim();
        let (ch, h, w) = x.dim();
        debug_assert_eq!(ch, in_ch);
        // patches = W2^T X2 with W2: (in, out*4), X2: (in, h*w).
        let x2 = x.to_shape((in_ch, h * w)).expect("contiguous input");
        let w2 = self
            .weight
            .to_shape((in_ch, out_ch * 4))
            .expect("contiguous weight");
        let patches = w2.t().dot(&x2); // (out*4, h*w)
        let mut y = Array3::zeros((out_ch, h * 2, w * 2));
        let ys = y.as_slice_mut().unwrap();
        let ps = patches.as_slice().unwrap();
        for o in 0..out_ch {
            for ky in 0..2 {
                for kx in 0..2 {
                    let p_base = ((o * 2 + ky) * 2 + kx) * h * w;
                    for r in 0..h {
                        let y_base = (o * 2 * h + 2 * r + ky) * 2 * w + kx;
                        let p_row = p_base + r * w;
                        for c in 0..w {
                            ys[y_base + 2 * c] = ps[p_row + c];
                        }
                    }
                }
            }
        }
        for o in 0..out_ch {
            let b = self.bias[o];
            y.index_axis_mut(ndarray::Axis(0), o)
                .mapv_inplace(|v| v + b);
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        gy: &Array3<f64>,
        grad: &mut ConvTranspose2x2Grad,
    ) -> Array3<f64> {
        let (in_ch, out_ch, _, _) = self.weight.dim();
        let (_, h, w) = x.dim();
        // Gather gy into patch layout (out*4, h*w).
        let mut gpatches = Array2::zeros((out_ch * 4, h * w));
        {
            let gs = gy.as_slice().unwrap();
            let gp = gpatches.as_slice_mut().unwrap();
            for o in 0..out_ch {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let p_base = ((o * 2 + ky) * 2 + kx) * h * w;
                        for r in 0..h {
                            let g_base = (o * 2 * h + 2 * r + ky) * 2 * w + kx;
                            let p_row = p_base + r * w;
                            for c in 0..w {
                                gp[p_row + c] = gs[g_base + 2 * c];
                            }
                        }
                    }
                }
            }
        }
        for o in 0..out_ch {
            grad.bias[o] += gy.index_axis(ndarray::Axis(0), o).sum();
        }
        let x2 = x.to_shape((in_ch, h * w)).expect("contiguous input");
        // dW2 = X2 gpatches^T, dX2 = W2 gpatches.
        let gw2 = x2.dot(&gpatches.t());
        let gw4 = gw2.into_shape_with_order((in_ch, out_ch, 2, 2)).unwrap();
        grad.weight += &gw4;
        let w2 = self
            .weight
            .to_shape((in_ch, out_ch * 4))
            .expect("contiguous weight");
        let gx2 = w2.dot(&gpatches);
        gx2.into_shape_with_order((in_ch, h, w)).unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 2x2 max pooling with argmax routing.
pub struct PoolCache {
    /// Flat argmax offset (0..4) per output position.
    pub argmax: Array3<u8>,
}

pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, PoolCache) {
    let (ch, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((ch, oh, ow));
    let mut argmax = Array3::zeros((ch, oh, ow));
    for c in 0..ch {
        for r in 0..oh {
            for q in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut idx = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[(c, 2 * r + dy, 2 * q + dx)];
                        if v > best {
                            best = v;
                            idx = (dy * 2 + dx) as u8;
                        }
                    }
                }
                y[(c, r, q)] = best;
                argmax[(c, r, q)] = idx;
            }
        }
    }
    (y, PoolCache { argmax })
}

pub fn max_pool2_backward(cache: &PoolCache, gy: &Array3<f64>) -> Array3<f64> {
    let (ch, oh, ow) = gy.dim();
    let mut gx = Array3::zeros((ch, oh * 2, ow * 2));
    for c in 0..ch {
        for r in 0..oh {
            for q in 0..ow {
                let idx = cache.argmax[(c, r, q)] as usize;
                gx[(c, 2 * r + idx / 2, 2 * q + idx % 2)] = gy[(c, r, q)];
            }
        }
    }
    gx
}

/// Channel concatenation and its split adjoint.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Result<Array3<f64>> {
    if a.dim().1 != b.dim().1 || a.dim().2 != b.dim().2 {
        return Err(Error::ShapeMismatch(format!(
            "concat {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn split_channels(g: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    let a = g.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = g.slice(ndarray::s![first.., .., ..]).to_owned();
    (a, b)
}
