//! The trainable de-noiser: a small U-Net-shaped encoder-decoder over
//! 6-channel tensor images, with skip connections, leaky-ReLU activations,
//! and an optional residual output (`y = x + f(x)`).
//!
//! The final 1x1 projection is zero-initialized, so a freshly built residual
//! model is exactly the identity: training can only be credited for
//! improvements beyond the noisy input.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoise::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward,
    split_channels, Conv2d, Conv2dGrad, ConvTranspose2x2, ConvTranspose2x2Grad, PoolCache,
};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

pub const GENERATOR_LRELU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub residual: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 3,
            base_width: 16,
            in_channels: 6,
            out_channels: 6,
            residual: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 {
            return Err(Error::validation("levels and base_width must be positive"));
        }
        if self.in_channels != self.out_channels && self.residual {
            return Err(Error::validation(
                "residual output needs matching channel counts",
            ));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Input sides must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLevel {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLevel {
    up: ConvTranspose2x2,
    conv1: Conv2d,
    conv2: Conv2d,
}

/// U-Net-shaped generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    enc: Vec<EncoderLevel>,
    dec: Vec<DecoderLevel>,
    head: Conv2d,
}

/// Gradient accumulators mirroring [`Generator`]'s parameters.
pub struct GeneratorGrads {
    enc: Vec<(Conv2dGrad, Conv2dGrad)>,
    dec: Vec<(ConvTranspose2x2Grad, Conv2dGrad, Conv2dGrad)>,
    head: Conv2dGrad,
}

struct ConvCache {
    x: Array3<f64>,
    z: Array3<f64>,
}

struct EncoderCache {
    c1: ConvCache,
    c2: ConvCache,
    pool: Option<PoolCache>,
}

struct DecoderCache {
    up_in: Array3<f64>,
    skip_channels: usize,
    c1: ConvCache,
    c2: ConvCache,
}

/// Intermediate activations needed by the backward pass.
pub struct GeneratorTape {
    enc: Vec<EncoderCache>,
    dec: Vec<DecoderCache>,
    head_in: Array3<f64>,
}

impl Generator {
    /// Seeded construction; every layer draws from its own derived stream.
    pub fn init(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let in_ch = if level == 0 {
                cfg.in_channels
            } else {
                cfg.width(level - 1)
            };
            let w = cfg.width(level);
            let mut rng = stream(seed, &[tag("gen-enc"), level as u64]);
            enc.push(EncoderLevel {
                conv1: Conv2d::init(w, in_ch, 3, 1, 1, &mut rng),
                conv2: Conv2d::init(w, w, 3, 1, 1, &mut rng),
            });
        }
        let mut dec = Vec::with_capacity(cfg.levels - 1);
        for level in (0..cfg.levels - 1).rev() {
            let w = cfg.width(level);
            let mut rng = stream(seed, &[tag("gen-dec"), level as u64]);
            dec.push(DecoderLevel {
                up: ConvTranspose2x2::init(cfg.width(level + 1), w, &mut rng),
                conv1: Conv2d::init(w, 2 * w, 3, 1, 1, &mut rng),
                conv2: Conv2d::init(w, w, 3, 1, 1, &mut rng),
            });
        }
        // Zero-initialized head: the residual model starts as the identity.
        let head = Conv2d::zeroed(cfg.out_channels, cfg.base_width, 1, 1, 0);
        Ok(Generator {
            cfg,
            enc,
            dec,
            head,
        })
    }

    pub fn grad_zeros(&self) -> GeneratorGrads {
        GeneratorGrads {
            enc: self
                .enc
                .iter()
                .map(|e| (e.conv1.grad_zeros(), e.conv2.grad_zeros()))
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|d| {
                    (
                        d.up.grad_zeros(),
                        d.conv1.grad_zeros(),
                        d.conv2.grad_zeros(),
                    )
                })
                .collect(),
            head: self.head.grad_zeros(),
        }
    }

    pub fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (ch, h, w) = x.dim();
        if ch != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {ch}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} not divisible by {div}"
            )));
        }
        Ok(())
    }

    fn conv_lrelu(conv: &Conv2d, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let z = conv.forward(x);
        let y = leaky_relu(&z, GENERATOR_LRELU);
        (y, ConvCache { x: x.clone(), z })
    }

    /// Forward pass retaining the tape for [`Generator::backward`].
    pub fn forward_train(&self, x: &Array3<f64>) -> Result<(Array3<f64>, GeneratorTape)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut skips: Vec<Array3<f64>> = Vec::with_capacity(self.enc.len());
        let mut cur = x.clone();
        for (level, e) in self.enc.iter().enumerate() {
            let (y1, c1) = Self::conv_lrelu(&e.conv1, &cur);
            let (y2, c2) = Self::conv_lrelu(&e.conv2, &y1);
            if level + 1 < self.enc.len() {
                let (pooled, pc) = max_pool2(&y2);
                skips.push(y2);
                enc_caches.push(EncoderCache {
                    c1,
                    c2,
                    pool: Some(pc),
                });
                cur = pooled;
            } else {
                enc_caches.push(EncoderCache { c1, c2, pool: None });
                cur = y2;
            }
        }
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for (i, d) in self.dec.iter().enumerate() {
            let up_in = cur.clone();
            let up = d.up.forward(&cur);
            let skip = &skips[skips.len() - 1 - i];
            let cat = concat_channels(skip, &up)?;
            let (y1, c1) = Self::conv_lrelu(&d.conv1, &cat);
            let (y2, c2) = Self::conv_lrelu(&d.conv2, &y1);
            dec_caches.push(DecoderCache {
                up_in,
                skip_channels: skip.dim().0,
                c1,
                c2,
            });
            cur = y2;
        }
        let head_in = cur.clone();
        let mut out = self.head.forward(&cur);
        if self.cfg.residual {
            out += x;
        }
        Ok((
            out,
            GeneratorTape {
                enc: enc_caches,
                dec: dec_caches,
                head_in,
            },
        ))
    }

    /// Inference-only forward.
    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Backpropagate `gy` through the tape, accumulating into `grads`;
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        tape: &GeneratorTape,
        gy: &Array3<f64>,
        grads: &mut GeneratorGrads,
    ) -> Array3<f64> {
        let mut g = self.head.backward(&tape.head_in, gy, &mut grads.head);
        let mut skip_grads: Vec<Array3<f64>> = Vec::with_capacity(self.dec.len());
        for (i, d) in self.dec.iter().enumerate().rev() {
            let cache = &tape.dec[i];
            let gz2 = leaky_relu_backward(&cache.c2.z, &g, GENERATOR_LRELU);
            let g1 = d.conv2.backward(&cache.c2.x, &gz2, &mut grads.dec[i].2);
            let gz1 = leaky_relu_backward(&cache.c1.z, &g1, GENERATOR_LRELU);
            let gcat = d.conv1.backward(&cache.c1.x, &gz1, &mut grads.dec[i].1);
            let (gskip, gup) = split_channels(&gcat, cache.skip_channels);
            skip_grads.push(gskip);
            g = d.up.backward(&cache.up_in, &gup, &mut grads.dec[i].0);
        }
        // skip_grads[j] belongs to encoder level (levels - 2 - ... ) in
        // reverse decoder order: last pushed pairs with encoder level 0.
        for (level, e) in self.enc.iter().enumerate().rev() {
            let cache = &tape.enc[level];
            let gout = match &cache.pool {
                Some(pc) => {
                    let mut gpool = max_pool2_backward(pc, &g);
                    // The skip connection also fed this activation.
                    let gskip = skip_grads
                        .pop()
                        .expect("one skip gradient per pooled level");
                    gpool += &gskip;
                    gpool
                }
                None => g,
            };
            let gz2 = leaky_relu_backward(&cache.c2.z, &gout, GENERATOR_LRELU);
            let g1 = e.conv2.backward(&cache.c2.x, &gz2, &mut grads.enc[level].1);
            let gz1 = leaky_relu_backward(&cache.c1.z, &g1, GENERATOR_LRELU);
            g = e.conv1.backward(&cache.c1.x, &gz1, &mut grads.enc[level].0);
        }
        if self.cfg.residual {
            g += gy;
        }
        g
    }

    /// Parameter slices in a stable order (encoder, decoder, head).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for e in &mut self.enc {
            out.push(e.conv1.weight.as_slice_mut().unwrap());
            out.push(e.conv1.bias.as_slice_mut().unwrap());
            out.push(e.conv2.weight.as_slice_mut().unwrap());
            out.push(e.conv2.bias.as_slice_mut().unwrap());
        }
        for d in &mut self.dec {
            out.push(d.up.weight.as_slice_mut().unwrap());
            out.push(d.up.bias.as_slice_mut().unwrap());
            out.push(d.conv1.weight.as_slice_mut().unwrap());
            out.push(d.conv1.bias.as_slice_mut().unwrap());
            out.push(d.conv2.weight.as_slice_mut().unwrap());
            out.push(d.conv2.bias.as_slice_mut().unwrap());
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_slice_mut().unwrap());
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for e in &self.enc {
            out.push(e.conv1.weight.as_slice().unwrap());
            out.push(e.conv1.bias.as_slice().unwrap());
            out.push(e.conv2.weight.as_slice().unwrap());
            out.push(e.conv2.bias.as_slice().unwrap());
        }
        for d in &self.dec {
            out.push(d.up.weight.as_slice().unwrap());
            out.push(d.up.bias.as_slice().unwrap());
            out.push(d.conv1.weight.as_slice().unwrap());
            out.push(d.conv1.bias.as_slice().unwrap());
            out.push(d.conv2.weight.as_slice().unwrap());
            out.push(d.conv2.bias.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl GeneratorGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (g1, g2) in &self.enc {
            out.push(g1.weight.as_slice().unwrap());
            out.push(g1.bias.as_slice().unwrap());
            out.push(g2.weight.as_slice().unwrap());
            out.push(g2.bias.as_slice().unwrap());
        }
        for (gu, g1, g2) in &self.dec {
            out.push(gu.weight.as_slice().unwrap());
            out.push(gu.bias.as_slice().unwrap());
            out.push(g1.weight.as_slice().unwrap());
            out.push(g1.bias.as_slice().unwrap());
            out.push(g2.weight.as_slice().unwrap());
            out.push(g2.bias.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for (g1, g2) in &mut self.enc {
            g1.weight.mapv_inplace(|v| v * factor);
            g1.bias.mapv_inplace(|v| v * factor);
            g2.weight.mapv_inplace(|v| v * factor);
            g2.bias.mapv_inplace(|v| v * factor);
        }
        for (gu, g1, g2) in &mut self.dec {
            gu.weight.mapv_inplace(|v| v * factor);
            gu.bias.mapv_inplace(|v| v * factor);
            g1.weight.mapv_inplace(|v| v * factor);
            g1.bias.mapv_inplace(|v| v * factor);
            g2.weight.mapv_inplace(|v| v * factor);
            g2.bias.mapv_inplace(|v| v * factor);
        }
        self.head.weight.mapv_inplace(|v| v * factor);
        self.head.bias.mapv_inplace(|v| v * factor);
    }

    pub fn add(&mut self, other: &GeneratorGrads) {
        for ((a1, a2), (b1, b2)) in self.enc.iter_mut().zip(&other.enc) {
            a1.weight += &b1.weight;
            a1.bias += &b1.bias;
            a2.weight += &b2.weight;
            a2.bias += &b2.bias;
        }
        for ((au, a1, a2), (bu, b1, b2)) in self.dec.iter_mut().zip(&other.dec) {
            au.weight += &bu.weight;
            au.bias += &bu.bias;
            a1.weight += &b1.weight;
            a1.bias += &b1.bias;
            a2.weight += &b2.weight;
            a2.bias += &b2.bias;
        }
        self.head.weight += &other.head.weight;
        self.head.bias += &other.head.bias;
    }
}
