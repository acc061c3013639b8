//! Patch critic for the Wasserstein objective.
//!
//! A strided convolutional stack maps a 6-channel tensor image to a grid of
//! patch scores; the critic score of an image is the mean of that grid.
//! After every optimizer step all critic parameters are clipped to
//! [-c, c], enforcing the Lipschitz constraint of the Wasserstein
//! formulation by weight clipping.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoise::layers::{leaky_relu, leaky_relu_backward, Conv2d, Conv2dGrad};
use crate::error::Result;
use crate::rng::{stream, tag};

pub const CRITIC_LRELU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Clip bound c for all parameters.
    pub clip: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            in_channels: 6,
            base_width: 16,
            clip: 0.01,
        }
    }
}

/// Three-stage strided critic: two 4x4 stride-2 stages and a 3x3 head that
/// emits one score per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub cfg: CriticConfig,
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

pub struct CriticGrads {
    c1: Conv2dGrad,
    c2: Conv2dGrad,
    head: Conv2dGrad,
}

pub struct CriticTape {
    x1: Array3<f64>,
    z1: Array3<f64>,
    x2: Array3<f64>,
    z2: Array3<f64>,
    x3: Array3<f64>,
    patches: usize,
}

impl Critic {
    pub fn init(cfg: CriticConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[tag("critic")]);
        let w = cfg.base_width;
        Critic {
            cfg,
            c1: Conv2d::init(w, cfg.in_channels, 4, 2, 1, &mut rng),
            c2: Conv2d::init(2 * w, w, 4, 2, 1, &mut rng),
            head: Conv2d::init(1, 2 * w, 3, 1, 1, &mut rng),
        }
    }

    pub fn grad_zeros(&self) -> CriticGrads {
        CriticGrads {
            c1: self.c1.grad_zeros(),
            c2: self.c2.grad_zeros(),
            head: self.head.grad_zeros(),
        }
    }

    /// Patch-score grid for an input image.
    pub fn score_map(&self, x: &Array3<f64>) -> Array3<f64> {
        let h1 = leaky_relu(&self.c1.forward(x), CRITIC_LRELU);
        let h2 = leaky_relu(&self.c2.forward(&h1), CRITIC_LRELU);
        self.head.forward(&h2)
    }

    /// Mean patch score.
    pub fn score(&self, x: &Array3<f64>) -> f64 {
        let map = self.score_map(x);
        map.sum() / map.len() as f64
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (f64, CriticTape) {
        let z1 = self.c1.forward(x);
        let h1 = leaky_relu(&z1, CRITIC_LRELU);
        let z2 = self.c2.forward(&h1);
        let h2 = leaky_relu(&z2, CRITIC_LRELU);
        let map = self.head.forward(&h2);
        let patches = map.len();
        (
            map.sum() / patches as f64,
            CriticTape {
                x1: x.clone(),
                z1,
                x2: h1,
                z2,
                x3: h2,
                patches,
            },
        )
    }

    /// Backward from `d loss / d score`; returns the input gradient.
    pub fn backward(&self, tape: &CriticTape, dscore: f64, grads: &mut CriticGrads) -> Array3<f64> {
        let (_, gh, gw) = self.head.out_shape(tape.x3.dim());
        let g_map = Array3::from_elem((1, gh, gw), dscore / tape.patches as f64);
        let g3 = self.head.backward(&tape.x3, &g_map, &mut grads.head);
        let gz2 = leaky_relu_backward(&tape.z2, &g3, CRITIC_LRELU);
        let g2 = self.c2.backward(&tape.x2, &gz2, &mut grads.c2);
        let gz1 = leaky_relu_backward(&tape.z1, &g2, CRITIC_LRELU);
        self.c1.backward(&tape.x1, &gz1, &mut grads.c1)
    }

    /// Input gradient only, for generator updates through a frozen critic.
    pub fn backward_input(&self, tape: &CriticTape, dscore: f64) -> Array3<f64> {
        let mut grads = self.grad_zeros();
        self.backward(tape, dscore, &mut grads)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.c1.weight.as_slice_mut().unwrap(),
            self.c1.bias.as_slice_mut().unwrap(),
            self.c2.weight.as_slice_mut().unwrap(),
            self.c2.bias.as_slice_mut().unwrap(),
            self.head.weight.as_slice_mut().unwrap(),
            self.head.bias.as_slice_mut().unwrap(),
        ]
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.c1.weight.as_slice().unwrap(),
            self.c1.bias.as_slice().unwrap(),
            self.c2.weight.as_slice().unwrap(),
            self.c2.bias.as_slice().unwrap(),
            self.head.weight.as_slice().unwrap(),
            self.head.bias.as_slice().unwrap(),
        ]
    }

    /// Clamp every parameter to [-c, c].
    pub fn clip_weights(&mut self) {
        let c = self.cfg.clip;
        for slice in self.param_slices_mut() {
            for v in slice {
                *v = v.clamp(-c, c);
            }
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl CriticGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.c1.weight.as_slice().unwrap(),
            self.c1.bias.as_slice().unwrap(),
            self.c2.weight.as_slice().unwrap(),
            self.c2.bias.as_slice().unwrap(),
            self.head.weight.as_slice().unwrap(),
            self.head.bias.as_slice().unwrap(),
        ]
    }

    pub fn add(&mut self, other: &CriticGrads) {
        self.c1.weight += &other.c1.weight;
        self.c1.bias += &other.c1.bias;
        self.c2.weight += &other.c2.weight;
        self.c2.bias += &other.c2.bias;
        self.head.weight += &other.head.weight;
        self.head.bias += &other.head.bias;
    }

    pub fn scale(&mut self, f: f64) {
        self.c1.weight.mapv_inplace(|v| v * f);
        self.c1.bias.mapv_inplace(|v| v * f);
        self.c2.weight.mapv_inplace(|v| v * f);
        self.c2.bias.mapv_inplace(|v| v * f);
        self.head.weight.mapv_inplace(|v| v * f);
        self.head.bias.mapv_inplace(|v| v * f);
    }
}

/// Serializable critic description used in checkpoints and reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticSummary {
    pub config: CriticConfig,
    pub max_abs_param: f64,
}

pub fn summarize(critic: &Critic) -> Result<CriticSummary> {
    Ok(CriticSummary {
        config: critic.cfg,
        max_abs_param: critic.max_abs_param(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn score_map_is_a_patch_grid() {
        let critic = Critic::init(CriticConfig::default(), 1);
        let x = Array3::zeros((6, 32, 32));
        let map = critic.score_map(&x);
        assert_eq!(map.dim(), (1, 8, 8));
    }

    #[test]
    fn clipping_bounds_all_parameters() {
        let mut critic = Critic::init(CriticConfig::default(), 2);
        // Inflate weights beyond the bound first.
        for s in critic.param_slices_mut() {
            for v in s {
                *v *= 10.0;
            }
        }
        critic.clip_weights();
        assert!(critic.max_abs_param() <= critic.cfg.clip);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let critic = Critic::init(
            CriticConfig {
                in_channels: 3,
                base_width: 4,
                clip: 0.01,
            },
            3,
        );
        let mut rng = stream(4, &[tag("critic-grad")]);
        let x = Array3::from_shape_simple_fn((3, 16, 16), || rng.random_range(-1.0..1.0f64));
        let (_, tape) = critic.forward_train(&x);
        let mut grads = critic.grad_zeros();
        let gx = critic.backward(&tape, 1.0, &mut grads);

        let eps = 1e-6;
        // Probe parameter gradients.
        let analytic: Vec<f64> = grads
            .slices()
            .into_iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        let mut offsets = Vec::new();
        let mut total = 0;
        for s in critic.param_slices() {
            offsets.push(total);
            total += s.len();
        }
        for _ in 0..40 {
            let idx = rng.random_range(0..total);
            let slice_idx = match offsets.binary_search(&idx) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            let inner = idx - offsets[slice_idx];
            let mut plus = critic.clone();
            plus.param_slices_mut()[slice_idx][inner] += eps;
            let mut minus = critic.clone();
            minus.param_slices_mut()[slice_idx][inner] -= eps;
            let numeric = (plus.score(&x) - minus.score(&x)) / (2.0 * eps);
            let a = analytic[idx];
            let denom = numeric.abs().max(a.abs()).max(1e-8);
            assert!(
                (numeric - a).abs() / denom < 1e-4,
                "critic param {idx}: numeric {numeric} vs analytic {a}"
            );
        }
        // Probe input gradients.
        for _ in 0..20 {
            let c = rng.random_range(0..3);
            let r = rng.random_range(0..16);
            let q = rng.random_range(0..16);
            let mut xp = x.clone();
            xp[(c, r, q)] += eps;
            let mut xm = x.clone();
            xm[(c, r, q)] -= eps;
            let numeric = (critic.score(&xp) - critic.score(&xm)) / (2.0 * eps);
            let a = gx[(c, r, q)];
            let denom = numeric.abs().max(a.abs()).max(1e-8);
            assert!(
                (numeric - a).abs() / denom < 1e-4,
                "critic input ({c},{r},{q}): numeric {numeric} vs analytic {a}"
            );
        }
    }
}
