//! Training: Adam updates, the masked L1 objective, and the Wasserstein
//! adversarial variant with weight clipping.
//!
//! Runs are reproducible end to end: weight init, batch order, augmentation,
//! and bootstrap draws all come from streams derived from the config seed,
//! and per-batch gradients are reduced in slot order even when the samples
//! are evaluated in parallel.

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::critic::{Critic, CriticConfig};
use crate::denoise::dataset::{augment, AugmentConfig, T2tDataset, TensorPair};
use crate::denoise::norm::{compute_norm_stats, NormMode, NormStats};
use crate::denoise::unet::{Generator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::TensorField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingObjective {
    L1Only,
    Wasserstein,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Critic iterations per generator step (Wasserstein objective).
    pub critic_steps: usize,
    /// Weight of the adversarial term in the generator loss.
    pub adversarial_weight: f64,
    /// Clip bound c for critic parameters.
    pub clip_bound: f64,
    pub seed: u64,
    /// Subject-level split ratios (train, val, test).
    pub split: (f64, f64, f64),
    pub levels: usize,
    pub base_width: usize,
    pub critic_width: usize,
    pub residual: bool,
    pub norm_mode: NormMode,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 10,
            critic_steps: 5,
            adversarial_weight: 0.01,
            clip_bound: 0.01,
            seed: 0,
            split: (0.8, 0.1, 0.1),
            levels: 3,
            base_width: 16,
            critic_width: 16,
            residual: true,
            norm_mode: NormMode::ZScore,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate must be positive"));
        }
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::validation("split ratios must sum to 1"));
        }
        Ok(())
    }

    /// Stable hash of the serialized config (FNV-1a over canonical JSON).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            levels: self.levels,
            base_width: self.base_width,
            in_channels: 6,
            out_channels: 6,
            residual: self.residual,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            in_channels: 6,
            base_width: self.critic_width,
            clip: self.clip_bound,
        }
    }
}

/// Adam state aligned with a fixed parameter-slice order.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
}

impl Adam {
    const EPS: f64 = 1e-8;

    pub fn new(param_sizes: &[usize], cfg: &TrainConfig) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * (mhat / (vhat.sqrt() + Self::EPS) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Masked mean absolute error over channels and voxels.
pub fn loss_l1(pred: &Array3<f64>, target: &Array3<f64>, mask: &Array2<bool>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (ch, rows, cols) = pred.dim();
    if mask.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch("mask vs prediction".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            if mask[(r, c)] {
                for k in 0..ch {
                    sum += (pred[(k, r, c)] - target[(k, r, c)]).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Gradient of [`loss_l1`] with respect to the prediction.
fn loss_l1_grad(pred: &Array3<f64>, target: &Array3<f64>, mask: &Array2<bool>) -> Array3<f64> {
    let (ch, rows, cols) = pred.dim();
    let n = mask.iter().filter(|&&m| m).count() * ch;
    let mut g = Array3::zeros(pred.raw_dim());
    if n == 0 {
        return g;
    }
    let scale = 1.0 / n as f64;
    for r in 0..rows {
        for c in 0..cols {
            if mask[(r, c)] {
                for k in 0..ch {
                    let d = pred[(k, r, c)] - target[(k, r, c)];
                    g[(k, r, c)] = if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    g
}

/// The trained de-noiser: generator weights plus the normalization that maps
/// tensors into and out of network space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub generator: Generator,
    pub norm: NormStats,
    pub seed: u64,
    pub config_hash: String,
}

impl DenoiserModel {
    /// De-noise a tensor field; the mask is preserved.
    pub fn denoise(&self, noisy: &TensorField) -> Result<TensorField> {
        let x = self.norm.normalize(noisy);
        self.generator.check_input(&x)?;
        let y = self.generator.forward(&x)?;
        self.norm.denormalize(&y, &noisy.mask)
    }

    /// Network output in normalized space, for ensemble averaging.
    pub fn forward_normalized(&self, noisy: &TensorField) -> Result<Array3<f64>> {
        let x = self.norm.normalize(noisy);
        self.generator.forward(&x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub critic_max_abs_param: Option<f64>,
}

pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    pub critic: Option<Critic>,
    pub history: TrainHistory,
}

struct Sample {
    x: Array3<f64>,
    y: Array3<f64>,
    mask: Array2<bool>,
}

fn prepare_sample(
    pair: &TensorPair,
    stats: &NormStats,
    aug: Option<(&AugmentConfig, u64)>,
) -> Result<Sample> {
    let owned;
    let pair = match aug {
        Some((cfg, seed)) if cfg.enabled => {
            owned = augment(pair, cfg, seed)?;
            &owned
        }
        _ => pair,
    };
    Ok(Sample {
        x: stats.normalize(&pair.noisy),
        y: stats.normalize(&pair.reference),
        mask: pair.mask.clone(),
    })
}

/// Deterministic shuffled index stream that reshuffles when exhausted.
struct IndexStream {
    n: usize,
    seed: u64,
    label: u64,
    round: u64,
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize, seed: u64, label: &str) -> Self {
        let mut s = IndexStream {
            n,
            seed,
            label: tag(label),
            round: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = stream(self.seed, &[self.label, self.round]);
        self.round += 1;
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One critic update on pre-built real/fake batches: minimizes
/// mean score(fake) - mean score(real), then clips all parameters.
/// Returns the (pre-update) critic loss.
pub fn critic_step(
    critic: &mut Critic,
    adam: &mut Adam,
    reals: &[Array3<f64>],
    fakes: &[Array3<f64>],
) -> Result<f64> {
    if reals.is_empty() || reals.len() != fakes.len() {
        return Err(Error::validation("critic step needs matched batches"));
    }
    let n = reals.len() as f64;
    let per_sample: Vec<(f64, crate::denoise::critic::CriticGrads)> = reals
        .par_iter()
        .zip(fakes.par_iter())
        .map(|(real, fake)| {
            let mut grads = critic.grad_zeros();
            let (s_fake, tape_fake) = critic.forward_train(fake);
            critic.backward(&tape_fake, 1.0 / n, &mut grads);
            let (s_real, tape_real) = critic.forward_train(real);
            critic.backward(&tape_real, -1.0 / n, &mut grads);
            ((s_fake - s_real) / n, grads)
        })
        .collect();
    let mut total = critic.grad_zeros();
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        total.add(&g);
    }
    if !loss.is_finite() {
        return Err(Error::numerical("NaN critic loss"));
    }
    let grads = total.slices();
    let mut params = critic.param_slices_mut();
    adam.step(&mut params, &grads);
    drop(params);
    critic.clip_weights();
    Ok(loss)
}

/// Train a de-noiser on an assembled dataset.
///
/// `shared_stats` lets an ensemble force one normalization convention on all
/// members; otherwise statistics are computed from the training pairs (inputs
/// and references pooled). The returned model carries the weights of the
/// epoch with the lowest validation loss.
pub fn train_with_stats(
    config: &TrainConfig,
    dataset: &T2tDataset,
    objective: TrainingObjective,
    shared_stats: Option<NormStats>,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let stats = match shared_stats {
        Some(s) => s,
        None => {
            let mut fields: Vec<&TensorField> = Vec::new();
            for p in &dataset.train {
                fields.push(&p.noisy);
                fields.push(&p.reference);
            }
            compute_norm_stats(&fields, config.norm_mode)?
        }
    };

    let mut generator = Generator::init(
        config.generator_config(),
        derive_seed(config.seed, &[tag("gen-init")]),
    )?;
    let gen_sizes: Vec<usize> = generator.param_slices().iter().map(|s| s.len()).collect();
    let mut gen_adam = Adam::new(&gen_sizes, config);

    let mut critic = if objective == TrainingObjective::Wasserstein {
        Some(Critic::init(
            config.critic_config(),
            derive_seed(config.seed, &[tag("critic-init")]),
        ))
    } else {
        None
    };
    let mut critic_adam = critic.as_ref().map(|c| {
        let sizes: Vec<usize> = c.param_slices().iter().map(|s| s.len()).collect();
        Adam::new(&sizes, config)
    });

    // Validation samples are fixed (no augmentation).
    let val_samples: Result<Vec<Sample>> = dataset
        .val
        .iter()
        .map(|p| prepare_sample(p, &stats, None))
        .collect();
    let val_samples = val_samples?;

    let mut train_stream = IndexStream::new(dataset.train.len(), config.seed, "batch");
    let mut critic_stream = IndexStream::new(dataset.train.len(), config.seed, "critic-batch");
    let steps_per_epoch = dataset.train.len().div_ceil(config.batch_size);

    let mut history = TrainHistory {
        train_losses: Vec::with_capacity(config.epochs),
        val_losses: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        critic_max_abs_param: None,
    };
    let mut best: Option<Generator> = None;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let batch_idx = train_stream.take(config.batch_size.min(dataset.train.len()));
            let make_samples = |idx: &[usize], salt: u64| -> Result<Vec<Sample>> {
                idx.par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        let aug_seed = derive_seed(
                            config.seed,
                            &[tag("aug"), salt, epoch as u64, step as u64, slot as u64],
                        );
                        prepare_sample(&dataset.train[i], &stats, Some((&config.augment, aug_seed)))
                    })
                    .collect()
            };

            if let (Some(critic), Some(critic_adam)) = (critic.as_mut(), critic_adam.as_mut()) {
                for k in 0..config.critic_steps {
                    let idx = critic_stream.take(config.batch_size.min(dataset.train.len()));
                    let samples = make_samples(&idx, 1 + k as u64)?;
                    let fakes: Result<Vec<Array3<f64>>> = samples
                        .par_iter()
                        .map(|s| generator.forward(&s.x))
                        .collect();
                    let fakes = fakes?;
                    let reals: Vec<Array3<f64>> = samples.into_iter().map(|s| s.y).collect();
                    critic_step(critic, critic_adam, &reals, &fakes)?;
                }
            }

            let samples = make_samples(&batch_idx, 0)?;
            let n = samples.len() as f64;
            let adv_w = config.adversarial_weight;
            let results: Result<Vec<(f64, crate::denoise::unet::GeneratorGrads)>> = samples
                .par_iter()
                .map(|sample| {
                    let (pred, tape) = generator.forward_train(&sample.x)?;
                    let l1 = loss_l1(&pred, &sample.y, &sample.mask)?;
                    let mut gy = loss_l1_grad(&pred, &sample.y, &sample.mask);
                    if let Some(critic) = critic.as_ref() {
                        let (_score, ctape) = critic.forward_train(&pred);
                        // Generator maximizes the critic score: loss term
                        // -adv_w * score.
                        let gadv = critic.backward_input(&ctape, -adv_w);
                        gy += &gadv;
                    }
                    let mut grads = generator.grad_zeros();
                    generator.backward(&tape, &gy, &mut grads);
                    Ok((l1, grads))
                })
                .collect();
            let results = results?;
            let mut total = generator.grad_zeros();
            let mut batch_l1 = 0.0;
            for (l1, g) in results {
                batch_l1 += l1 / n;
                total.add(&g);
            }
            total.scale(1.0 / n);
            if !batch_l1.is_finite() {
                return Err(Error::numerical(format!(
                    "NaN training loss at epoch {epoch}, step {step}"
                )));
            }
            let grads = total.slices();
            let mut params = generator.param_slices_mut();
            gen_adam.step(&mut params, &grads);
            epoch_loss += batch_l1 / steps_per_epoch as f64;
        }
        history.train_losses.push(epoch_loss);

        let val_loss = if val_samples.is_empty() {
            epoch_loss
        } else {
            let losses: Result<Vec<f64>> = val_samples
                .par_iter()
                .map(|s| {
                    let pred = generator.forward(&s.x)?;
                    loss_l1(&pred, &s.y, &s.mask)
                })
                .collect();
            let losses = losses?;
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        if !val_loss.is_finite() {
            return Err(Error::numerical(format!(
                "NaN validation loss at epoch {epoch}"
            )));
        }
        history.val_losses.push(val_loss);
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = Some(generator.clone());
        }
    }

    let generator = best.unwrap_or(generator);
    if !generator.all_finite() {
        return Err(Error::numerical("non-finite weights after training"));
    }
    history.critic_max_abs_param = critic.as_ref().map(|c| c.max_abs_param());
    Ok(TrainedDenoiser {
        model: DenoiserModel {
            generator,
            norm: stats,
            seed: config.seed,
            config_hash: config.hash(),
        },
        critic,
        history,
    })
}

pub fn train(
    config: &TrainConfig,
    dataset: &T2tDataset,
    objective: TrainingObjective,
) -> Result<TrainedDenoiser> {
    train_with_stats(config, dataset, objective, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::dataset::{DatasetManifest, TensorPair};
    use crate::fitting::SchemeVariant;
    use crate::tensor::TENSOR_CHANNELS;
    use ndarray::Array2;
    use rand::Rng;

    /// Smooth random field: a few low-frequency modes per channel, so the
    /// clean-vs-noisy correction is representable by a small conv net.
    fn smooth_field(rng: &mut impl Rng, side: usize, amplitude: f64) -> Array3<f64> {
        let mut modes = Vec::new();
        for _ in 0..TENSOR_CHANNELS {
            let per_channel: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(-2.0..2.0f64),
                        rng.random_range(-2.0..2.0f64),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.0f64),
                    )
                })
                .collect();
            modes.push(per_channel);
        }
        Array3::from_shape_fn((TENSOR_CHANNELS, side, side), |(ch, r, c)| {
            modes[ch]
                .iter()
                .map(|(fr, fc, phase, amp)| {
                    amp * ((fr * r as f64 + fc * c as f64) * std::f64::consts::TAU / side as f64
                        + phase)
                        .sin()
                })
                .sum::<f64>()
                * amplitude
        })
    }

    fn synthetic_pair(seed: u64, side: usize) -> TensorPair {
        let mut rng = stream(seed, &[tag("train-pair")]);
        let reference = smooth_field(&mut rng, side, 1.0e-3);
        let noise = smooth_field(&mut rng, side, 3.0e-4);
        let noisy = &reference + &noise;
        let mut mask = Array2::from_elem((side, side), false);
        for r in 2..side - 2 {
            for c in 2..side - 2 {
                mask[(r, c)] = true;
            }
        }
        TensorPair {
            subject: format!("s{seed}"),
            scheme: SchemeVariant::First,
            noisy: TensorField::new(noisy, mask.clone()).unwrap(),
            reference: TensorField::new(reference, mask.clone()).unwrap(),
            mask,
        }
    }

    fn tiny_dataset(n_train: usize, side: usize) -> T2tDataset {
        let train: Vec<TensorPair> = (0..n_train)
            .map(|i| synthetic_pair(i as u64, side))
            .collect();
        let val = vec![synthetic_pair(90, side)];
        let test = vec![synthetic_pair(91, side)];
        let manifest = DatasetManifest {
            train_subjects: train.iter().map(|p| p.subject.clone()).collect(),
            val_subjects: vec!["s90".into()],
            test_subjects: vec!["s91".into()],
            train_schemes: vec![SchemeVariant::First],
            train_pairs: train.len(),
            val_pairs: 1,
            test_pairs: 1,
        };
        T2tDataset {
            train,
            val,
            test,
            manifest,
        }
    }

    fn tiny_config(epochs: usize, objective_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            levels: 2,
            base_width: 4,
            critic_width: 4,
            critic_steps: 2,
            seed: objective_seed,
            augment: AugmentConfig {
                enabled: false,
                max_rotation_deg: 0.0,
                crop: None,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_l1_basics() {
        let mask = Array2::from_elem((2, 2), true);
        let a = Array3::from_elem((6, 2, 2), 1.0);
        let b = Array3::from_elem((6, 2, 2), 1.5);
        assert_eq!(loss_l1(&a, &a, &mask).unwrap(), 0.0);
        assert!((loss_l1(&a, &b, &mask).unwrap() - 0.5).abs() < 1e-15);
        // Loop oracle on random data.
        let mut rng = stream(1, &[tag("l1")]);
        let x = Array3::from_shape_simple_fn((6, 4, 4), || rng.random_range(-1.0..1.0f64));
        let y = Array3::from_shape_simple_fn((6, 4, 4), || rng.random_range(-1.0..1.0f64));
        let mask = Array2::from_elem((4, 4), true);
        let mut oracle = 0.0;
        for (a, b) in x.iter().zip(y.iter()) {
            oracle += (a - b).abs();
        }
        oracle /= x.len() as f64;
        assert!((loss_l1(&x, &y, &mask).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn single_pair_overfit_drops_loss_by_ninety_percent() {
        // 500 optimizer steps on one pair must reach < 10% of the initial loss.
        let mut dataset = tiny_dataset(1, 16);
        dataset.val.clear();
        let mut config = tiny_config(500, 2);
        config.batch_size = 1;
        config.base_width = 8;
        config.learning_rate = 1e-2;
        let trained = train(&config, &dataset, TrainingObjective::L1Only).unwrap();
        let initial = trained.history.train_losses[0];
        let last = *trained.history.train_losses.last().unwrap();
        assert!(
            last < 0.1 * initial,
            "loss only fell from {initial} to {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = tiny_dataset(3, 16);
        let mut config = tiny_config(3, 3);
        config.augment.enabled = true;
        config.augment.max_rotation_deg = 30.0;
        let a = train(&config, &dataset, TrainingObjective::L1Only).unwrap();
        let b = train(&config, &dataset, TrainingObjective::L1Only).unwrap();
        assert_eq!(a.model.generator, b.model.generator);
        assert_eq!(a.history.val_losses, b.history.val_losses);
    }

    #[test]
    fn wasserstein_training_clips_critic_after_every_step() {
        let dataset = tiny_dataset(3, 16);
        let config = tiny_config(2, 4);
        let trained = train(&config, &dataset, TrainingObjective::Wasserstein).unwrap();
        let critic = trained.critic.expect("wgan returns the critic");
        assert!(critic.max_abs_param() <= config.clip_bound);

        // Drive further steps manually and re-check the bound each time.
        let mut critic = critic;
        let sizes: Vec<usize> = critic.param_slices().iter().map(|s| s.len()).collect();
        let mut adam = Adam::new(&sizes, &config);
        let stats = trained.model.norm.clone();
        let reals: Vec<Array3<f64>> = dataset
            .train
            .iter()
            .map(|p| stats.normalize(&p.reference))
            .collect();
        let fakes: Vec<Array3<f64>> = dataset
            .train
            .iter()
            .map(|p| stats.normalize(&p.noisy))
            .collect();
        for _ in 0..5 {
            critic_step(&mut critic, &mut adam, &reals, &fakes).unwrap();
            assert!(critic.max_abs_param() <= config.clip_bound);
        }
    }

    #[test]
    fn best_validation_checkpoint_is_returned() {
        let dataset = tiny_dataset(3, 16);
        let config = tiny_config(4, 5);
        let trained = train(&config, &dataset, TrainingObjective::L1Only).unwrap();
        let best = trained.history.best_val_loss;
        for v in &trained.history.val_losses {
            assert!(best <= *v + 1e-15);
        }
        // Returned weights reproduce the best validation loss.
        let stats = &trained.model.norm;
        let losses: Vec<f64> = dataset
            .val
            .iter()
            .map(|p| {
                let pred = trained
                    .model
                    .generator
                    .forward(&stats.normalize(&p.noisy))
                    .unwrap();
                loss_l1(&pred, &stats.normalize(&p.reference), &p.mask).unwrap()
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((mean - best).abs() < 1e-12);
    }
}
