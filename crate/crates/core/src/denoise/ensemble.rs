//! Bagging ensembles of de-noisers.
//!
//! Members share one normalization convention (statistics computed once from
//! the un-resampled training pairs) and differ by derived seed and by a
//! bootstrap resample of the training subjects. Prediction averages the
//! member outputs in normalized tensor space before denormalizing.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoise::dataset::{bootstrap_subject_ids, T2tDataset, TensorPair};
use crate::denoise::norm::compute_norm_stats;
use crate::denoise::train::{
    train_with_stats, DenoiserModel, TrainConfig, TrainedDenoiser, TrainingObjective,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{TensorField, TENSOR_CHANNELS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: usize,
    pub member_seeds: Vec<u64>,
    /// Bootstrap subject multiset per member.
    pub member_subjects: Vec<Vec<String>>,
}

/// Train `k` bagged members on the same dataset.
pub fn train_ensemble(
    config: &TrainConfig,
    dataset: &T2tDataset,
    objective: TrainingObjective,
    k: usize,
) -> Result<(Vec<TrainedDenoiser>, EnsembleManifest)> {
    if k == 0 {
        return Err(Error::validation("ensemble needs at least one member"));
    }
    // One normalization convention for every member.
    let mut fields: Vec<&TensorField> = Vec::new();
    for p in &dataset.train {
        fields.push(&p.noisy);
        fields.push(&p.reference);
    }
    let stats = compute_norm_stats(&fields, config.norm_mode)?;

    let train_ids: Vec<String> = {
        let mut ids: Vec<String> = dataset.train.iter().map(|p| p.subject.clone()).collect();
        ids.dedup();
        ids
    };

    let mut members = Vec::with_capacity(k);
    let mut manifest = EnsembleManifest {
        members: k,
        member_seeds: Vec::with_capacity(k),
        member_subjects: Vec::with_capacity(k),
    };
    for member in 0..k {
        let member_seed = derive_seed(config.seed, &[crate::rng::tag("member"), member as u64]);
        let chosen = bootstrap_subject_ids(&train_ids, member_seed);
        // Rebuild the training pair list from the bootstrap multiset,
        // keeping one entry per draw (subjects may repeat).
        let mut train: Vec<TensorPair> = Vec::new();
        for id in &chosen {
            for p in dataset.train.iter().filter(|p| &p.subject == id) {
                train.push(p.clone());
            }
        }
        let member_dataset = T2tDataset {
            train,
            val: dataset.val.clone(),
            test: dataset.test.clone(),
            manifest: dataset.manifest.clone(),
        };
        let mut member_cfg = config.clone();
        member_cfg.seed = member_seed;
        let trained =
            train_with_stats(&member_cfg, &member_dataset, objective, Some(stats.clone()))?;
        manifest.member_seeds.push(member_seed);
        manifest.member_subjects.push(chosen);
        members.push(trained);
    }
    Ok((members, manifest))
}

/// Mean of member outputs in normalized space, then denormalized.
///
/// All members must share the same normalization statistics; a single-member
/// ensemble reproduces that member's forward pass bit for bit.
pub fn ensemble_predict(models: &[&DenoiserModel], noisy: &TensorField) -> Result<TensorField> {
    if models.is_empty() {
        return Err(Error::validation("empty ensemble"));
    }
    let norm = &models[0].norm;
    for m in models.iter().skip(1) {
        if &m.norm != norm {
            return Err(Error::validation(
                "ensemble members use different normalization statistics",
            ));
        }
    }
    let (rows, cols) = noisy.shape();
    let mut mean = Array3::<f64>::zeros((TENSOR_CHANNELS, rows, cols));
    for m in models {
        mean += &m.forward_normalized(noisy)?;
    }
    mean.mapv_inplace(|v| v / models.len() as f64);
    norm.denormalize(&mean, &noisy.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::norm::NormStats;
    use crate::denoise::unet::{Generator, GeneratorConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn model_with_seed(seed: u64) -> DenoiserModel {
        let cfg = GeneratorConfig {
            levels: 2,
            base_width: 4,
            in_channels: 6,
            out_channels: 6,
            residual: true,
        };
        let mut generator = Generator::init(cfg, seed).unwrap();
        // Non-trivial head so members disagree.
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("ens-head")]);
        if let Some(bias) = generator.param_slices_mut().last_mut() {
            for v in bias.iter_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        DenoiserModel {
            generator,
            norm: NormStats::Fixed { scale: 500.0 },
            seed,
            config_hash: "test".into(),
        }
    }

    fn random_field(seed: u64) -> TensorField {
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("ens-field")]);
        let mut comps = Array3::zeros((TENSOR_CHANNELS, 16, 16));
        let mut mask = Array2::from_elem((16, 16), false);
        for r in 2..14 {
            for c in 2..14 {
                mask[(r, c)] = true;
                for ch in 0..TENSOR_CHANNELS {
                    comps[(ch, r, c)] = rng.random_range(-1e-3..2e-3);
                }
            }
        }
        TensorField::new(comps, mask).unwrap()
    }

    #[test]
    fn single_member_matches_forward_bit_for_bit() {
        let model = model_with_seed(1);
        let field = random_field(2);
        let solo = ensemble_predict(&[&model], &field).unwrap();
        let direct = model.denoise(&field).unwrap();
        assert_eq!(solo, direct);
    }

    #[test]
    fn identical_members_equal_one_member() {
        let model = model_with_seed(3);
        let field = random_field(4);
        let trio = ensemble_predict(&[&model, &model, &model], &field).unwrap();
        let solo = model.denoise(&field).unwrap();
        for (a, b) in trio.components.iter().zip(solo.components.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_norms_are_rejected() {
        let a = model_with_seed(5);
        let mut b = model_with_seed(6);
        b.norm = NormStats::Fixed { scale: 100.0 };
        let field = random_field(7);
        assert!(ensemble_predict(&[&a, &b], &field).is_err());
    }

    #[test]
    fn ensemble_variance_not_above_member_variance() {
        // Bagging oracle: averaging k independent predictors cannot raise
        // the dispersion of outputs; check on on a synthetic committee.
        let models: Vec<DenoiserModel> = (10..15).map(model_with_seed).collect();
        let refs: Vec<&DenoiserModel> = models.iter().collect();
        let field = random_field(8);
        let outputs: Vec<TensorField> = models.iter().map(|m| m.denoise(&field).unwrap()).collect();
        let ens = ensemble_predict(&refs, &field).unwrap();
        // Per-voxel variance of member outputs vs squared deviation of the
        // ensemble from the member mean (zero by construction) plus spread.
        let mut member_var = 0.0;
        let mut count = 0usize;
        let mut ens_dev = 0.0;
        for ((ch, r, c), &m) in field.components.indexed_iter() {
            let _ = m;
            if !field.mask[(r, c)] {
                continue;
            }
            let vals: Vec<f64> = outputs.iter().map(|o| o.components[(ch, r, c)]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            member_var += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            ens_dev += (ens.components[(ch, r, c)] - mean).powi(2);
            count += 1;
        }
        member_var /= count as f64;
        ens_dev /= count as f64;
        assert!(
            ens_dev <= member_var * 1e-6 + 1e-24,
            "mean must match committee mean"
        );
    }
}
