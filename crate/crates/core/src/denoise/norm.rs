//! Channel normalization of tensor fields before training.
//!
//! Two modes: channel-wise z-score statistics gathered over the masked
//! voxels of a dataset, or division by the fixed scale 500. Background
//! voxels stay exactly zero on both sides of the round trip.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{TensorField, TENSOR_CHANNELS};

/// Fixed normalization scale from the non-z-score training mode.
pub const FIXED_SCALE: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    ZScore,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormStats {
    ZScore {
        mean: [f64; TENSOR_CHANNELS],
        std: [f64; TENSOR_CHANNELS],
    },
    Fixed {
        scale: f64,
    },
}

/// Gather normalization statistics from a dataset of tensor fields.
///
/// Only masked voxels contribute. `Fixed` ignores the data and returns the
/// constant scale.
pub fn compute_norm_stats(fields: &[&TensorField], mode: NormMode) -> Result<NormStats> {
    match mode {
        NormMode::Fixed => Ok(NormStats::Fixed { scale: FIXED_SCALE }),
        NormMode::ZScore => {
            if fields.is_empty() {
                return Err(Error::validation("empty dataset for normalization"));
            }
            let mut sum = [0.0f64; TENSOR_CHANNELS];
            let mut n = 0usize;
            for f in fields {
                for ((r, c), &m) in f.mask.indexed_iter() {
                    if m {
                        n += 1;
                        for (ch, acc) in sum.iter_mut().enumerate() {
                            *acc += f.components[(ch, r, c)];
                        }
                    }
                }
            }
            if n == 0 {
                return Err(Error::EmptyMask);
            }
            let mean: [f64; TENSOR_CHANNELS] = std::array::from_fn(|ch| sum[ch] / n as f64);
            let mut sq = [0.0f64; TENSOR_CHANNELS];
            for f in fields {
                for ((r, c), &m) in f.mask.indexed_iter() {
                    if m {
                        for (ch, acc) in sq.iter_mut().enumerate() {
                            let d = f.components[(ch, r, c)] - mean[ch];
                            *acc += d * d;
                        }
                    }
                }
            }
            let std: [f64; TENSOR_CHANNELS] = std::array::from_fn(|ch| (sq[ch] / n as f64).sqrt());
            for (ch, &s) in std.iter().enumerate() {
                if s == 0.0 {
                    return Err(Error::ZeroVarianceChannel(ch));
                }
            }
            Ok(NormStats::ZScore { mean, std })
        }
    }
}

impl NormStats {
    /// Normalized 6-channel image; background voxels forced to zero.
    pub fn normalize(&self, field: &TensorField) -> Array3<f64> {
        let (rows, cols) = field.shape();
        let mut out = Array3::zeros((TENSOR_CHANNELS, rows, cols));
        for ch in 0..TENSOR_CHANNELS {
            for r in 0..rows {
                for c in 0..cols {
                    if field.mask[(r, c)] {
                        out[(ch, r, c)] = match self {
                            NormStats::ZScore { mean, std } => {
                                (field.components[(ch, r, c)] - mean[ch]) / std[ch]
                            }
                            NormStats::Fixed { scale } => field.components[(ch, r, c)] / scale,
                        };
                    }
                }
            }
        }
        out
    }

    /// Invert [`NormStats::normalize`] on the mask.
    pub fn denormalize(
        &self,
        normalized: &Array3<f64>,
        mask: &ndarray::Array2<bool>,
    ) -> Result<TensorField> {
        let (ch, rows, cols) = normalized.dim();
        if ch != TENSOR_CHANNELS {
            return Err(Error::ShapeMismatch(format!("{ch} channels")));
        }
        let mut components = Array3::zeros((TENSOR_CHANNELS, rows, cols));
        for ch in 0..TENSOR_CHANNELS {
            for r in 0..rows {
                for c in 0..cols {
                    if mask[(r, c)] {
                        components[(ch, r, c)] = match self {
                            NormStats::ZScore { mean, std } => {
                                normalized[(ch, r, c)] * std[ch] + mean[ch]
                            }
                            NormStats::Fixed { scale } => normalized[(ch, r, c)] * scale,
                        };
                    }
                }
            }
        }
        TensorField::new(components, mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn random_field(seed: u64) -> TensorField {
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("norm")]);
        let mut components = Array3::zeros((TENSOR_CHANNELS, 8, 8));
        let mut mask = Array2::from_elem((8, 8), false);
        for r in 0..8 {
            for c in 0..8 {
                if rng.random_range(0.0..1.0) < 0.7 {
                    mask[(r, c)] = true;
                    for ch in 0..TENSOR_CHANNELS {
                        components[(ch, r, c)] = rng.random_range(-2.0e-3..2.0e-3);
                    }
                }
            }
        }
        TensorField::new(components, mask).unwrap()
    }

    #[test]
    fn zscore_stats_match_two_pass_oracle() {
        let fields: Vec<TensorField> = (0..4).map(random_field).collect();
        let refs: Vec<&TensorField> = fields.iter().collect();
        let stats = compute_norm_stats(&refs, NormMode::ZScore).unwrap();
        let NormStats::ZScore { mean, std } = &stats else {
            panic!("wrong mode");
        };
        // Loop oracle.
        for ch in 0..TENSOR_CHANNELS {
            let mut vals = Vec::new();
            for f in &fields {
                for ((r, c), &m) in f.mask.indexed_iter() {
                    if m {
                        vals.push(f.components[(ch, r, c)]);
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert_abs_diff_eq!(mean[ch], m, epsilon = 1e-12);
            assert_abs_diff_eq!(std[ch], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let field = random_field(9);
        for mode in [NormMode::ZScore, NormMode::Fixed] {
            let stats = compute_norm_stats(&[&field], mode).unwrap();
            let normalized = stats.normalize(&field);
            let back = stats.denormalize(&normalized, &field.mask).unwrap();
            for (a, b) in field.components.iter().zip(back.components.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn fixed_mode_divides_by_500() {
        let field = random_field(10);
        let stats = compute_norm_stats(&[&field], NormMode::Fixed).unwrap();
        let normalized = stats.normalize(&field);
        for ((ch, r, c), v) in normalized.indexed_iter() {
            if field.mask[(r, c)] {
                assert_abs_diff_eq!(*v, field.components[(ch, r, c)] / 500.0, epsilon = 1e-18);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn already_standardized_dataset_yields_identity_stats() {
        // One field whose masked values per channel have mean 0, std 1.
        let mut components = Array3::zeros((TENSOR_CHANNELS, 2, 2));
        let mask = Array2::from_elem((2, 2), true);
        for ch in 0..TENSOR_CHANNELS {
            let vals = [1.0, -1.0, 1.0, -1.0];
            for (i, v) in vals.iter().enumerate() {
                components[(ch, i / 2, i % 2)] = *v;
            }
        }
        let field = TensorField::new(components, mask).unwrap();
        let stats = compute_norm_stats(&[&field], NormMode::ZScore).unwrap();
        let NormStats::ZScore { mean, std } = stats else {
            panic!();
        };
        for ch in 0..TENSOR_CHANNELS {
            assert_abs_diff_eq!(mean[ch], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(std[ch], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_variance_channel_is_rejected() {
        let mut components = Array3::zeros((TENSOR_CHANNELS, 2, 2));
        let mask = Array2::from_elem((2, 2), true);
        for ch in 0..TENSOR_CHANNELS - 1 {
            components[(ch, 0, 0)] = 1.0;
        }
        // Last channel constant zero across the mask.
        let field = TensorField::new(components, mask).unwrap();
        match compute_norm_stats(&[&field], NormMode::ZScore) {
            Err(Error::ZeroVarianceChannel(ch)) => assert_eq!(ch, TENSOR_CHANNELS - 1),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }
}
