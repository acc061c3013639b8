//! Acquisition protocol: diffusion weightings, encoding directions, and
//! repetition counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{norm, Vec3};

const UNIT_NORM_TOL: f64 = 1e-12;

/// Diffusion acquisition layout.
///
/// `b_values` and `reps_per_weighting` are parallel: weighting `b_values[i]`
/// is acquired `reps_per_weighting[i]` times. A b = 0 weighting produces one
/// frame per repetition (the reference image); every b > 0 weighting produces
/// one frame per direction per repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionProtocol {
    /// Diffusion weightings in s/mm2.
    pub b_values: Vec<f64>,
    /// Unit gradient directions shared by all b > 0 weightings.
    pub directions: Vec<Vec3>,
    /// Repetition count per weighting, aligned with `b_values`.
    pub reps_per_weighting: Vec<usize>,
    /// (rows, cols) of every frame.
    pub image_size: (usize, usize),
    /// In-plane pixel spacing in mm (metadata only).
    pub pixel_spacing_mm: f64,
}

impl Default for AcquisitionProtocol {
    fn default() -> Self {
        // Six-direction scheme on cube edge midpoints, normalized.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        AcquisitionProtocol {
            b_values: vec![0.0, 150.0, 600.0],
            directions: vec![
                [s, s, 0.0],
                [s, -s, 0.0],
                [s, 0.0, s],
                [s, 0.0, -s],
                [0.0, s, s],
                [0.0, s, -s],
            ],
            reps_per_weighting: vec![8, 2, 8],
            image_size: (128, 128),
            pixel_spacing_mm: 2.8,
        }
    }
}

impl AcquisitionProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.b_values.is_empty() || self.b_values.len() != self.reps_per_weighting.len() {
            return Err(Error::validation(
                "b_values and reps_per_weighting must be non-empty and aligned",
            ));
        }
        if self.b_values.iter().any(|&b| !(b >= 0.0)) {
            return Err(Error::validation("all b-values must be >= 0"));
        }
        let mut seen = self.b_values.clone();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate b-value"));
        }
        for d in &self.directions {
            if (norm(*d) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::validation(format!(
                    "direction {d:?} is not unit norm"
                )));
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::validation("image_size must be positive"));
        }
        if self.b_values.iter().any(|&b| b > 0.0) {
            if self.directions.len() < 6 {
                return Err(Error::validation(
                    "at least 6 directions are required for diffusion weighting",
                ));
            }
            if !directions_span_tensor_space(&self.directions) {
                return Err(Error::validation(
                    "directions are collinear/degenerate: they do not span the tensor space",
                ));
            }
        }
        Ok(())
    }

    /// Index of a weighting by exact b-value.
    pub fn b_index(&self, b: f64) -> Option<usize> {
        self.b_values.iter().position(|&x| x == b)
    }

    /// Repetition count for a weighting, by b-value.
    pub fn reps_for(&self, b: f64) -> Option<usize> {
        self.b_index(b).map(|i| self.reps_per_weighting[i])
    }

    /// The reference weighting: the smallest b-value (normally 0).
    pub fn reference_b_index(&self) -> usize {
        let mut best = 0;
        for (i, &b) in self.b_values.iter().enumerate() {
            if b < self.b_values[best] {
                best = i;
            }
        }
        best
    }

    /// Directions used by weighting `b_idx`: one dummy direction for b = 0.
    pub fn directions_for(&self, b_idx: usize) -> usize {
        if self.b_values[b_idx] == 0.0 {
            1
        } else {
            self.directions.len()
        }
    }

    /// Total frame count implied by the protocol.
    pub fn frame_count(&self) -> usize {
        self.b_values
            .iter()
            .zip(&self.reps_per_weighting)
            .enumerate()
            .map(|(i, (_, reps))| self.directions_for(i) * reps)
            .sum()
    }
}

/// Check that the quadratic forms g g^T of the directions span the 6-dim
/// space of symmetric tensors (rank 6 via column-pivoted elimination).
fn directions_span_tensor_space(dirs: &[Vec3]) -> bool {
    let mut rows: Vec<[f64; 6]> = dirs
        .iter()
        .map(|g| {
            [
                g[0] * g[0],
                g[1] * g[1],
                g[2] * g[2],
                2.0 * g[0] * g[1],
                2.0 * g[0] * g[2],
                2.0 * g[1] * g[2],
            ]
        })
        .collect();
    let mut rank = 0;
    for col in 0..6 {
        let Some((pivot, _)) = rows
            .iter()
            .enumerate()
            .skip(rank)
            .map(|(i, r)| (i, r[col].abs()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        else {
            break;
        };
        if rows[pivot][col].abs() < 1e-9 {
            continue;
        }
        rows.swap(rank, pivot);
        let p = rows[rank][col];
        let pivot_row = rows[rank];
        for (i, r) in rows.iter_mut().enumerate() {
            if i != rank {
                let f = r[col] / p;
                for (x, pv) in r.iter_mut().zip(pivot_row.iter()) {
                    *x -= f * pv;
                }
            }
        }
        rank += 1;
        if rank == 6 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_protocol_is_valid() {
        let p = AcquisitionProtocol::default();
        p.validate().unwrap();
        assert_eq!(p.frame_count(), 8 + 2 * 6 + 8 * 6);
        assert_eq!(p.reps_for(600.0), Some(8));
        assert_eq!(p.reference_b_index(), 0);
    }

    #[test]
    fn collinear_directions_are_rejected() {
        let mut p = AcquisitionProtocol::default();
        p.directions = vec![[1.0, 0.0, 0.0]; 6];
        assert!(p.validate().is_err());
    }

    #[test]
    fn negative_b_is_rejected() {
        let mut p = AcquisitionProtocol::default();
        p.b_values[0] = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let mut p = AcquisitionProtocol::default();
        p.directions[0] = [1.0, 1.0, 0.0];
        assert!(p.validate().is_err());
    }
}
