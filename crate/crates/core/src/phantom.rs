//! Synthetic left-ventricle phantoms and noisy DWI simulation.
//!
//! The phantom is an annular short-axis LV slice whose primary eigenvector
//! follows a transmural helix-angle ramp (endocardium to epicardium) in the
//! local cardiac frame, with a configurable sheetlet (E2A) orientation. The
//! simulator applies the Stejskal-Tanner attenuation `S = S0 exp(-b g'Dg)`,
//! per-repetition rigid in-plane motion, and Rician noise (magnitude of two
//! independent Gaussian channels), with the first repetition optionally
//! degraded to model the patient settling into the breath-hold pattern.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, scale, Vec3};
use crate::maps::{local_basis, LocalBasis, LONGITUDINAL};
use crate::protocol::AcquisitionProtocol;
use crate::registration::fourier_translate;
use crate::rng::{stream, tag};
use crate::stack::{DwiStack, FrameKey, Image};
use crate::tensor::{pack, unpack, TensorField, TENSOR_CHANNELS};

/// Geometry and microstructure of the synthetic LV slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: (usize, usize),
    /// LV centre in (row, col) pixel coordinates.
    pub lv_center: (f64, f64),
    pub endo_radius: f64,
    pub epi_radius: f64,
    /// Helix angle at the endocardial border, degrees.
    pub ha_endo_deg: f64,
    /// Helix angle at the epicardial border, degrees.
    pub ha_epi_deg: f64,
    /// Sheetlet angle at mid-wall, degrees.
    pub e2a_mean_deg: f64,
    /// Linear transmural E2A variation endo-to-epi, degrees (0 = constant).
    pub e2a_transmural_delta_deg: f64,
    /// Tensor eigenvalues (λ1, λ2, λ3) in mm²/s.
    pub eigenvalues: [f64; 3],
    /// Unweighted signal level, arbitrary units.
    pub s0_level: f64,
    /// Partial-volume taper width at the annulus borders, pixels. The signal
    /// ramps down toward the edges inside the mask; 0 gives hard edges.
    pub edge_softness_px: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: (128, 128),
            lv_center: (63.5, 63.5),
            endo_radius: 22.0,
            epi_radius: 44.0,
            ha_endo_deg: 60.0,
            ha_epi_deg: -60.0,
            e2a_mean_deg: 30.0,
            e2a_transmural_delta_deg: 0.0,
            eigenvalues: [1.6e-3, 1.0e-3, 0.6e-3],
            s0_level: 500.0,
            edge_softness_px: 1.5,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.image_size;
        if rows == 0 || cols == 0 {
            return Err(Error::validation("image_size must be positive"));
        }
        if !(self.endo_radius > 0.0 && self.endo_radius < self.epi_radius) {
            return Err(Error::validation(
                "radii must satisfy 0 < endo_radius < epi_radius",
            ));
        }
        let margin = [
            self.lv_center.0,
            rows as f64 - 1.0 - self.lv_center.0,
            self.lv_center.1,
            cols as f64 - 1.0 - self.lv_center.1,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        if self.epi_radius > margin {
            return Err(Error::validation(format!(
                "epi_radius {} exceeds image bounds (margin {margin:.1})",
                self.epi_radius
            )));
        }
        let [l1, l2, l3] = self.eigenvalues;
        if !(l1 >= l2 && l2 >= l3 && l3 > 0.0) {
            return Err(Error::validation(
                "eigenvalue profile must be positive and sorted descending",
            ));
        }
        if self.s0_level <= 0.0 {
            return Err(Error::validation("s0_level must be positive"));
        }
        Ok(())
    }

    /// Ground-truth helix angle at transmural depth in [0, 1].
    pub fn helix_angle_at_depth(&self, depth: f64) -> f64 {
        self.ha_endo_deg + (self.ha_epi_deg - self.ha_endo_deg) * depth
    }

    /// Ground-truth sheetlet angle at transmural depth in [0, 1].
    pub fn e2a_at_depth(&self, depth: f64) -> f64 {
        self.e2a_mean_deg + (depth - 0.5) * self.e2a_transmural_delta_deg
    }

    /// Partial-volume signal weight at a radial distance inside the mask.
    /// Per-voxel scaling cancels in the log-signal fit, so the tensors are
    /// unaffected; soft edges keep the simulated frames nearly band-limited.
    pub fn signal_weight(&self, dist: f64) -> f64 {
        if dist < self.endo_radius || dist > self.epi_radius {
            return 0.0;
        }
        if self.edge_softness_px <= 0.0 {
            return 1.0;
        }
        let from_edges = (dist - self.endo_radius)
            .min(self.epi_radius - dist)
            .max(0.0);
        (from_edges / self.edge_softness_px).clamp(0.05, 1.0)
    }
}

/// Ground truth produced by [`generate_phantom`].
#[derive(Debug, Clone)]
pub struct Phantom {
    pub truth: TensorField,
    pub basis: LocalBasis,
    pub config: PhantomConfig,
    /// Per-voxel transmural depth in [0, 1]; 0 outside the mask.
    pub depth: Array2<f64>,
}

/// Build the annular LV mask and the per-voxel ground-truth tensor.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let (rows, cols) = config.image_size;
    let mut mask = Array2::from_elem((rows, cols), false);
    let mut depth = Array2::zeros((rows, cols));
    let wall = config.epi_radius - config.endo_radius;
    for r in 0..rows {
        for c in 0..cols {
            let dr = r as f64 - config.lv_center.0;
            let dc = c as f64 - config.lv_center.1;
            let dist = (dr * dr + dc * dc).sqrt();
            if dist >= config.endo_radius && dist <= config.epi_radius {
                mask[(r, c)] = true;
                depth[(r, c)] = (dist - config.endo_radius) / wall;
            }
        }
    }
    if mask.iter().all(|&m| !m) {
        return Err(Error::EmptyMask);
    }
    let basis = local_basis(&mask, config.lv_center)?;
    let mut components = Array3::zeros((TENSOR_CHANNELS, rows, cols));
    let [l1, l2, l3] = config.eigenvalues;
    for r in 0..rows {
        for c in 0..cols {
            if !mask[(r, c)] || !basis.valid[(r, c)] {
                mask[(r, c)] = false;
                continue;
            }
            let circ = basis.circumferential_at(r, c);
            let rad = basis.radial_at(r, c);
            let ha = config.helix_angle_at_depth(depth[(r, c)]).to_radians();
            let e2a = config.e2a_at_depth(depth[(r, c)]).to_radians();
            // Fiber in the circumferential-longitudinal plane.
            let e1 = add(scale(circ, ha.cos()), scale(LONGITUDINAL, ha.sin()));
            // Sheetlet normal plane: cross-fiber and radial.
            let cf = cross(rad, e1);
            let e2 = add(scale(cf, e2a.cos()), scale(rad, e2a.sin()));
            let e3 = cross(e1, e2);
            let mut m = [[0.0f64; 3]; 3];
            for (lam, v) in [l1, l2, l3].iter().zip([e1, e2, e3]) {
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] += lam * v[i] * v[j];
                    }
                }
            }
            let comps = pack(m);
            for (ch, v) in comps.iter().enumerate() {
                components[(ch, r, c)] = *v;
            }
        }
    }
    let truth = TensorField::new(components, mask)?;
    Ok(Phantom {
        truth,
        basis,
        config: config.clone(),
        depth,
    })
}

/// JSON has no infinity: a noiseless profile round-trips as `"snr": null`.
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Noise and motion model for the simulated acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    /// S0-to-sigma ratio; `f64::INFINITY` (JSON `null`) disables noise.
    #[serde(with = "snr_serde")]
    pub snr: f64,
    /// Multiplier on sigma for repetition 0 (>= 1).
    pub first_rep_degradation: f64,
    /// Std of the per-repetition rigid translation, pixels (0 = no motion).
    pub motion_shift_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            snr: 25.0,
            first_rep_degradation: 1.0,
            motion_shift_sigma: 0.0,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    pub fn noiseless(seed: u64) -> Self {
        NoiseProfile {
            snr: f64::INFINITY,
            first_rep_degradation: 1.0,
            motion_shift_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0) {
            return Err(Error::validation("snr must be positive"));
        }
        if !(self.first_rep_degradation >= 1.0) {
            return Err(Error::validation("first_rep_degradation must be >= 1"));
        }
        if !(self.motion_shift_sigma >= 0.0) {
            return Err(Error::validation("motion_shift_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Stejskal-Tanner attenuation factor exp(-b g'Dg).
pub fn attenuation(components: [f64; TENSOR_CHANNELS], b: f64, g: Vec3) -> f64 {
    let m = unpack(components);
    let quad = dot(g, [dot(m[0], g), dot(m[1], g), dot(m[2], g)]);
    (-b * quad).exp()
}

/// Simulate the full multi-repetition acquisition of a phantom.
///
/// Each repetition index shares one rigid translation (a breath-hold moves
/// the whole direction set); each frame gets its own noise stream, so the
/// result is bit-identical for a given seed regardless of scheduling.
pub fn simulate_dwi(
    phantom: &Phantom,
    protocol: &AcquisitionProtocol,
    noise: &NoiseProfile,
) -> Result<DwiStack> {
    protocol.validate()?;
    noise.validate()?;
    let truth = &phantom.truth;
    let s0_level = phantom.config.s0_level;
    if truth.shape() != protocol.image_size {
        return Err(Error::ShapeMismatch(format!(
            "truth {:?} vs protocol {:?}",
            truth.shape(),
            protocol.image_size
        )));
    }
    if truth.masked_voxel_count() == 0 {
        return Err(Error::EmptyMask);
    }
    if s0_level <= 0.0 {
        return Err(Error::validation("s0_level must be positive"));
    }
    let (rows, cols) = truth.shape();
    let wall = phantom.config.epi_radius - phantom.config.endo_radius;

    // Noiseless attenuated image per (weighting, direction).
    let mut clean: std::collections::BTreeMap<(usize, usize), Image> = Default::default();
    for b_idx in 0..protocol.b_values.len() {
        for dir_idx in 0..protocol.directions_for(b_idx) {
            let b = protocol.b_values[b_idx];
            let g = if b == 0.0 {
                [0.0, 0.0, 0.0]
            } else {
                protocol.directions[dir_idx]
            };
            let mut img = Array2::zeros((rows, cols));
            for r in 0..rows {
                for c in 0..cols {
                    if truth.mask[(r, c)] {
                        let dist = phantom.config.endo_radius + phantom.depth[(r, c)] * wall;
                        let w = phantom.config.signal_weight(dist);
                        img[(r, c)] = s0_level * w * attenuation(truth.voxel(r, c), b, g);
                    }
                }
            }
            clean.insert((b_idx, dir_idx), img);
        }
    }

    // One translation per repetition index.
    let max_reps = protocol.reps_per_weighting.iter().copied().max().unwrap();
    let motions: Vec<(f64, f64)> = (0..max_reps)
        .map(|rep| {
            if noise.motion_shift_sigma == 0.0 {
                (0.0, 0.0)
            } else {
                let mut rng = stream(noise.seed, &[tag("motion"), rep as u64]);
                let dy: f64 = rng.sample(StandardNormal);
                let dx: f64 = rng.sample(StandardNormal);
                (dy * noise.motion_shift_sigma, dx * noise.motion_shift_sigma)
            }
        })
        .collect();

    let sigma = if noise.snr.is_finite() {
        s0_level / noise.snr
    } else {
        0.0
    };
    let keys = DwiStack::expected_keys(protocol);
    let frames: Vec<(FrameKey, Image)> = keys
        .into_par_iter()
        .map(|key| {
            let base = &clean[&(key.b_idx, key.dir_idx)];
            let moved = {
                let t = motions[key.rep_idx];
                if t == (0.0, 0.0) {
                    base.clone()
                } else {
                    fourier_translate(base, t)
                }
            };
            let s = if key.rep_idx == 0 {
                sigma * noise.first_rep_degradation
            } else {
                sigma
            };
            let mut img = moved;
            if s > 0.0 {
                let mut rng = stream(
                    noise.seed,
                    &[
                        tag("rician"),
                        key.b_idx as u64,
                        key.dir_idx as u64,
                        key.rep_idx as u64,
                    ],
                );
                img.mapv_inplace(|v| {
                    let n1: f64 = rng.sample(StandardNormal);
                    let n2: f64 = rng.sample(StandardNormal);
                    ((v + s * n1).powi(2) + (s * n2).powi(2)).sqrt()
                });
            } else {
                // Magnitude of the (possibly ringing) translated image.
                img.mapv_inplace(f64::abs);
            }
            (key, img)
        })
        .collect();

    DwiStack::new(
        protocol.clone(),
        frames.into_iter().collect(),
        truth.mask.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::compute_maps;
    use approx::assert_abs_diff_eq;

    #[test]
    fn helix_ramp_boundary_values() {
        let config = PhantomConfig::default();
        assert_eq!(config.helix_angle_at_depth(0.0), 60.0);
        assert_eq!(config.helix_angle_at_depth(0.5), 0.0);
        assert_eq!(config.helix_angle_at_depth(1.0), -60.0);
    }

    #[test]
    fn generated_maps_match_config() {
        let mut config = PhantomConfig::default();
        config.image_size = (48, 48);
        config.lv_center = (23.5, 23.5);
        config.endo_radius = 8.0;
        config.epi_radius = 20.0;
        let phantom = generate_phantom(&config).unwrap();
        let (maps, _) = compute_maps(&phantom.truth, &phantom.basis).unwrap();
        let fa_expected = {
            let [l1, l2, l3] = config.eigenvalues;
            let mean = (l1 + l2 + l3) / 3.0;
            let num = (l1 - mean).powi(2) + (l2 - mean).powi(2) + (l3 - mean).powi(2);
            (1.5 * num / (l1 * l1 + l2 * l2 + l3 * l3)).sqrt()
        };
        for ((r, c), &m) in maps.mask.indexed_iter() {
            if !m {
                continue;
            }
            let want_ha = config.helix_angle_at_depth(phantom.depth[(r, c)]);
            assert_abs_diff_eq!(maps.ha[(r, c)], want_ha, epsilon = 1e-9);
            assert_abs_diff_eq!(maps.e2a[(r, c)], config.e2a_mean_deg, epsilon = 1e-9);
            // Constant eigenvalue profile: FA identical everywhere.
            assert_abs_diff_eq!(maps.fa[(r, c)], fa_expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let mut config = PhantomConfig::default();
        config.epi_radius = 80.0;
        assert!(generate_phantom(&config).is_err());
    }

    #[test]
    fn attenuation_analytic_case() {
        // D = 1e-3 * I, b = 600: exp(-0.6).
        let d = [1e-3, 1e-3, 1e-3, 0.0, 0.0, 0.0];
        let g = [1.0, 0.0, 0.0];
        assert_abs_diff_eq!(attenuation(d, 600.0, g), (-0.6f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(attenuation(d, 600.0, g), 0.548812, epsilon = 1e-6);
    }

    #[test]
    fn b0_noiseless_equals_s0() {
        let mut config = PhantomConfig::default();
        config.image_size = (32, 32);
        config.lv_center = (15.5, 15.5);
        config.endo_radius = 5.0;
        config.epi_radius = 13.0;
        let phantom = generate_phantom(&config).unwrap();
        let mut protocol = AcquisitionProtocol::default();
        protocol.image_size = (32, 32);
        protocol.reps_per_weighting = vec![1, 1, 1];
        let stack = simulate_dwi(&phantom, &protocol, &NoiseProfile::noiseless(1)).unwrap();
        let b0 = &stack.frames[&FrameKey::new(0, 0, 0)];
        let wall = config.epi_radius - config.endo_radius;
        for ((r, c), &m) in stack.mask.indexed_iter() {
            if m {
                let dist = config.endo_radius + phantom.depth[(r, c)] * wall;
                let expected = config.s0_level * config.signal_weight(dist);
                assert_abs_diff_eq!(b0[(r, c)], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn background_noise_matches_rayleigh_moment() {
        // Pure-noise voxels are Rayleigh(sigma): mean = sigma sqrt(pi/2).
        let mut config = PhantomConfig::default();
        config.lv_center = (63.5, 63.5);
        config.endo_radius = 10.0;
        config.epi_radius = 16.0;
        let phantom = generate_phantom(&config).unwrap();
        let protocol = AcquisitionProtocol::default();
        let noise = NoiseProfile {
            snr: 25.0,
            seed: 11,
            ..NoiseProfile::default()
        };
        let stack = simulate_dwi(&phantom, &protocol, &noise).unwrap();
        let sigma = config.s0_level / noise.snr;
        let mut sum = 0.0;
        let mut n = 0usize;
        for frame in stack.frames.values() {
            for ((r, c), &v) in frame.indexed_iter() {
                if !stack.mask[(r, c)] {
                    sum += v;
                    n += 1;
                }
            }
        }
        assert!(n > 1_000_000, "want > 1e6 background samples, got {n}");
        let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
        let mean = sum / n as f64;
        assert!(
            (mean - expected).abs() / expected < 0.01,
            "background mean {mean} vs Rayleigh moment {expected}"
        );
    }

    #[test]
    fn simulation_is_deterministic() {
        let mut config = PhantomConfig::default();
        config.image_size = (32, 32);
        config.lv_center = (15.5, 15.5);
        config.endo_radius = 5.0;
        config.epi_radius = 13.0;
        let phantom = generate_phantom(&config).unwrap();
        let mut protocol = AcquisitionProtocol::default();
        protocol.image_size = (32, 32);
        protocol.reps_per_weighting = vec![2, 1, 2];
        let noise = NoiseProfile {
            snr: 20.0,
            motion_shift_sigma: 0.5,
            seed: 3,
            ..NoiseProfile::default()
        };
        let a = simulate_dwi(&phantom, &protocol, &noise).unwrap();
        let b = simulate_dwi(&phantom, &protocol, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn higher_b_never_increases_noiseless_signal() {
        let comps = [1.6e-3, 1.0e-3, 0.6e-3, 1e-4, -2e-4, 5e-5];
        let g = crate::geom::normalize([0.3, -0.5, 0.8]).unwrap();
        let mut last = f64::INFINITY;
        for b in [0.0, 150.0, 350.0, 600.0, 900.0] {
            let s = attenuation(comps, b, g);
            assert!(s <= last + 1e-15);
            last = s;
        }
    }
}
