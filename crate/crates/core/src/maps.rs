//! DT-CMR maps: mean diffusivity, fractional anisotropy, helix angle, and
//! second-eigenvector angle, computed per voxel in a cardiac local basis.
//!
//! The local basis at a voxel is (radial, circumferential, longitudinal):
//! radial points in-plane from the LV centre to the voxel, longitudinal is
//! the slice normal, circumferential completes the right-handed triad.
//!
//! HA is the signed angle between the projection of the primary eigenvector
//! onto the circumferential-longitudinal plane and the circumferential
//! direction, positive toward longitudinal. E2A is the signed angle between
//! the projection of the second eigenvector onto the (cross-fiber, radial)
//! plane and the cross-fiber direction (the vector orthogonal to both radial
//! and the projected primary eigenvector), positive toward radial. Both are
//! reported in [-90, 90] degrees; a 180-degree flip is the same angle.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geom::{cross, dot, normalize, Vec3};
use crate::tensor::{eig_sym3, TensorField};

/// Longitudinal direction: the slice normal.
pub const LONGITUDINAL: Vec3 = [0.0, 0.0, 1.0];

/// Relative eigenvalue gap below which a voxel is flagged near-degenerate.
const NEAR_DEGENERATE_GAP: f64 = 1e-9;

/// Per-voxel orthonormal cardiac frame over the image grid.
///
/// Vectors live in the crate's fixed physical frame (x = +columns,
/// y = -rows, z = slice normal); `valid` is false where the basis is
/// undefined (the voxel sits exactly on the centre).
#[derive(Debug, Clone)]
pub struct LocalBasis {
    pub radial: Array3<f64>,
    pub circumferential: Array3<f64>,
    pub valid: Array2<bool>,
    /// (row, col) centre the basis was built around.
    pub center: (f64, f64),
}

impl LocalBasis {
    pub fn radial_at(&self, row: usize, col: usize) -> Vec3 {
        [
            self.radial[(row, col, 0)],
            self.radial[(row, col, 1)],
            self.radial[(row, col, 2)],
        ]
    }

    pub fn circumferential_at(&self, row: usize, col: usize) -> Vec3 {
        [
            self.circumferential[(row, col, 0)],
            self.circumferential[(row, col, 1)],
            self.circumferential[(row, col, 2)],
        ]
    }
}

/// Centroid of the mask in (row, col) coordinates.
pub fn mask_centroid(mask: &Array2<bool>) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sr / n as f64, sc / n as f64))
}

/// Build the per-voxel (radial, circumferential, longitudinal) frame.
///
/// `lv_center` is (row, col); pass [`mask_centroid`] when no centre is known.
pub fn local_basis(mask: &Array2<bool>, lv_center: (f64, f64)) -> Result<LocalBasis> {
    let (rows, cols) = mask.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMask);
    }
    let mut radial = Array3::zeros((rows, cols, 3));
    let mut circ = Array3::zeros((rows, cols, 3));
    let mut valid = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            // Physical frame: x along +columns, y along -rows.
            let v: Vec3 = [c as f64 - lv_center.1, lv_center.0 - r as f64, 0.0];
            let Some(rad) = normalize(v) else {
                continue; // exact centre voxel: basis undefined
            };
            let ci = cross(LONGITUDINAL, rad);
            radial[(r, c, 0)] = rad[0];
            radial[(r, c, 1)] = rad[1];
            radial[(r, c, 2)] = rad[2];
            circ[(r, c, 0)] = ci[0];
            circ[(r, c, 1)] = ci[1];
            circ[(r, c, 2)] = ci[2];
            valid[(r, c)] = true;
        }
    }
    Ok(LocalBasis {
        radial,
        circumferential: circ,
        valid,
        center: lv_center,
    })
}

/// The four per-voxel maps over the LV mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    /// Mean diffusivity, mm^2/s.
    pub md: Array2<f64>,
    /// Fractional anisotropy, dimensionless.
    pub fa: Array2<f64>,
    /// Helix angle, degrees in [-90, 90].
    pub ha: Array2<f64>,
    /// Second-eigenvector angle, degrees in [-90, 90].
    pub e2a: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Per-voxel diagnostics from [`compute_maps`].
#[derive(Debug, Clone)]
pub struct MapReport {
    /// Voxels whose tensor was exactly zero: dropped from the output mask.
    pub undefined: usize,
    /// Voxels where the angle maps are undefined (isotropic primary
    /// eigenspace or vanishing in-wall projection): angles set to 0 there.
    pub angle_undefined: Array2<bool>,
    /// lambda1 ~ lambda2 within 1e-9 relative: angles kept but flagged.
    pub near_degenerate: usize,
    /// Fitted lambda3 < 0 (non-PSD tensor, kept as-is).
    pub negative_lambda3: usize,
}

/// Wrap an angle in degrees into [-90, 90] modulo 180.
pub fn wrap_half_circle(mut deg: f64) -> f64 {
    while deg > 90.0 {
        deg -= 180.0;
    }
    while deg < -90.0 {
        deg += 180.0;
    }
    deg
}

fn fa_of(l: [f64; 3]) -> f64 {
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let num = (l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2);
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den == 0.0 {
        0.0
    } else {
        (1.5 * num / den).sqrt()
    }
}

/// In-wall fiber direction: the projection of e1 onto the circumferential-
/// longitudinal plane, sign-fixed toward +circumferential so the derived
/// cross-fiber direction does not depend on the eigenvector sign.
fn fiber_direction(e1: Vec3, circ: Vec3, long: Vec3) -> Option<(f64, f64, Vec3)> {
    let mut c = dot(e1, circ);
    let mut l = dot(e1, long);
    if c < 0.0 || (c == 0.0 && l < 0.0) {
        c = -c;
        l = -l;
    }
    let p = [
        c * circ[0] + l * long[0],
        c * circ[1] + l * long[1],
        c * circ[2] + l * long[2],
    ];
    normalize(p).map(|f| (c, l, f))
}

/// Compute MD/FA/HA/E2A from a tensor field over `tensors.mask & basis.valid`.
pub fn compute_maps(tensors: &TensorField, basis: &LocalBasis) -> Result<(MapSet, MapReport)> {
    let (rows, cols) = tensors.shape();
    if basis.valid.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "basis {:?} vs tensors {:?}",
            basis.valid.dim(),
            (rows, cols)
        )));
    }
    let mut md = Array2::zeros((rows, cols));
    let mut fa = Array2::zeros((rows, cols));
    let mut ha = Array2::zeros((rows, cols));
    let mut e2a = Array2::zeros((rows, cols));
    let mut mask = Array2::from_elem((rows, cols), false);
    let mut angle_undefined = Array2::from_elem((rows, cols), false);
    let mut report = MapReport {
        undefined: 0,
        angle_undefined: Array2::from_elem((rows, cols), false),
        near_degenerate: 0,
        negative_lambda3: 0,
    };

    for r in 0..rows {
        for c in 0..cols {
            if !(tensors.mask[(r, c)] && basis.valid[(r, c)]) {
                continue;
            }
            let comps = tensors.voxel(r, c);
            if comps.iter().all(|&x| x == 0.0) {
                report.undefined += 1;
                continue;
            }
            let eig = eig_sym3(comps)?;
            let [l1, l2, l3] = eig.eigenvalues;
            mask[(r, c)] = true;
            md[(r, c)] = (l1 + l2 + l3) / 3.0;
            fa[(r, c)] = fa_of(eig.eigenvalues);
            if l3 < 0.0 {
                report.negative_lambda3 += 1;
            }
            let gap_scale = l1.abs().max(l3.abs()).max(f64::MIN_POSITIVE);
            let gap = (l1 - l2).abs();
            if gap == 0.0 {
                // Isotropic primary eigenspace: e1 is arbitrary.
                angle_undefined[(r, c)] = true;
                continue;
            }
            if gap <= NEAR_DEGENERATE_GAP * gap_scale {
                report.near_degenerate += 1;
            }

            let circ = basis.circumferential_at(r, c);
            let rad = basis.radial_at(r, c);
            match fiber_direction(eig.eigenvectors[0], circ, LONGITUDINAL) {
                Some((fc, fl, fiber)) => {
                    ha[(r, c)] = fl.atan2(fc).to_degrees();
                    // Cross-fiber direction completes (fiber, radial, cf).
                    let cf = cross(rad, fiber);
                    let e2 = eig.eigenvectors[1];
                    let (ec, er) = (dot(e2, cf), dot(e2, rad));
                    if ec == 0.0 && er == 0.0 {
                        angle_undefined[(r, c)] = true;
                    } else {
                        e2a[(r, c)] = wrap_half_circle(er.atan2(ec).to_degrees());
                    }
                }
                None => {
                    // e1 parallel to radial: no in-wall projection.
                    angle_undefined[(r, c)] = true;
                }
            }
        }
    }

    report.angle_undefined = angle_undefined;
    Ok((
        MapSet {
            md,
            fa,
            ha,
            e2a,
            mask,
        },
        report,
    ))
}

impl MapSet {
    /// Mask on which angle comparisons are meaningful.
    pub fn angle_mask(&self, report: &MapReport) -> Array2<bool> {
        let mut m = self.mask.clone();
        for ((r, c), flag) in report.angle_undefined.indexed_iter() {
            if *flag {
                m[(r, c)] = false;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn full_mask(rows: usize, cols: usize) -> Array2<bool> {
        Array2::from_elem((rows, cols), true)
    }

    #[test]
    fn basis_axis_cases() {
        let mask = full_mask(5, 5);
        let basis = local_basis(&mask, (2.0, 2.0)).unwrap();
        // Due east of centre: same row, larger column.
        assert_eq!(basis.radial_at(2, 4), [1.0, 0.0, 0.0]);
        assert_eq!(basis.circumferential_at(2, 4), [0.0, 1.0, 0.0]);
        // Due north: smaller row index.
        assert_eq!(basis.radial_at(0, 2), [0.0, 1.0, 0.0]);
        assert_eq!(basis.circumferential_at(0, 2), [-1.0, 0.0, 0.0]);
        // Centre voxel has no basis.
        assert!(!basis.valid[(2, 2)]);
    }

    #[test]
    fn basis_is_orthonormal_everywhere() {
        let mask = full_mask(9, 9);
        let basis = local_basis(&mask, (4.0, 4.0)).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                if !basis.valid[(r, c)] {
                    continue;
                }
                let rad = basis.radial_at(r, c);
                let ci = basis.circumferential_at(r, c);
                assert_abs_diff_eq!(dot(rad, rad), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(dot(ci, ci), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(dot(rad, ci), 0.0, epsilon = 1e-12);
                let long = cross(rad, ci);
                assert_abs_diff_eq!(dot(long, LONGITUDINAL), 1.0, epsilon = 1e-12);
            }
        }
    }

    fn one_voxel_field(comps: [f64; 6]) -> (TensorField, LocalBasis) {
        let mut components = Array3::zeros((6, 1, 2));
        let mut mask = Array2::from_elem((1, 2), false);
        mask[(0, 1)] = true;
        for (ch, v) in comps.iter().enumerate() {
            components[(ch, 0, 1)] = *v;
        }
        let field = TensorField::new(components, mask.clone()).unwrap();
        // Centre left of the voxel: radial = +x, circ = +y at (0, 1).
        let basis = local_basis(&mask, (0.0, 0.0)).unwrap();
        (field, basis)
    }

    #[test]
    fn isotropic_tensor_has_undefined_angles() {
        let d = 1.0e-3;
        let (field, basis) = one_voxel_field([d, d, d, 0.0, 0.0, 0.0]);
        let (maps, report) = compute_maps(&field, &basis).unwrap();
        assert_abs_diff_eq!(maps.md[(0, 1)], d, epsilon = 1e-18);
        assert_abs_diff_eq!(maps.fa[(0, 1)], 0.0, epsilon = 1e-12);
        assert!(report.angle_undefined[(0, 1)]);
        assert!(maps.mask[(0, 1)]);
    }

    #[test]
    fn rank_one_tensor_has_unit_fa() {
        let (field, basis) = one_voxel_field([0.0, 1.0e-3, 0.0, 0.0, 0.0, 0.0]);
        let (maps, _) = compute_maps(&field, &basis).unwrap();
        assert_abs_diff_eq!(maps.fa[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn helix_angle_geometry() {
        // At voxel (0,1) with centre (0,0): radial = +x, circ = +y, long = +z.
        // e1 = circ gives HA = 0; e1 = (circ+long)/sqrt(2) gives HA = 45.
        let l = [1.6e-3, 1.0e-3, 0.6e-3];
        let along_circ = {
            // D = diag in (circ, cf-ish, long) with primary along +y.
            [l[1], l[0], l[2], 0.0, 0.0, 0.0]
        };
        let (field, basis) = one_voxel_field(along_circ);
        let (maps, _) = compute_maps(&field, &basis).unwrap();
        assert_abs_diff_eq!(maps.ha[(0, 1)], 0.0, epsilon = 1e-9);

        // Primary eigenvector (0, 1, 1)/sqrt(2): build D = sum l_i v_i v_i^T.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v1 = [0.0, s, s];
        let v2 = [1.0, 0.0, 0.0];
        let v3 = [0.0, s, -s];
        let mut m = [[0.0f64; 3]; 3];
        for (lam, v) in l.iter().zip([v1, v2, v3]) {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += lam * v[i] * v[j];
                }
            }
        }
        let comps = crate::tensor::pack(m);
        let (field, basis) = one_voxel_field(comps);
        let (maps, _) = compute_maps(&field, &basis).unwrap();
        assert_abs_diff_eq!(maps.ha[(0, 1)], 45.0, epsilon = 1e-9);
    }

    #[test]
    fn angles_invariant_under_eigenvector_sign_flip() {
        // Random tensors: HA/E2A must not depend on eigenvector sign, which
        // the solver already fixes; verify by rotating tensors 180 degrees
        // around the radial axis combined with flips, via direct comparison
        // of the maps of D and of D with e1 -> -e1 reconstruction.
        let mut rng = crate::rng::stream(7, &[crate::rng::tag("maps-flip")]);
        use rand::Rng;
        for _ in 0..50 {
            let l1: f64 = rng.random_range(1.0..2.0);
            let l2: f64 = rng.random_range(0.3..0.9);
            let l3: f64 = rng.random_range(0.05..0.25);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phi: f64 = rng.random_range(-1.0..1.0f64).acos();
            let v1 = [phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()];
            let any = if v1[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let v2 = normalize(cross(v1, any)).unwrap();
            let v3 = cross(v1, v2);
            let mut m = [[0.0f64; 3]; 3];
            for (lam, v) in [l1, l2, l3].iter().zip([v1, v2, v3]) {
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] += lam * v[i] * v[j];
                    }
                }
            }
            // v -> -v leaves v v^T unchanged, so maps from D are the flip
            // test by construction; instead check reconstruction with
            // flipped inputs produces the identical tensor and hence maps.
            let mut m_flip = [[0.0f64; 3]; 3];
            for (lam, v) in [l1, l2, l3].iter().zip([
                crate::geom::scale(v1, -1.0),
                crate::geom::scale(v2, -1.0),
                v3,
            ]) {
                for i in 0..3 {
                    for j in 0..3 {
                        m_flip[i][j] += lam * v[i] * v[j];
                    }
                }
            }
            let (f1, basis) = one_voxel_field(crate::tensor::pack(m));
            let (f2, _) = one_voxel_field(crate::tensor::pack(m_flip));
            let (maps1, _) = compute_maps(&f1, &basis).unwrap();
            let (maps2, _) = compute_maps(&f2, &basis).unwrap();
            assert_abs_diff_eq!(maps1.ha[(0, 1)], maps2.ha[(0, 1)], epsilon = 1e-9);
            assert_abs_diff_eq!(maps1.e2a[(0, 1)], maps2.e2a[(0, 1)], epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_tensor_voxel_is_dropped_and_counted() {
        let (field, basis) = one_voxel_field([0.0; 6]);
        let (maps, report) = compute_maps(&field, &basis).unwrap();
        assert_eq!(report.undefined, 1);
        assert!(!maps.mask[(0, 1)]);
    }

    #[test]
    fn fa_scale_invariant_md_scales_linearly() {
        let mut rng = crate::rng::stream(9, &[crate::rng::tag("maps-scale")]);
        use rand::Rng;
        for _ in 0..30 {
            let a: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let mut m = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        m[i][j] += a[3 * i + k] * a[3 * j + k];
                    }
                }
            }
            let comps = crate::tensor::pack(m);
            let c = rng.random_range(0.1..10.0);
            let scaled: [f64; 6] = std::array::from_fn(|i| comps[i] * c);
            let (f1, basis) = one_voxel_field(comps);
            let (f2, _) = one_voxel_field(scaled);
            let (m1, _) = compute_maps(&f1, &basis).unwrap();
            let (m2, _) = compute_maps(&f2, &basis).unwrap();
            if !(m1.mask[(0, 1)] && m2.mask[(0, 1)]) {
                continue;
            }
            assert_abs_diff_eq!(m1.fa[(0, 1)], m2.fa[(0, 1)], epsilon = 1e-10);
            assert_abs_diff_eq!(m2.md[(0, 1)], c * m1.md[(0, 1)], epsilon = 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_declared_ranges() {
        let mut rng = crate::rng::stream(8, &[crate::rng::tag("maps-range")]);
        use rand::Rng;
        for _ in 0..100 {
            // Random PSD tensor via A A^T.
            let a: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let mut m = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        m[i][j] += a[3 * i + k] * a[3 * j + k];
                    }
                }
            }
            let (field, basis) = one_voxel_field(crate::tensor::pack(m));
            let (maps, report) = compute_maps(&field, &basis).unwrap();
            if !maps.mask[(0, 1)] {
                continue;
            }
            assert!(maps.md[(0, 1)] >= -1e-15);
            assert!(maps.fa[(0, 1)] >= 0.0 && maps.fa[(0, 1)] <= 1.0 + 1e-12);
            assert!(maps.ha[(0, 1)].abs() <= 90.0 + 1e-12);
            assert!(maps.e2a[(0, 1)].abs() <= 90.0 + 1e-12);
            assert_eq!(report.negative_lambda3, 0);
        }
    }
}
