//! Symmetric rank-2 diffusion tensors and their eigendecomposition.
//!
//! A tensor is stored as its six unique components in the fixed channel
//! order `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`. Eigenvalues come from the
//! closed-form trigonometric solution for 3x3 symmetric matrices; when the
//! spectrum is (near-)degenerate the solver falls back to cyclic Jacobi
//! rotations, which remain well conditioned there. Eigenvector signs are
//! fixed so that the largest-magnitude entry of each vector is positive,
//! making downstream angle maps reproducible bit for bit.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geom::{cross, dot, normalize, scale, sub, Vec3};

/// Number of unique components of a symmetric 3x3 tensor.
pub const TENSOR_CHANNELS: usize = 6;

/// Channel names in storage order.
pub const CHANNEL_NAMES: [&str; TENSOR_CHANNELS] = ["Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz"];

/// Relative eigenvalue gap below which the Jacobi fallback is used.
const DEGENERACY_GAP: f64 = 1e-12;

/// Sorted eigendecomposition of a symmetric 3x3 matrix.
///
/// `eigenvalues` are descending; `eigenvectors[i]` is the unit eigenvector
/// for `eigenvalues[i]`, sign-fixed as described in [`eig_sym3`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: [f64; 3],
    pub eigenvectors: [Vec3; 3],
}

/// Expand six components into the full symmetric matrix.
pub fn unpack(c: [f64; TENSOR_CHANNELS]) -> [[f64; 3]; 3] {
    [[c[0], c[3], c[4]], [c[3], c[1], c[5]], [c[4], c[5], c[2]]]
}

/// Collapse a symmetric matrix back to the six unique components.
pub fn pack(m: [[f64; 3]; 3]) -> [f64; TENSOR_CHANNELS] {
    [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Eigenvalues by the trigonometric closed form, descending.
fn closed_form_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q, q, q];
    }
    let mut b = *a;
    for (i, row) in b.iter_mut().enumerate() {
        row[i] -= q;
        for x in row.iter_mut() {
            *x /= p;
        }
    }
    let r = (det3(&b) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3]
}

/// Eigenvector of `a` for eigenvalue `lambda[i]`, assuming distinct spectrum:
/// the columns of (A - lambda_j I)(A - lambda_k I) span the eigenspace.
fn projector_eigenvector(a: &[[f64; 3]; 3], lambda: [f64; 3], i: usize) -> Option<Vec3> {
    let (j, k) = match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut aj = *a;
    let mut ak = *a;
    for d in 0..3 {
        aj[d][d] -= lambda[j];
        ak[d][d] -= lambda[k];
    }
    let m = mat_mul(&aj, &ak);
    let cols = [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ];
    let best = cols
        .iter()
        .copied()
        .max_by(|u, v| dot(*u, *u).partial_cmp(&dot(*v, *v)).unwrap())?;
    normalize(best)
}

/// Cyclic Jacobi rotations; robust for repeated eigenvalues.
fn jacobi_eig(a: &[[f64; 3]; 3]) -> ([f64; 3], [Vec3; 3]) {
    let mut m = *a;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let off = |m: &[[f64; 3]; 3]| m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let scale_sq: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j] * m[i][j])
        .sum();
    let tol = (scale_sq.max(f64::MIN_POSITIVE)) * 1e-30;
    for _ in 0..64 {
        if off(&m) <= tol {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if m[p][q] == 0.0 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            rot[p][p] = c;
            rot[q][q] = c;
            rot[p][q] = s;
            rot[q][p] = -s;
            // m = rot^T m rot, v = v rot
            let rt = [
                [rot[0][0], rot[1][0], rot[2][0]],
                [rot[0][1], rot[1][1], rot[2][1]],
                [rot[0][2], rot[1][2], rot[2][2]],
            ];
            m = mat_mul(&rt, &mat_mul(&m, &rot));
            m[p][q] = 0.0;
            m[q][p] = 0.0;
            v = mat_mul(&v, &rot);
        }
    }
    let lambda = [m[0][0], m[1][1], m[2][2]];
    let vecs = [
        [v[0][0], v[1][0], v[2][0]],
        [v[0][1], v[1][1], v[2][1]],
        [v[0][2], v[1][2], v[2][2]],
    ];
    (lambda, vecs)
}

/// Make the largest-magnitude entry of `v` positive; first index wins ties.
fn fix_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        scale(v, -1.0)
    } else {
        v
    }
}

/// Eigendecomposition of a symmetric tensor given as six components.
///
/// Eigenvalues are sorted descending; eigenvectors form an orthonormal set
/// even for repeated eigenvalues, and each vector's sign is chosen so its
/// largest-magnitude entry is positive.
pub fn eig_sym3(components: [f64; TENSOR_CHANNELS]) -> Result<EigenSystem> {
    if components.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidTensor("non-finite component"));
    }
    let scale_abs = components.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale_abs == 0.0 {
        return Ok(EigenSystem {
            eigenvalues: [0.0; 3],
            eigenvectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        });
    }
    // Work on the rescaled matrix for uniform thresholds.
    let scaled: [f64; 6] = std::array::from_fn(|i| components[i] / scale_abs);
    let a = unpack(scaled);
    let lambda = closed_form_eigenvalues(&a);
    let gap = (lambda[0] - lambda[1]).min(lambda[1] - lambda[2]);
    let lam_scale = lambda[0].abs().max(lambda[2].abs()).max(1.0);

    let (lambda, vectors) = if gap <= DEGENERACY_GAP * lam_scale {
        let (mut l, mut v) = jacobi_eig(&a);
        // Sort pairs descending by eigenvalue.
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&i, &j| l[j].partial_cmp(&l[i]).unwrap());
        (l, v) = (
            [l[idx[0]], l[idx[1]], l[idx[2]]],
            [v[idx[0]], v[idx[1]], v[idx[2]]],
        );
        (l, v)
    } else {
        let v1 = projector_eigenvector(&a, lambda, 0)
            .ok_or(Error::InvalidTensor("eigenvector extraction failed"))?;
        let v2_raw = projector_eigenvector(&a, lambda, 1)
            .ok_or(Error::InvalidTensor("eigenvector extraction failed"))?;
        // Exact orthonormal basis: re-orthogonalize v2, complete with a cross.
        let v2 = normalize(sub(v2_raw, scale(v1, dot(v2_raw, v1))))
            .ok_or(Error::InvalidTensor("eigenvector extraction failed"))?;
        let v3 = cross(v1, v2);
        (lambda, [v1, v2, v3])
    };

    Ok(EigenSystem {
        eigenvalues: [
            lambda[0] * scale_abs,
            lambda[1] * scale_abs,
            lambda[2] * scale_abs,
        ],
        eigenvectors: [
            fix_sign(vectors[0]),
            fix_sign(vectors[1]),
            fix_sign(vectors[2]),
        ],
    })
}

/// Per-voxel symmetric diffusion tensors over an image grid.
///
/// `components` has shape `(6, rows, cols)` in the storage channel order;
/// masked-out voxels hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub components: Array3<f64>,
    pub mask: Array2<bool>,
}

impl TensorField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TensorField {
            components: Array3::zeros((TENSOR_CHANNELS, rows, cols)),
            mask: Array2::from_elem((rows, cols), false),
        }
    }

    pub fn new(components: Array3<f64>, mask: Array2<bool>) -> Result<Self> {
        let (c, rows, cols) = components.dim();
        if c != TENSOR_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "tensor field needs {TENSOR_CHANNELS} channels, got {c}"
            )));
        }
        if mask.dim() != (rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs image {:?}",
                mask.dim(),
                (rows, cols)
            )));
        }
        let mut field = TensorField { components, mask };
        field.zero_outside_mask();
        Ok(field)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// Enforce the masked-out-voxels-are-zero invariant.
    pub fn zero_outside_mask(&mut self) {
        let (rows, cols) = self.mask.dim();
        for r in 0..rows {
            for c in 0..cols {
                if !self.mask[(r, c)] {
                    for ch in 0..TENSOR_CHANNELS {
                        self.components[(ch, r, c)] = 0.0;
                    }
                }
            }
        }
    }

    pub fn voxel(&self, row: usize, col: usize) -> [f64; TENSOR_CHANNELS] {
        std::array::from_fn(|ch| self.components[(ch, row, col)])
    }

    pub fn set_voxel(&mut self, row: usize, col: usize, c: [f64; TENSOR_CHANNELS]) {
        for (ch, v) in c.iter().enumerate() {
            self.components[(ch, row, col)] = *v;
        }
    }

    pub fn masked_voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Residual `max_i |A v_i - lambda_i v_i|` relative to the matrix scale;
/// used by tests and the map stage's sanity checks.
pub fn eigen_residual(components: [f64; TENSOR_CHANNELS], eig: &EigenSystem) -> f64 {
    let a = unpack(components);
    let scale_abs = components
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..3 {
        let av = mat_vec(&a, eig.eigenvectors[i]);
        let lv = scale(eig.eigenvectors[i], eig.eigenvalues[i]);
        let r = sub(av, lv);
        worst = worst.max(dot(r, r).sqrt() / scale_abs);
    }
    worst
}
