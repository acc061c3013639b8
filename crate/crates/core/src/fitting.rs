//! Repetition selection, breath-hold budgets, averaging, and the linear
//! least-squares tensor fit.
//!
//! The fit solves, per masked voxel, `min || A x - ln S ||` with
//! `x = (ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` and design rows
//! `(1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz)`.
//! The design depends only on the protocol, so its QR factorization is
//! computed once and shared across voxels.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::protocol::AcquisitionProtocol;
use crate::rng::{stream, tag};
use crate::stack::{DwiStack, FrameKey, Image};
use crate::tensor::{TensorField, TENSOR_CHANNELS};

/// The five repetition-selection schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeVariant {
    First,
    Centre,
    Last,
    Random,
    FirstPlus1,
}

impl SchemeVariant {
    pub const ALL: [SchemeVariant; 5] = [
        SchemeVariant::First,
        SchemeVariant::Centre,
        SchemeVariant::Last,
        SchemeVariant::Random,
        SchemeVariant::FirstPlus1,
    ];

    /// Short code used in CLI arguments and table outputs.
    pub fn code(&self) -> &'static str {
        match self {
            SchemeVariant::First => "F",
            SchemeVariant::Centre => "C",
            SchemeVariant::Last => "L",
            SchemeVariant::Random => "R",
            SchemeVariant::FirstPlus1 => "F1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "F" | "First" | "first" => Ok(SchemeVariant::First),
            "C" | "Centre" | "centre" | "Center" => Ok(SchemeVariant::Centre),
            "L" | "Last" | "last" => Ok(SchemeVariant::Last),
            "R" | "Random" | "random" => Ok(SchemeVariant::Random),
            "F1" | "First+1" | "FirstPlus1" => Ok(SchemeVariant::FirstPlus1),
            other => Err(Error::validation(format!("unknown scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for SchemeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// A scheme plus the seed that makes `Random` reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme {
    pub variant: SchemeVariant,
    pub seed: u64,
}

impl SamplingScheme {
    pub fn new(variant: SchemeVariant, seed: u64) -> Self {
        SamplingScheme { variant, seed }
    }
}

/// Choose `m` of `n` repetition indices according to a scheme.
///
/// `Centre` uses offset floor((n - m) / 2), ties broken toward earlier
/// repetitions; `Random` draws uniformly without replacement and returns the
/// indices sorted; `FirstPlus1` takes the first m + 1 and drops the first.
pub fn select_indices(
    variant: SchemeVariant,
    n_available: usize,
    m: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let needed = if variant == SchemeVariant::FirstPlus1 {
        m + 1
    } else {
        m
    };
    if needed > n_available {
        return Err(Error::validation(format!(
            "scheme {variant} needs {needed} repetitions, have {n_available}"
        )));
    }
    Ok(match variant {
        SchemeVariant::First => (0..m).collect(),
        SchemeVariant::Centre => {
            let offset = (n_available - m) / 2;
            (offset..offset + m).collect()
        }
        SchemeVariant::Last => (n_available - m..n_available).collect(),
        SchemeVariant::FirstPlus1 => (1..=m).collect(),
        SchemeVariant::Random => {
            // Partial Fisher-Yates, then sorted for a canonical sub-stack.
            let mut pool: Vec<usize> = (0..n_available).collect();
            for i in 0..m {
                let j = rng.random_range(i..n_available);
                pool.swap(i, j);
            }
            let mut chosen = pool[..m].to_vec();
            chosen.sort_unstable();
            chosen
        }
    })
}

/// Repetitions to keep per b-value for a reduced acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreathHoldBudget {
    pub name: String,
    /// (b-value, repetitions to keep); weightings not listed are dropped.
    pub reps: Vec<(f64, usize)>,
}

impl BreathHoldBudget {
    pub fn one_bh() -> Self {
        BreathHoldBudget {
            name: "1BH".into(),
            reps: vec![(0.0, 1), (600.0, 1), (150.0, 0)],
        }
    }

    pub fn three_bh() -> Self {
        BreathHoldBudget {
            name: "3BH".into(),
            reps: vec![(0.0, 2), (600.0, 2), (150.0, 1)],
        }
    }

    pub fn five_bh() -> Self {
        BreathHoldBudget {
            name: "5BH".into(),
            reps: vec![(0.0, 4), (600.0, 4), (150.0, 1)],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1BH" => Ok(Self::one_bh()),
            "3BH" => Ok(Self::three_bh()),
            "5BH" => Ok(Self::five_bh()),
            other => Err(Error::validation(format!("unknown budget '{other}'"))),
        }
    }

    pub fn reps_for(&self, b: f64) -> usize {
        self.reps
            .iter()
            .find(|(bv, _)| *bv == b)
            .map(|(_, m)| *m)
            .unwrap_or(0)
    }
}

/// Which original repetition indices a selection kept, per b-value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub budget: String,
    pub scheme: SchemeVariant,
    pub kept: Vec<(f64, Vec<usize>)>,
}

/// Reduce a stack to the budgeted repetition counts, chosen per scheme.
///
/// Selected repetitions are re-indexed densely from 0; the report records
/// the original indices. `Random` derives one stream per (seed, b-index).
pub fn select_repetitions(
    stack: &DwiStack,
    scheme: &SamplingScheme,
    budget: &BreathHoldBudget,
) -> Result<(DwiStack, SelectionReport)> {
    let protocol = &stack.protocol;
    let mut new_reps = vec![0usize; protocol.b_values.len()];
    let mut kept: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut frames = std::collections::BTreeMap::new();

    for (b_idx, &b) in protocol.b_values.iter().enumerate() {
        let m = budget.reps_for(b);
        let available = protocol.reps_per_weighting[b_idx];
        let needed = if scheme.variant == SchemeVariant::FirstPlus1 && m > 0 {
            m + 1
        } else {
            m
        };
        if needed > available {
            return Err(Error::InsufficientRepetitions {
                b,
                needed,
                available,
            });
        }
        let mut rng = stream(scheme.seed, &[tag("select"), b_idx as u64]);
        let chosen = select_indices(scheme.variant, available, m, &mut rng)?;
        new_reps[b_idx] = chosen.len();
        for dir_idx in 0..protocol.directions_for(b_idx) {
            for (new_rep, &old_rep) in chosen.iter().enumerate() {
                let key = FrameKey::new(b_idx, dir_idx, old_rep);
                let frame = stack
                    .frames
                    .get(&key)
                    .ok_or_else(|| Error::validation(format!("missing frame {key:?}")))?;
                frames.insert(FrameKey::new(b_idx, dir_idx, new_rep), frame.clone());
            }
        }
        kept.push((b, chosen));
    }

    let mut protocol = protocol.clone();
    protocol.reps_per_weighting = new_reps;
    let out = DwiStack::new(protocol, frames, stack.mask.clone())?;
    Ok((
        out,
        SelectionReport {
            budget: budget.name.clone(),
            scheme: scheme.variant,
            kept,
        },
    ))
}

/// Repetition-averaged frames, one per (b-value, direction).
#[derive(Debug, Clone)]
pub struct AveragedStack {
    pub protocol: AcquisitionProtocol,
    /// (b, direction, mean image) in (b-index, direction-index) order.
    /// b = 0 rows carry a zero direction; it never enters the design.
    pub frames: Vec<(f64, Vec3, Image)>,
    pub mask: ndarray::Array2<bool>,
}

/// Arithmetic per-pixel mean over the repetitions of every (b, direction).
pub fn average_repetitions(stack: &DwiStack) -> Result<AveragedStack> {
    let protocol = &stack.protocol;
    let (rows, cols) = protocol.image_size;
    let mut frames = Vec::new();
    for (b_idx, &b) in protocol.b_values.iter().enumerate() {
        for dir_idx in 0..protocol.directions_for(b_idx) {
            let reps: Vec<&Image> = stack
                .frames
                .iter()
                .filter(|(k, _)| k.b_idx == b_idx && k.dir_idx == dir_idx)
                .map(|(_, v)| v)
                .collect();
            if reps.is_empty() {
                if protocol.reps_per_weighting[b_idx] == 0 {
                    continue; // weighting dropped by the budget
                }
                return Err(Error::validation(format!(
                    "no repetitions for b = {b}, direction {dir_idx}"
                )));
            }
            let mut mean = Image::zeros((rows, cols));
            for rep in &reps {
                mean += *rep;
            }
            mean.mapv_inplace(|v| v / reps.len() as f64);
            let g = if b == 0.0 {
                [0.0, 0.0, 0.0]
            } else {
                protocol.directions[dir_idx]
            };
            frames.push((b, g, mean));
        }
    }
    Ok(AveragedStack {
        protocol: protocol.clone(),
        frames,
        mask: stack.mask.clone(),
    })
}

/// Diagnostics from the LLS fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Masked voxels dropped because an averaged signal was non-positive.
    pub dropped_nonpositive: usize,
    /// Fitted ln S0 per voxel (0 outside the output mask).
    pub ln_s0: Image,
}

fn design_row(b: f64, g: Vec3) -> [f64; 7] {
    [
        1.0,
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
    ]
}

/// Thin Householder QR: returns (Q: m x n, R: n x n upper triangular).
fn householder_qr(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let mut r = a.clone();
    // Q accumulated as a full product applied to the first n identity columns.
    let mut q = Array2::eye(m);
    for k in 0..n.min(m - 1) {
        let mut norm = 0.0;
        for i in k..m {
            norm += r[(i, k)] * r[(i, k)];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] >= 0.0 { -norm } else { norm };
        let mut v = Array1::zeros(m);
        v[k] = r[(k, k)] - alpha;
        for i in k + 1..m {
            v[i] = r[(i, k)];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        // r -= 2 v (v^T r) / v^T v
        for j in 0..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i] * r[(i, j)];
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                r[(i, j)] -= f * v[i];
            }
        }
        // q -= 2 (q v) v^T / v^T v
        for i in 0..m {
            let mut dot = 0.0;
            for l in k..m {
                dot += q[(i, l)] * v[l];
            }
            let f = 2.0 * dot / vtv;
            for l in k..m {
                q[(i, l)] -= f * v[l];
            }
        }
    }
    let q_thin = q.slice(ndarray::s![.., ..n]).to_owned();
    let r_top = r.slice(ndarray::s![..n, ..]).to_owned();
    (q_thin, r_top)
}

/// Linear least-squares tensor fit of the averaged frames.
///
/// Voxels with a non-positive averaged signal are dropped from the output
/// mask (ln undefined) and counted in the report. A rank-deficient design
/// is rejected before any voxel is fitted.
pub fn lls_fit(avg: &AveragedStack) -> Result<(TensorField, FitReport)> {
    let rows_meta: Vec<(f64, Vec3)> = avg.frames.iter().map(|(b, g, _)| (*b, *g)).collect();
    if rows_meta.len() < 7 {
        return Err(Error::validation(format!(
            "LLS fit needs >= 7 measurements, have {}",
            rows_meta.len()
        )));
    }
    let m = rows_meta.len();
    let mut a = Array2::zeros((m, 7));
    for (i, (b, g)) in rows_meta.iter().enumerate() {
        let row = design_row(*b, *g);
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let (q, r) = householder_qr(&a);
    let a_scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for j in 0..7 {
        if r[(j, j)].abs() < 1e-12 * a_scale {
            return Err(Error::validation(
                "rank-deficient design: directions/b-values do not determine the tensor",
            ));
        }
    }

    let (img_rows, img_cols) = avg.protocol.image_size;
    let voxels: Vec<(usize, usize)> = avg
        .mask
        .indexed_iter()
        .filter_map(|((r, c), &m)| m.then_some((r, c)))
        .collect();

    struct VoxelFit {
        row: usize,
        col: usize,
        x: Option<[f64; 7]>, // ln_s0 + 6 components, None if dropped
    }

    let fits: Vec<VoxelFit> = voxels
        .par_iter()
        .map(|&(row, col)| {
            let mut y = [0.0f64; 64];
            debug_assert!(m <= 64);
            for (i, (_, _, img)) in avg.frames.iter().enumerate() {
                let s = img[(row, col)];
                if !(s > 0.0) {
                    return VoxelFit { row, col, x: None };
                }
                y[i] = s.ln();
            }
            // x = R^-1 Q^T y
            let mut qty = [0.0f64; 7];
            for j in 0..7 {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += q[(i, j)] * y[i];
                }
                qty[j] = acc;
            }
            let mut x = [0.0f64; 7];
            for j in (0..7).rev() {
                let mut acc = qty[j];
                for k in j + 1..7 {
                    acc -= r[(j, k)] * x[k];
                }
                x[j] = acc / r[(j, j)];
            }
            VoxelFit {
                row,
                col,
                x: Some([x[0], x[1], x[2], x[3], x[4], x[5], x[6]]),
            }
        })
        .collect();

    let mut components = ndarray::Array3::zeros((TENSOR_CHANNELS, img_rows, img_cols));
    let mut mask = ndarray::Array2::from_elem((img_rows, img_cols), false);
    let mut ln_s0 = Image::zeros((img_rows, img_cols));
    let mut dropped = 0usize;
    for fit in fits {
        match fit.x {
            Some(x) => {
                mask[(fit.row, fit.col)] = true;
                ln_s0[(fit.row, fit.col)] = x[0];
                for ch in 0..TENSOR_CHANNELS {
                    components[(ch, fit.row, fit.col)] = x[ch + 1];
                }
            }
            None => dropped += 1,
        }
    }
    let field = TensorField::new(components, mask)?;
    Ok((
        field,
        FitReport {
            dropped_nonpositive: dropped,
            ln_s0,
        },
    ))
}
