//! Map-comparison errors and the nonparametric statistics behind the study
//! tables.
//!
//! Angle maps are compared with the mean angle absolute error (MAAE), where
//! the per-voxel distance is `|x - y|` when below 90 degrees and
//! `180 - |x - y|` otherwise, so angles 180 degrees apart are identical.
//! Scalar maps use the plain mean absolute error; the reporting layer scales
//! MD by 1e5 and FA by 1e2 to match the table headers.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Two-sided significance threshold shared by every test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// MD values are reported as MAE x 1e5.
pub const MD_REPORT_SCALE: f64 = 1e5;
/// FA values are reported as MAE x 1e2.
pub const FA_REPORT_SCALE: f64 = 1e2;

/// Wrap-aware angular distance in degrees for values in [-90, 90].
pub fn angle_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d < 90.0 {
        d
    } else {
        180.0 - d
    }
}

fn check_shapes(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if x.dim() != y.dim() || x.dim() != mask.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x {:?}, y {:?}, mask {:?}",
            x.dim(),
            y.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Mean angle absolute error over the masked voxels, degrees.
pub fn maae(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_shapes(x, y, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (a, b) = (x[(r, c)], y[(r, c)]);
        if a.abs() > 90.0 + 1e-9 || b.abs() > 90.0 + 1e-9 {
            return Err(Error::validation(format!(
                "angle outside [-90, 90] at ({r},{c}): {a}, {b}"
            )));
        }
        sum += angle_distance(a, b);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Mean absolute error over the masked voxels, in the input's units.
pub fn mae(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_shapes(x, y, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            sum += (x[(r, c)] - y[(r, c)]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Result of a two-sample Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// True when the p-value came from exact permutation enumeration.
    pub exact: bool,
}

fn ks_statistic_labeled(sorted: &[(f64, bool)], n_a: usize, n_b: usize) -> f64 {
    let (da, db) = (1.0 / n_a as f64, 1.0 / n_b as f64);
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                fa += da;
            } else {
                fb += db;
            }
            i += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d
}

/// Complement of the asymptotic Kolmogorov distribution (alternating series).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64 * lambda).powi(2)).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn binomial_at_most(n: usize, k: usize, cap: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
        if acc > cap {
            return None;
        }
    }
    Some(acc)
}

const KS_EXACT_LIMIT: u128 = 20_000;

/// Two-sample Kolmogorov-Smirnov test.
///
/// D is the supremum ECDF difference. The p-value is exact (conditional
/// permutation enumeration over label assignments) when the pooled sample
/// admits at most 20000 assignments; otherwise it uses the asymptotic
/// Kolmogorov distribution with the standard effective-n correction
/// `(sqrt(ne) + 0.12 + 0.11/sqrt(ne)) D`. The asymptotic form is far too
/// coarse at the small sample sizes the exact path covers.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("KS test needs non-empty samples"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::validation("KS test on non-finite values"));
    }
    let (n_a, n_b) = (a.len(), b.len());
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let d_obs = ks_statistic_labeled(&pooled, n_a, n_b);

    if let Some(total) = binomial_at_most(n_a + n_b, n_a, KS_EXACT_LIMIT) {
        let values: Vec<f64> = pooled.iter().map(|p| p.0).collect();
        let n = values.len();
        let mut combo: Vec<usize> = (0..n_a).collect();
        let mut labels = vec![false; n];
        let mut at_least = 0u128;
        loop {
            labels.iter_mut().for_each(|l| *l = false);
            for &i in &combo {
                labels[i] = true;
            }
            let merged: Vec<(f64, bool)> =
                values.iter().copied().zip(labels.iter().copied()).collect();
            let d = ks_statistic_labeled(&merged, n_a, n_b);
            if d >= d_obs - 1e-12 {
                at_least += 1;
            }
            // Next lexicographic combination of n_a out of n.
            let mut i = n_a;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if combo[i] != i + n - n_a {
                    combo[i] += 1;
                    for j in i + 1..n_a {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    combo.clear();
                    break;
                }
            }
            if combo.is_empty() {
                break;
            }
        }
        return Ok(KsResult {
            statistic: d_obs,
            p_value: at_least as f64 / total as f64,
            exact: true,
        });
    }

    let ne = (n_a as f64) * (n_b as f64) / (n_a + n_b) as f64;
    let sqrt_ne = ne.sqrt();
    let lambda = (sqrt_ne + 0.12 + 0.11 / sqrt_ne) * d_obs;
    Ok(KsResult {
        statistic: d_obs,
        p_value: kolmogorov_q(lambda),
        exact: false,
    })
}

/// Result of a Wilcoxon signed-rank test on paired differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences (W+).
    pub statistic: f64,
    pub p_value: f64,
    /// Non-zero differences actually used.
    pub n_used: usize,
    pub exact: bool,
}

/// Average-tie ranks of the absolute differences.
fn tied_ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].partial_cmp(&abs[j]).unwrap());
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Complementary error function (Chebyshev fit, ~1e-7 absolute accuracy),
/// only used by the normal-approximation branch.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

const WILCOXON_EXACT_LIMIT: usize = 12;

/// Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped and tied absolute values get averaged ranks.
/// The two-sided p-value is exact (enumeration of all 2^n sign patterns over
/// the observed ranks) for n <= 12 and a tie-corrected normal approximation
/// with continuity correction above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("Wilcoxon on non-finite differences"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = tied_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    if n <= WILCOXON_EXACT_LIMIT {
        let total = 1u64 << n;
        let mut le = 0u64;
        let mut ge = 0u64;
        for mask in 0..total {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    w += r;
                }
            }
            if w <= w_plus + 1e-9 {
                le += 1;
            }
            if w >= w_plus - 1e-9 {
                ge += 1;
            }
        }
        let tail = (le.min(ge) as f64) / total as f64;
        return Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: (2.0 * tail).min(1.0),
            n_used: n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::DegenerateSample);
    }
    let delta = w_plus - mean;
    let cc = 0.5 * delta.signum();
    let z = if delta == 0.0 {
        0.0
    } else {
        (delta - cc) / var.sqrt()
    };
    Ok(WilcoxonResult {
        statistic: w_plus,
        p_value: (2.0 * normal_sf(z.abs())).min(1.0),
        n_used: n,
        exact: false,
    })
}

/// Median and interquartile range with linear-interpolation quantiles
/// (the quantile at p sits at fractional index (n - 1) p).
pub fn median_iqr(sample: &[f64]) -> Result<(f64, f64)> {
    if sample.is_empty() {
        return Err(Error::validation("median of empty sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("median of non-finite values"));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Ok((quantile(0.5), quantile(0.75) - quantile(0.25)))
}
