//! Tensor-to-tensor training pairs: subject splits, dataset assembly, and
//! the rotation/crop augmentation.
//!
//! A pair couples a noisy reduced-repetition tensor fit with the subject's
//! all-repetition reference fit. Multi-scheme training assembles one pair per
//! (subject, scheme); validation and test always use the First scheme.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::SchemeVariant;
use crate::rng::{stream, tag};
use crate::tensor::TensorField;

/// Tensor fits available for one subject.
#[derive(Debug, Clone)]
pub struct SubjectTensors {
    pub id: String,
    /// All-repetition reference fit.
    pub reference: TensorField,
    /// Reduced fits keyed by sampling scheme.
    pub noisy: BTreeMap<SchemeVariant, TensorField>,
}

/// One training pair; the mask is the intersection of both fit masks.
#[derive(Debug, Clone)]
pub struct TensorPair {
    pub subject: String,
    pub scheme: SchemeVariant,
    pub noisy: TensorField,
    pub reference: TensorField,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_schemes: Vec<SchemeVariant>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct T2tDataset {
    pub train: Vec<TensorPair>,
    pub val: Vec<TensorPair>,
    pub test: Vec<TensorPair>,
    pub manifest: DatasetManifest,
}

/// Seeded subject-level split by ratios (e.g. 0.8/0.1/0.1).
///
/// Counts are rounded so every subject lands in exactly one part and both
/// holdout parts are non-empty whenever n >= 3.
pub fn split_subjects(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::validation(
            "split ratios must be positive and sum to 1",
        ));
    }
    if n == 0 {
        return Err(Error::validation("no subjects to split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &[tag("split")]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut n_val = (n as f64 * b).round() as usize;
    let mut n_test = (n as f64 * c).round() as usize;
    if n >= 3 {
        if b > 0.0 {
            n_val = n_val.max(1);
        }
        if c > 0.0 {
            n_test = n_test.max(1);
        }
    }
    while n_val + n_test >= n {
        if n_val > 1 {
            n_val -= 1;
        } else if n_test > 1 {
            n_test -= 1;
        } else {
            break;
        }
    }
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

fn make_pair(subject: &SubjectTensors, scheme: SchemeVariant) -> Result<TensorPair> {
    let noisy = subject.noisy.get(&scheme).ok_or_else(|| {
        Error::validation(format!(
            "subject {} lacks a {scheme} fit for pairing",
            subject.id
        ))
    })?;
    if subject.reference.masked_voxel_count() == 0 {
        return Err(Error::validation(format!(
            "subject {} has no reference tensors",
            subject.id
        )));
    }
    let mut mask = subject.reference.mask.clone();
    for ((r, c), m) in mask.indexed_iter_mut() {
        *m = *m && noisy.mask[(r, c)];
    }
    Ok(TensorPair {
        subject: subject.id.clone(),
        scheme,
        noisy: noisy.clone(),
        reference: subject.reference.clone(),
        mask,
    })
}

/// Assemble train/val/test pairs from per-subject fits.
///
/// Training uses one pair per (subject, scheme) over `train_schemes`;
/// validation and test keep the First scheme only.
pub fn assemble_t2t_dataset(
    subjects: &[SubjectTensors],
    train_schemes: &[SchemeVariant],
    split: (f64, f64, f64),
    seed: u64,
) -> Result<T2tDataset> {
    if subjects.is_empty() {
        return Err(Error::validation("no subjects"));
    }
    if train_schemes.is_empty() {
        return Err(Error::validation("no training schemes"));
    }
    let (train_idx, val_idx, test_idx) = split_subjects(subjects.len(), split, seed)?;
    let mut train = Vec::new();
    for &i in &train_idx {
        for &scheme in train_schemes {
            train.push(make_pair(&subjects[i], scheme)?);
        }
    }
    let eval_pairs = |idx: &[usize]| -> Result<Vec<TensorPair>> {
        idx.iter()
            .map(|&i| make_pair(&subjects[i], SchemeVariant::First))
            .collect()
    };
    let val = eval_pairs(&val_idx)?;
    let test = eval_pairs(&test_idx)?;
    let manifest = DatasetManifest {
        train_subjects: train_idx.iter().map(|&i| subjects[i].id.clone()).collect(),
        val_subjects: val_idx.iter().map(|&i| subjects[i].id.clone()).collect(),
        test_subjects: test_idx.iter().map(|&i| subjects[i].id.clone()).collect(),
        train_schemes: train_schemes.to_vec(),
        train_pairs: train.len(),
        val_pairs: val.len(),
        test_pairs: test.len(),
    };
    Ok(T2tDataset {
        train,
        val,
        test,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation drawn uniformly from [-max, +max] degrees.
    pub max_rotation_deg: f64,
    /// Output crop side; `None` keeps the input size (centered crop).
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 180.0,
            crop: None,
        }
    }
}

/// Rotate a multi-channel image about its centre (bilinear, zero fill).
/// Angles whose sine/cosine are within 1e-12 of 0/±1 are snapped so
/// axis-aligned rotations are exact.
pub fn rotate_channels(img: &Array3<f64>, angle_deg: f64) -> Array3<f64> {
    let (ch, rows, cols) = img.dim();
    let rad = angle_deg.to_radians();
    let snap = |v: f64| {
        for target in [-1.0, 0.0, 1.0] {
            if (v - target).abs() < 1e-12 {
                return target;
            }
        }
        v
    };
    let (s, c) = (snap(rad.sin()), snap(rad.cos()));
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((ch, rows, cols));
    for r in 0..rows {
        for q in 0..cols {
            // Inverse mapping: source position that lands on (r, q).
            let dy = r as f64 - cy;
            let dx = q as f64 - cx;
            let sy = c * dy + s * dx + cy;
            let sx = -s * dy + c * dx + cx;
            if sy < 0.0 || sx < 0.0 || sy > (rows - 1) as f64 || sx > (cols - 1) as f64 {
                continue;
            }
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(rows - 1);
            let x1 = (x0 + 1).min(cols - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for k in 0..ch {
                let v00 = img[(k, y0, x0)];
                let v01 = img[(k, y0, x1)];
                let v10 = img[(k, y1, x0)];
                let v11 = img[(k, y1, x1)];
                out[(k, r, q)] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

fn rotate_mask(mask: &Array2<bool>, angle_deg: f64) -> Array2<bool> {
    let (rows, cols) = mask.dim();
    let mut as_float = Array3::zeros((1, rows, cols));
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            as_float[(0, r, c)] = 1.0;
        }
    }
    let rotated = rotate_channels(&as_float, angle_deg);
    let mut out = Array2::from_elem((rows, cols), false);
    for ((r, c), m) in out.indexed_iter_mut() {
        *m = rotated[(0, r, c)] > 0.5;
    }
    out
}

fn crop_channels(img: &Array3<f64>, top: usize, left: usize, side: usize) -> Array3<f64> {
    img.slice(ndarray::s![.., top..top + side, left..left + side])
        .to_owned()
}

/// Apply the identical seeded rotation + crop to input, target, and mask.
pub fn augment(pair: &TensorPair, cfg: &AugmentConfig, seed: u64) -> Result<TensorPair> {
    let (rows, cols) = pair.mask.dim();
    let side = cfg.crop.unwrap_or(rows.min(cols));
    if side > rows || side > cols {
        return Err(Error::validation(format!(
            "crop {side} exceeds image bounds {rows}x{cols}"
        )));
    }
    let mut rng = stream(seed, &[tag("augment")]);
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let (top, left) = if side < rows.min(cols) {
        (
            rng.random_range(0..=rows - side),
            rng.random_range(0..=cols - side),
        )
    } else {
        ((rows - side) / 2, (cols - side) / 2)
    };

    let transform = |field: &TensorField, mask: &Array2<bool>| -> Result<TensorField> {
        let rotated = if angle == 0.0 {
            field.components.clone()
        } else {
            rotate_channels(&field.components, angle)
        };
        let cropped = crop_channels(&rotated, top, left, side);
        let cropped_mask = {
            let m = if angle == 0.0 {
                mask.clone()
            } else {
                rotate_mask(mask, angle)
            };
            m.slice(ndarray::s![top..top + side, left..left + side])
                .to_owned()
        };
        TensorField::new(cropped, cropped_mask)
    };

    let new_mask = {
        let m = if angle == 0.0 {
            pair.mask.clone()
        } else {
            rotate_mask(&pair.mask, angle)
        };
        m.slice(ndarray::s![top..top + side, left..left + side])
            .to_owned()
    };
    Ok(TensorPair {
        subject: pair.subject.clone(),
        scheme: pair.scheme,
        noisy: transform(&pair.noisy, &pair.noisy.mask)?,
        reference: transform(&pair.reference, &pair.reference.mask)?,
        mask: new_mask,
    })
}

/// Bootstrap resample of train-subject ids (with replacement), for bagging.
pub fn bootstrap_subject_ids(ids: &[String], seed: u64) -> Vec<String> {
    let mut rng = stream(seed, &[tag("bootstrap")]);
    (0..ids.len())
        .map(|_| ids[rng.random_range(0..ids.len())].clone())
        .collect()
}
