//! Study drivers: phantom cohort generation, the repetition-sampling
//! comparison (budgets x schemes vs the all-repetition reference), and the
//! de-noising ladder.
//!
//! Both studies run the same per-subject pipeline: register the stack to its
//! first b0 frame, fit the all-repetition reference, fit each reduced
//! selection, compute maps in the subject's local basis, and compare on the
//! intersected LV masks. Outputs are CSV (RFC 4180, CRLF) plus a JSON
//! summary; with fixed seeds a rerun reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::denoise::{
    assemble_t2t_dataset, ensemble_predict, train_ensemble, train_with_stats, DenoiserModel,
    NormMode, SubjectTensors, T2tDataset, TrainConfig, TrainingObjective,
};
use crate::error::{Error, Result};
use crate::fitting::{
    average_repetitions, lls_fit, select_repetitions, BreathHoldBudget, SamplingScheme,
    SchemeVariant,
};
use crate::maps::{compute_maps, local_basis, mask_centroid, MapReport, MapSet};
use crate::metrics::{
    ks_two_sample, maae, mae, median_iqr, wilcoxon_signed_rank, FA_REPORT_SCALE, MD_REPORT_SCALE,
    SIGNIFICANCE_LEVEL,
};
use crate::phantom::{generate_phantom, simulate_dwi, NoiseProfile, PhantomConfig};
use crate::protocol::AcquisitionProtocol;
use crate::registration::{register_stack, ReferencePolicy, DEFAULT_UPSAMPLE};
use crate::rng::{derive_seed, stream, tag};
use crate::stack::DwiStack;
use crate::tensor::TensorField;

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

/// Recipe for a cohort of synthetic subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub protocol: AcquisitionProtocol,
    pub noise: NoiseProfile,
    /// Fractional per-subject jitter of radii, centre, and SNR.
    pub geometry_jitter: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects: 50,
            seed: 7,
            phantom: PhantomConfig::default(),
            protocol: AcquisitionProtocol::default(),
            noise: NoiseProfile::default(),
            geometry_jitter: 0.08,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub dir: String,
    pub phantom: PhantomConfig,
    pub noise: NoiseProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: CohortSpec,
    pub subjects: Vec<SubjectEntry>,
}

/// Subject-specific phantom and noise drawn from the cohort spec.
pub fn subject_variation(spec: &CohortSpec, index: usize) -> (PhantomConfig, NoiseProfile) {
    let mut rng = stream(spec.seed, &[tag("subject"), index as u64]);
    let j = spec.geometry_jitter;
    let mut phantom = spec.phantom.clone();
    let wall = phantom.epi_radius - phantom.endo_radius;
    phantom.endo_radius *= 1.0 + j * rng.random_range(-1.0..1.0);
    phantom.epi_radius = phantom.endo_radius + wall * (1.0 + j * rng.random_range(-1.0..1.0));
    let (rows, cols) = phantom.image_size;
    let max_center_jitter = 2.0_f64.min(j * 25.0);
    phantom.lv_center.0 += max_center_jitter * rng.random_range(-1.0..1.0);
    phantom.lv_center.1 += max_center_jitter * rng.random_range(-1.0..1.0);
    // Keep the annulus inside the frame.
    let margin = [
        phantom.lv_center.0,
        rows as f64 - 1.0 - phantom.lv_center.0,
        phantom.lv_center.1,
        cols as f64 - 1.0 - phantom.lv_center.1,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    if phantom.epi_radius >= margin {
        phantom.epi_radius = margin - 1.0;
        if phantom.endo_radius >= phantom.epi_radius {
            phantom.endo_radius = phantom.epi_radius * 0.5;
        }
    }
    let mut noise = spec.noise.clone();
    if noise.snr.is_finite() {
        noise.snr *= 1.0 + j * rng.random_range(-1.0..1.0);
    }
    noise.seed = derive_seed(spec.seed, &[tag("noise"), index as u64]);
    (phantom, noise)
}

/// Simulate one subject in memory.
pub fn simulate_subject(spec: &CohortSpec, index: usize) -> Result<(DwiStack, TensorField)> {
    let (phantom_cfg, noise) = subject_variation(spec, index);
    let phantom = generate_phantom(&phantom_cfg)?;
    let stack = simulate_dwi(&phantom, &spec.protocol, &noise)?;
    Ok((stack, phantom.truth))
}

/// Generate `spec.n_subjects` subject directories under `out_dir`.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<CohortManifest> {
    if spec.n_subjects == 0 {
        return Err(Error::validation("cohort needs at least one subject"));
    }
    spec.protocol.validate()?;
    spec.phantom.validate()?;
    spec.noise.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let indices: Vec<usize> = (0..spec.n_subjects).collect();
    let entries: Result<Vec<SubjectEntry>> = indices
        .par_iter()
        .map(|&i| {
            let id = format!("subj_{i:03}");
            let dir = out_dir.join(&id);
            std::fs::create_dir_all(&dir)?;
            let (phantom_cfg, noise) = subject_variation(spec, i);
            let phantom = generate_phantom(&phantom_cfg)?;
            let stack = simulate_dwi(&phantom, &spec.protocol, &noise)?;
            let provenance = json!({ "subject": id, "index": i, "seed": noise.seed });
            container::write_dwi_stack(&dir.join("dwi.dtcf"), &stack, &provenance)?;
            container::write_tensor_field(&dir.join("truth.dtcf"), &phantom.truth, &provenance)?;
            Ok(SubjectEntry {
                id: id.clone(),
                dir: id,
                phantom: phantom_cfg,
                noise,
            })
        })
        .collect();
    let manifest = CohortManifest {
        spec: spec.clone(),
        subjects: entries?,
    };
    std::fs::write(
        out_dir.join("cohort.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_cohort(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join("cohort.json");
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing cohort manifest {}",
            path.display()
        )));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn subject_stack_path(cohort_dir: &Path, entry: &SubjectEntry) -> PathBuf {
    cohort_dir.join(&entry.dir).join("dwi.dtcf")
}

// ---------------------------------------------------------------------------
// Shared evaluation pieces
// ---------------------------------------------------------------------------

/// The four per-map errors of one subject against its reference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapErrors {
    /// HA MAAE, degrees.
    pub ha: f64,
    /// E2A MAAE, degrees.
    pub e2a: f64,
    /// MD MAE, mm^2/s (unscaled).
    pub md: f64,
    /// FA MAE, dimensionless (unscaled).
    pub fa: f64,
}

pub const MAP_NAMES: [&str; 4] = ["HA", "E2A", "MD", "FA"];

impl MapErrors {
    pub fn by_map(&self, map: &str) -> f64 {
        match map {
            "HA" => self.ha,
            "E2A" => self.e2a,
            "MD" => self.md,
            "FA" => self.fa,
            other => panic!("unknown map {other}"),
        }
    }

    /// Reported value: MD scaled by 1e5, FA by 1e2.
    pub fn reported(map: &str, raw: f64) -> f64 {
        match map {
            "MD" => raw * MD_REPORT_SCALE,
            "FA" => raw * FA_REPORT_SCALE,
            _ => raw,
        }
    }

    pub fn metric_label(map: &str) -> &'static str {
        match map {
            "HA" | "E2A" => "MAAE_deg",
            "MD" => "MAE_x1e5_mm2_per_s",
            "FA" => "MAE_x1e2",
            other => panic!("unknown map {other}"),
        }
    }
}

/// Compare candidate maps against reference maps on intersected masks.
pub fn map_errors(
    reference: &(MapSet, MapReport),
    candidate: &(MapSet, MapReport),
) -> Result<MapErrors> {
    let (ref_maps, ref_report) = reference;
    let (cand_maps, cand_report) = candidate;
    let mut scalar_mask = ref_maps.mask.clone();
    for ((r, c), m) in scalar_mask.indexed_iter_mut() {
        *m = *m && cand_maps.mask[(r, c)];
    }
    let mut angle_mask = scalar_mask.clone();
    for ((r, c), m) in angle_mask.indexed_iter_mut() {
        *m = *m && !ref_report.angle_undefined[(r, c)] && !cand_report.angle_undefined[(r, c)];
    }
    Ok(MapErrors {
        ha: maae(&ref_maps.ha, &cand_maps.ha, &angle_mask)?,
        e2a: maae(&ref_maps.e2a, &cand_maps.e2a, &angle_mask)?,
        md: mae(&ref_maps.md, &cand_maps.md, &scalar_mask)?,
        fa: mae(&ref_maps.fa, &cand_maps.fa, &scalar_mask)?,
    })
}

/// Registered stack, reference fit and maps, and the basis centre, shared by
/// both studies.
pub struct PreparedSubject {
    pub id: String,
    pub stack: DwiStack,
    pub center: (f64, f64),
    pub reference_fit: TensorField,
    pub reference_maps: (MapSet, MapReport),
}

pub fn prepare_subject(id: &str, stack: &DwiStack, upsample: usize) -> Result<PreparedSubject> {
    let (registered, _report) = register_stack(stack, ReferencePolicy::FirstB0, upsample)?;
    let center = mask_centroid(&registered.mask)?;
    let basis = local_basis(&registered.mask, center)?;
    let avg = average_repetitions(&registered)?;
    let (reference_fit, _) = lls_fit(&avg)?;
    let reference_maps = compute_maps(&reference_fit, &basis)?;
    Ok(PreparedSubject {
        id: id.to_string(),
        stack: registered,
        center,
        reference_fit,
        reference_maps,
    })
}

/// Reduced fit for one (budget, scheme) of a prepared subject.
pub fn reduced_fit(
    subject: &PreparedSubject,
    budget: &BreathHoldBudget,
    scheme: &SamplingScheme,
) -> Result<TensorField> {
    let (selected, _) = select_repetitions(&subject.stack, scheme, budget)?;
    let avg = average_repetitions(&selected)?;
    let (fit, _) = lls_fit(&avg)?;
    Ok(fit)
}

pub fn maps_of(subject: &PreparedSubject, field: &TensorField) -> Result<(MapSet, MapReport)> {
    let basis = local_basis(&subject.stack.mask, subject.center)?;
    compute_maps(field, &basis)
}

fn fmt(v: f64) -> String {
    // Normalize -0.0 so formatted output has one spelling of zero.
    format!("{:.6}", if v == 0.0 { 0.0 } else { v })
}

/// RFC 4180 CSV: CRLF line endings, no quoting needed for our fields.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push_str("\r\n");
    for row in rows {
        text.push_str(&row.join(","));
        text.push_str("\r\n");
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Repetition study (Table 1 analogue)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepetitionsStudyConfig {
    pub budgets: Vec<String>,
    pub schemes: Vec<SchemeVariant>,
    /// Seed for the Random scheme draws (per subject).
    pub scheme_seed: u64,
    pub upsample: usize,
}

impl Default for RepetitionsStudyConfig {
    fn default() -> Self {
        RepetitionsStudyConfig {
            budgets: vec!["1BH".into(), "3BH".into(), "5BH".into()],
            schemes: SchemeVariant::ALL.to_vec(),
            scheme_seed: 11,
            upsample: DEFAULT_UPSAMPLE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub budget: String,
    pub scheme: SchemeVariant,
    pub map: String,
    pub metric: String,
    pub median: f64,
    pub iqr: f64,
    pub subjects: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceCell {
    pub budget: String,
    pub map: String,
    pub scheme_a: SchemeVariant,
    pub scheme_b: SchemeVariant,
    pub ks_d: f64,
    pub ks_p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepetitionsSummary {
    pub config: RepetitionsStudyConfig,
    pub rows: Vec<SummaryRow>,
    pub significance: Vec<SignificanceCell>,
    /// Per (budget, scheme): per-subject errors in cohort order.
    pub per_subject: BTreeMap<String, Vec<MapErrors>>,
}

pub fn per_subject_key(budget: &str, scheme: SchemeVariant) -> String {
    format!("{budget}/{scheme}")
}

/// Run the sampling-scheme comparison over a cohort directory.
pub fn run_repetitions_study(
    cohort_dir: &Path,
    config: &RepetitionsStudyConfig,
    out_csv: &Path,
) -> Result<RepetitionsSummary> {
    let manifest = load_cohort(cohort_dir)?;
    let budgets: Result<Vec<BreathHoldBudget>> = config
        .budgets
        .iter()
        .map(|b| BreathHoldBudget::parse(b))
        .collect();
    let budgets = budgets?;
    if budgets.is_empty() || config.schemes.is_empty() {
        return Err(Error::validation("need at least one budget and scheme"));
    }

    let per_subject_results: Result<Vec<BTreeMap<String, MapErrors>>> = manifest
        .subjects
        .par_iter()
        .enumerate()
        .map(|(idx, entry)| {
            let stack = container::read_dwi_stack(&subject_stack_path(cohort_dir, entry))?;
            let prepared = prepare_subject(&entry.id, &stack, config.upsample)?;
            let mut errors = BTreeMap::new();
            for budget in &budgets {
                for &variant in &config.schemes {
                    let scheme = SamplingScheme::new(
                        variant,
                        derive_seed(config.scheme_seed, &[tag("scheme"), idx as u64]),
                    );
                    let fit = reduced_fit(&prepared, budget, &scheme)?;
                    let maps = maps_of(&prepared, &fit)?;
                    let err = map_errors(&prepared.reference_maps, &maps)?;
                    errors.insert(per_subject_key(&budget.name, variant), err);
                }
            }
            Ok(errors)
        })
        .collect();
    let per_subject_results = per_subject_results?;

    let mut per_subject: BTreeMap<String, Vec<MapErrors>> = BTreeMap::new();
    for subject in &per_subject_results {
        for (key, err) in subject {
            per_subject.entry(key.clone()).or_default().push(*err);
        }
    }

    let mut rows = Vec::new();
    for budget in &budgets {
        for &scheme in &config.schemes {
            let errs = &per_subject[&per_subject_key(&budget.name, scheme)];
            for map in MAP_NAMES {
                let vals: Vec<f64> = errs
                    .iter()
                    .map(|e| MapErrors::reported(map, e.by_map(map)))
                    .collect();
                let (median, iqr) = median_iqr(&vals)?;
                rows.push(SummaryRow {
                    budget: budget.name.clone(),
                    scheme,
                    map: map.into(),
                    metric: MapErrors::metric_label(map).into(),
                    median,
                    iqr,
                    subjects: vals.len(),
                });
            }
        }
    }

    let mut significance = Vec::new();
    for budget in &budgets {
        for map in MAP_NAMES {
            for (i, &a) in config.schemes.iter().enumerate() {
                for &b in config.schemes.iter().skip(i + 1) {
                    let va: Vec<f64> = per_subject[&per_subject_key(&budget.name, a)]
                        .iter()
                        .map(|e| e.by_map(map))
                        .collect();
                    let vb: Vec<f64> = per_subject[&per_subject_key(&budget.name, b)]
                        .iter()
                        .map(|e| e.by_map(map))
                        .collect();
                    let ks = ks_two_sample(&va, &vb)?;
                    significance.push(SignificanceCell {
                        budget: budget.name.clone(),
                        map: map.into(),
                        scheme_a: a,
                        scheme_b: b,
                        ks_d: ks.statistic,
                        ks_p: ks.p_value,
                        significant: ks.p_value < SIGNIFICANCE_LEVEL,
                    });
                }
            }
        }
    }

    let summary = RepetitionsSummary {
        config: config.clone(),
        rows,
        significance,
        per_subject,
    };
    write_repetitions_outputs(&summary, out_csv)?;
    Ok(summary)
}

fn write_repetitions_outputs(summary: &RepetitionsSummary, out_csv: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.budget.clone(),
                r.scheme.code().into(),
                r.map.clone(),
                r.metric.clone(),
                fmt(r.median),
                fmt(r.iqr),
                r.subjects.to_string(),
            ]
        })
        .collect();
    write_csv(
        out_csv,
        &[
            "budget", "scheme", "map", "metric", "median", "iqr", "subjects",
        ],
        &rows,
    )?;
    let sig_rows: Vec<Vec<String>> = summary
        .significance
        .iter()
        .map(|s| {
            vec![
                s.budget.clone(),
                s.map.clone(),
                s.scheme_a.code().into(),
                s.scheme_b.code().into(),
                fmt(s.ks_d),
                fmt(s.ks_p),
                s.significant.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_csv.with_extension("significance.csv"),
        &[
            "budget",
            "map",
            "scheme_a",
            "scheme_b",
            "ks_d",
            "ks_p",
            "significant",
        ],
        &sig_rows,
    )?;
    std::fs::write(
        out_csv.with_extension("json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// De-noising ladder study (Table 2 analogue)
// ---------------------------------------------------------------------------

/// A row of the de-noising ladder.
///
/// Every trainable row is tensor-to-tensor (image inputs are out of scope):
/// `Bl` is the plain network with fixed normalization; `+CN` switches to
/// channel z-score; `+T2T` adds residual learning; `+multiT2T` trains on the
/// First/Centre/Last selections simultaneously; `Wguf` adds the Wasserstein
/// patch critic; `WgufX5` bags five of those.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LadderRow {
    LeastSquares,
    Bl,
    BlCn,
    BlT2t,
    BlCnT2t,
    BlCnMultiT2t,
    Wguf,
    WgufX5,
}

impl LadderRow {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "LS" | "least-squares" => Ok(LadderRow::LeastSquares),
            "BL" => Ok(LadderRow::Bl),
            "BL+CN" => Ok(LadderRow::BlCn),
            "BL+T2T" => Ok(LadderRow::BlT2t),
            "BL+CN+T2T" => Ok(LadderRow::BlCnT2t),
            "BL+CN+multiT2T" => Ok(LadderRow::BlCnMultiT2t),
            "WGUF" => Ok(LadderRow::Wguf),
            "WGUFx5" => Ok(LadderRow::WgufX5),
            other => Err(Error::validation(format!("unknown ladder row '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LadderRow::LeastSquares => "LS",
            LadderRow::Bl => "BL",
            LadderRow::BlCn => "BL+CN",
            LadderRow::BlT2t => "BL+T2T",
            LadderRow::BlCnT2t => "BL+CN+T2T",
            LadderRow::BlCnMultiT2t => "BL+CN+multiT2T",
            LadderRow::Wguf => "WGUF",
            LadderRow::WgufX5 => "WGUFx5",
        }
    }

    pub fn members(&self) -> usize {
        match self {
            LadderRow::WgufX5 => 5,
            _ => 1,
        }
    }

    pub fn objective(&self) -> TrainingObjective {
        match self {
            LadderRow::Wguf | LadderRow::WgufX5 => TrainingObjective::Wasserstein,
            _ => TrainingObjective::L1Only,
        }
    }

    pub fn norm_mode(&self) -> NormMode {
        match self {
            LadderRow::Bl | LadderRow::BlT2t => NormMode::Fixed,
            _ => NormMode::ZScore,
        }
    }

    pub fn residual(&self) -> bool {
        !matches!(self, LadderRow::Bl | LadderRow::BlCn)
    }

    pub fn train_schemes(&self) -> Vec<SchemeVariant> {
        match self {
            LadderRow::BlCnMultiT2t | LadderRow::Wguf | LadderRow::WgufX5 => vec![
                SchemeVariant::First,
                SchemeVariant::Centre,
                SchemeVariant::Last,
            ],
            _ => vec![SchemeVariant::First],
        }
    }
}

impl std::fmt::Display for LadderRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseStudyConfig {
    pub ladder: Vec<LadderRow>,
    pub budget: String,
    pub train: TrainConfig,
    pub scheme_seed: u64,
    pub upsample: usize,
    pub ensemble_size: usize,
}

impl Default for DenoiseStudyConfig {
    fn default() -> Self {
        DenoiseStudyConfig {
            ladder: vec![
                LadderRow::Bl,
                LadderRow::BlCn,
                LadderRow::BlCnT2t,
                LadderRow::BlCnMultiT2t,
                LadderRow::Wguf,
                LadderRow::WgufX5,
            ],
            budget: "1BH".into(),
            train: TrainConfig::default(),
            scheme_seed: 11,
            upsample: DEFAULT_UPSAMPLE,
            ensemble_size: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderStatRow {
    pub row: String,
    pub map: String,
    pub metric: String,
    pub median: f64,
    pub iqr: f64,
    /// Wilcoxon vs the least-squares baseline (absent for the baseline).
    pub wilcoxon_w: Option<f64>,
    pub wilcoxon_p: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowManifest {
    pub row: String,
    pub config_hash: String,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub train_schemes: Vec<SchemeVariant>,
    pub members: usize,
    pub member_seeds: Vec<u64>,
    pub best_val_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub per_subject: Vec<MapErrors>,
    pub manifest: RowManifest,
    /// Per member, per test subject (ensembles only).
    pub member_per_subject: Option<Vec<Vec<MapErrors>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub config: DenoiseStudyConfig,
    pub test_subjects: Vec<String>,
    pub stats: Vec<LadderStatRow>,
    pub rows: Vec<RowResult>,
}

/// Run the de-noising ladder over a cohort directory.
pub fn run_denoise_study(
    cohort_dir: &Path,
    config: &DenoiseStudyConfig,
    out_csv: &Path,
) -> Result<DenoiseSummary> {
    config.train.validate()?;
    let manifest = load_cohort(cohort_dir)?;
    let budget = BreathHoldBudget::parse(&config.budget)?;

    // Schemes any ladder row trains on, plus First for evaluation.
    let mut needed: Vec<SchemeVariant> = vec![SchemeVariant::First];
    for row in &config.ladder {
        for s in row.train_schemes() {
            if !needed.contains(&s) {
                needed.push(s);
            }
        }
    }

    struct SubjectData {
        prepared: PreparedSubject,
        tensors: SubjectTensors,
        first_maps: (MapSet, MapReport),
    }

    let subjects: Result<Vec<SubjectData>> = manifest
        .subjects
        .par_iter()
        .enumerate()
        .map(|(idx, entry)| {
            let stack = container::read_dwi_stack(&subject_stack_path(cohort_dir, entry))?;
            let prepared = prepare_subject(&entry.id, &stack, config.upsample)?;
            let mut noisy = BTreeMap::new();
            for &variant in &needed {
                let scheme = SamplingScheme::new(
                    variant,
                    derive_seed(config.scheme_seed, &[tag("scheme"), idx as u64]),
                );
                noisy.insert(variant, reduced_fit(&prepared, &budget, &scheme)?);
            }
            let first_maps = maps_of(&prepared, &noisy[&SchemeVariant::First])?;
            let tensors = SubjectTensors {
                id: entry.id.clone(),
                reference: prepared.reference_fit.clone(),
                noisy,
            };
            Ok(SubjectData {
                prepared,
                tensors,
                first_maps,
            })
        })
        .collect();
    let subjects = subjects?;

    let all_tensors: Vec<SubjectTensors> = subjects.iter().map(|s| s.tensors.clone()).collect();

    // The subject split is fixed across every ladder row.
    let split_dataset = |schemes: &[SchemeVariant]| -> Result<T2tDataset> {
        assemble_t2t_dataset(&all_tensors, schemes, config.train.split, config.train.seed)
    };
    let probe = split_dataset(&[SchemeVariant::First])?;
    let test_ids = probe.manifest.test_subjects.clone();
    let test_indices: Vec<usize> = test_ids
        .iter()
        .map(|id| subjects.iter().position(|s| &s.tensors.id == id).unwrap())
        .collect();

    // Least-squares baseline row: the noisy First fit itself.
    let ls_errors: Result<Vec<MapErrors>> = test_indices
        .iter()
        .map(|&i| {
            map_errors(
                &subjects[i].prepared.reference_maps,
                &subjects[i].first_maps,
            )
        })
        .collect();
    let ls_errors = ls_errors?;

    let evaluate_field = |subject: &SubjectData, field: &TensorField| -> Result<MapErrors> {
        let maps = maps_of(&subject.prepared, field)?;
        map_errors(&subject.prepared.reference_maps, &maps)
    };

    let mut results: Vec<RowResult> = vec![RowResult {
        row: LadderRow::LeastSquares.label().into(),
        per_subject: ls_errors.clone(),
        manifest: RowManifest {
            row: LadderRow::LeastSquares.label().into(),
            config_hash: String::new(),
            train_pairs: 0,
            val_pairs: 0,
            test_pairs: ls_errors.len(),
            train_schemes: vec![],
            members: 0,
            member_seeds: vec![],
            best_val_losses: vec![],
        },
        member_per_subject: None,
    }];

    for row in &config.ladder {
        if *row == LadderRow::LeastSquares {
            continue; // always present as the baseline
        }
        let schemes = row.train_schemes();
        let dataset = split_dataset(&schemes)?;
        let mut row_cfg = config.train.clone();
        row_cfg.norm_mode = row.norm_mode();
        row_cfg.residual = row.residual();
        let members = if *row == LadderRow::WgufX5 {
            config.ensemble_size
        } else {
            row.members()
        };

        let (trained_members, member_seeds) = if members > 1 {
            let (trained, ens_manifest) =
                train_ensemble(&row_cfg, &dataset, row.objective(), members)?;
            (trained, ens_manifest.member_seeds)
        } else {
            let trained = train_with_stats(&row_cfg, &dataset, row.objective(), None)?;
            let seed = row_cfg.seed;
            (vec![trained], vec![seed])
        };
        let models: Vec<&DenoiserModel> = trained_members.iter().map(|t| &t.model).collect();

        let per_subject: Result<Vec<MapErrors>> = test_indices
            .iter()
            .map(|&i| {
                let noisy = &subjects[i].tensors.noisy[&SchemeVariant::First];
                let denoised = if models.len() == 1 {
                    models[0].denoise(noisy)?
                } else {
                    ensemble_predict(&models, noisy)?
                };
                evaluate_field(&subjects[i], &denoised)
            })
            .collect();
        let per_subject = per_subject?;

        let member_per_subject = if models.len() > 1 {
            let mut all = Vec::with_capacity(models.len());
            for model in &models {
                let errs: Result<Vec<MapErrors>> = test_indices
                    .iter()
                    .map(|&i| {
                        let noisy = &subjects[i].tensors.noisy[&SchemeVariant::First];
                        evaluate_field(&subjects[i], &model.denoise(noisy)?)
                    })
                    .collect();
                all.push(errs?);
            }
            Some(all)
        } else {
            None
        };

        results.push(RowResult {
            row: row.label().into(),
            per_subject,
            manifest: RowManifest {
                row: row.label().into(),
                config_hash: row_cfg.hash(),
                train_pairs: dataset.manifest.train_pairs,
                val_pairs: dataset.manifest.val_pairs,
                test_pairs: dataset.manifest.test_pairs,
                train_schemes: schemes,
                members,
                member_seeds,
                best_val_losses: trained_members
                    .iter()
                    .map(|t| t.history.best_val_loss)
                    .collect(),
            },
            member_per_subject,
        });
    }

    // Stats rows with Wilcoxon against the least-squares baseline.
    let mut stats = Vec::new();
    for result in &results {
        let is_baseline = result.row == LadderRow::LeastSquares.label();
        for map in MAP_NAMES {
            let vals: Vec<f64> = result
                .per_subject
                .iter()
                .map(|e| MapErrors::reported(map, e.by_map(map)))
                .collect();
            let (median, iqr) = median_iqr(&vals)?;
            let (mut w, mut p, mut sig) = (None, None, None);
            if !is_baseline {
                let diffs: Vec<f64> = result
                    .per_subject
                    .iter()
                    .zip(&ls_errors)
                    .map(|(row_err, ls_err)| row_err.by_map(map) - ls_err.by_map(map))
                    .collect();
                match wilcoxon_signed_rank(&diffs) {
                    Ok(res) => {
                        w = Some(res.statistic);
                        p = Some(res.p_value);
                        sig = Some(res.p_value < SIGNIFICANCE_LEVEL);
                    }
                    Err(Error::DegenerateSample) => {
                        // Identical to baseline everywhere: no test.
                    }
                    Err(e) => return Err(e),
                }
            }
            stats.push(LadderStatRow {
                row: result.row.clone(),
                map: map.into(),
                metric: MapErrors::metric_label(map).into(),
                median,
                iqr,
                wilcoxon_w: w,
                wilcoxon_p: p,
                significant: sig,
            });
        }
    }

    let summary = DenoiseSummary {
        config: config.clone(),
        test_subjects: test_ids,
        stats,
        rows: results,
    };
    write_denoise_outputs(&summary, out_csv)?;
    Ok(summary)
}

fn write_denoise_outputs(summary: &DenoiseSummary, out_csv: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = summary
        .stats
        .iter()
        .map(|s| {
            vec![
                s.row.clone(),
                s.map.clone(),
                s.metric.clone(),
                fmt(s.median),
                fmt(s.iqr),
                s.wilcoxon_w.map(fmt).unwrap_or_default(),
                s.wilcoxon_p.map(fmt).unwrap_or_default(),
                s.significant.map(|b| b.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        out_csv,
        &[
            "row",
            "map",
            "metric",
            "median",
            "iqr",
            "wilcoxon_w",
            "wilcoxon_p",
            "significant",
        ],
        &rows,
    )?;
    std::fs::write(
        out_csv.with_extension("json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}
