//! Study-driver integration tests on small cohorts.

use dtcmr_core::fitting::SchemeVariant;
use dtcmr_core::phantom::{NoiseProfile, PhantomConfig};
use dtcmr_core::protocol::AcquisitionProtocol;
use dtcmr_core::study::{
    generate_cohort, load_cohort, per_subject_key, run_denoise_study, run_repetitions_study,
    CohortSpec, DenoiseStudyConfig, RepetitionsStudyConfig,
};

fn small_spec(n: usize, seed: u64, noise: NoiseProfile) -> CohortSpec {
    CohortSpec {
        n_subjects: n,
        seed,
        phantom: PhantomConfig {
            image_size: (64, 64),
            lv_center: (31.5, 31.5),
            endo_radius: 11.0,
            epi_radius: 22.0,
            ..PhantomConfig::default()
        },
        protocol: AcquisitionProtocol {
            image_size: (64, 64),
            ..AcquisitionProtocol::default()
        },
        noise,
        geometry_jitter: 0.08,
    }
}

/// A noiseless cohort reproduces the reference exactly, so every error is 0
/// and no scheme pair is significantly different.
#[test]
fn noiseless_cohort_has_zero_errors_and_no_significance() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let spec = small_spec(4, 5, NoiseProfile::noiseless(0));
    generate_cohort(&spec, &cohort).unwrap();
    let config = RepetitionsStudyConfig {
        budgets: vec!["1BH".into(), "5BH".into()],
        schemes: vec![
            SchemeVariant::First,
            SchemeVariant::Last,
            SchemeVariant::Random,
        ],
        scheme_seed: 7,
        upsample: 100,
    };
    let summary = run_repetitions_study(&cohort, &config, &dir.path().join("t1.csv")).unwrap();
    for row in &summary.rows {
        assert!(
            row.median.abs() < 1e-6,
            "{}/{}/{}: median {} should be 0 on a noiseless cohort",
            row.budget,
            row.scheme,
            row.map,
            row.median
        );
    }
    for cell in &summary.significance {
        assert!(
            !cell.significant,
            "noiseless cohort flagged {}/{} {} vs {} as significant",
            cell.budget, cell.map, cell.scheme_a, cell.scheme_b
        );
    }
}

/// The least-squares ladder row is the same computation as the repetitions
/// study's First entry: identical errors for the shared test subjects.
#[test]
fn least_squares_row_matches_repetitions_first() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let spec = small_spec(
        6,
        9,
        NoiseProfile {
            snr: 15.0,
            first_rep_degradation: 1.0,
            motion_shift_sigma: 0.3,
            seed: 0,
        },
    );
    generate_cohort(&spec, &cohort).unwrap();

    let rep_config = RepetitionsStudyConfig {
        budgets: vec!["1BH".into()],
        schemes: vec![SchemeVariant::First],
        scheme_seed: 31,
        upsample: 100,
    };
    let rep = run_repetitions_study(&cohort, &rep_config, &dir.path().join("t1.csv")).unwrap();

    let den_config = DenoiseStudyConfig {
        ladder: vec![], // baseline row only
        budget: "1BH".into(),
        scheme_seed: 31,
        upsample: 100,
        ..DenoiseStudyConfig::default()
    };
    let den = run_denoise_study(&cohort, &den_config, &dir.path().join("t2.csv")).unwrap();

    let manifest = load_cohort(&cohort).unwrap();
    let rep_errors = &rep.per_subject[&per_subject_key("1BH", SchemeVariant::First)];
    let ls = den.rows.iter().find(|r| r.row == "LS").unwrap();
    for (test_idx, subject_id) in den.test_subjects.iter().enumerate() {
        let cohort_idx = manifest
            .subjects
            .iter()
            .position(|s| &s.id == subject_id)
            .unwrap();
        let a = rep_errors[cohort_idx];
        let b = ls.per_subject[test_idx];
        assert_eq!(a.ha, b.ha, "HA MAAE differs for {subject_id}");
        assert_eq!(a.e2a, b.e2a);
        assert_eq!(a.md, b.md);
        assert_eq!(a.fa, b.fa);
    }
}
