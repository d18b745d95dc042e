use std::collections::BTreeMap;

use dpm::cohort::{
    drop_sparse_subjects, read_cohort_csv, reject_out_of_range, remove_reverting_diagnoses, write_cohort_csv, Cohort,
    Diagnosis, Panel, ParseOptions,
};
use dpm::curves::{CurveParams, LogisticKind};
use dpm::metrics::{kendall_tau, multiclass_auc, wilcoxon_signed_rank};
use dpm::resampling::{bootstrap_sample, strata};
use dpm::robust_loss::LossKind;
use dpm::synth::{generate, SynthSpec};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = LogisticKind> {
    prop::sample::select(LogisticKind::ALL.to_vec())
}

fn loss() -> impl Strategy<Value = LossKind> {
    prop::sample::select(LossKind::ALL.to_vec())
}

fn small_cohort(seed: u64, n: usize) -> Cohort {
    generate(&SynthSpec {
        seed,
        n_subjects: n,
        missing_rate: 0.2,
        ..SynthSpec::default()
    })
    .unwrap()
    .0
}

/// Reassigns every visit a random label so that some subjects revert.
fn scramble_labels(mut c: Cohort, seed: u64) -> Cohort {
    let labels = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD, Diagnosis::Missing];
    for r in &mut c.records {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for b in r.subject_id.bytes().chain(r.visit_index.to_le_bytes()) {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        r.diagnosis = labels[(h >> 33) as usize % labels.len()];
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curves_stay_between_asymptotes(k in kind(), a in -10.0..10.0f64, d in -10.0..10.0f64,
                                      b in 0.05..5.0f64, c in -5.0..5.0f64, gamma in 0.1..5.0f64,
                                      s in -50.0..50.0f64) {
        let p = CurveParams::new(k, a, d, b, c, gamma);
        let v = p.value(s);
        prop_assert!(v >= a.min(d) - 1e-12 && v <= a.max(d) + 1e-12);
        let g = p.unit_value(s);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn unit_curve_is_monotone(k in kind(), b in 0.05..5.0f64, c in -5.0..5.0f64, gamma in 0.1..5.0f64,
                              s in -20.0..20.0f64, step in 1e-3..5.0f64) {
        let p = CurveParams::new(k, 1.0, 0.0, b, c, gamma);
        prop_assert!(p.unit_value(s + step) >= p.unit_value(s));
    }

    #[test]
    fn quantile_inverts_unit_curve(k in kind(), b in 0.1..5.0f64, c in -5.0..5.0f64, gamma in 0.2..5.0f64,
                                   q in 0.01..0.99f64) {
        let p = CurveParams::new(k, 1.0, 0.0, b, c, gamma);
        prop_assert!((p.unit_value(p.unit_quantile(q)) - q).abs() < 1e-8);
    }

    #[test]
    fn losses_are_even_with_odd_influence(l in loss(), r in -1e3..1e3f64) {
        prop_assert_eq!(l.rho(0.0).unwrap(), 0.0);
        prop_assert!(l.rho(r).unwrap() >= 0.0);
        prop_assert!((l.rho(r).unwrap() - l.rho(-r).unwrap()).abs() <= 1e-12 * l.rho(r).unwrap().max(1.0));
        prop_assert!((l.psi(r).unwrap() + l.psi(-r).unwrap()).abs() <= 1e-12 * l.psi(r).unwrap().abs().max(1.0));
        prop_assert!(l.weight(r).unwrap() >= 0.0);
        prop_assert!(l.rho(f64::NAN).is_err());
    }

    #[test]
    fn auc_ignores_monotone_rescaling(
        rows in prop::collection::vec((prop::collection::vec(0u8..10, 3), prop::option::of(0usize..3)), 2..40),
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|(p, _)| p.iter().map(|&x| x as f64).collect()).collect();
        let truth: Vec<Option<usize>> = rows.iter().map(|(_, t)| *t).collect();
        let classes: std::collections::BTreeSet<_> = truth.iter().flatten().collect();
        prop_assume!(classes.len() >= 2);
        let warped: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|x| (0.7 * x).exp() - 3.0).collect()).collect();
        let a = multiclass_auc(&probs, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, multiclass_auc(&warped, &truth).unwrap());
    }

    #[test]
    fn kendall_tau_is_bounded_and_symmetric(pairs in prop::collection::vec((0i32..20, 0i32..20), 3..30)) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        if let (Ok(t), Ok(u)) = (kendall_tau(&x, &y), kendall_tau(&y, &x)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
            prop_assert!((t - u).abs() < 1e-12);
        }
    }

    #[test]
    fn wilcoxon_is_symmetric_in_its_samples(pairs in prop::collection::vec((-50i32..50, -50i32..50), 2..40)) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        if let Ok(a) = wilcoxon_signed_rank(&x, &y) {
            let b = wilcoxon_signed_rank(&y, &x).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.p_value));
            prop_assert_eq!(a.p_value, b.p_value);
            prop_assert_eq!(a.statistic, b.statistic);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn filters_are_idempotent(seed in 0u64..1000, n in 5usize..30) {
        let c = scramble_labels(small_cohort(seed, n), seed);
        let (once, _) = reject_out_of_range(&c);
        let (twice, report) = reject_out_of_range(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(report.total(), 0);

        let once = remove_reverting_diagnoses(&c);
        prop_assert_eq!(&remove_reverting_diagnoses(&once), &once);

        let once = drop_sparse_subjects(&c);
        prop_assert_eq!(&drop_sparse_subjects(&once), &once);
    }

    #[test]
    fn bootstrap_preserves_stratum_sizes(seed in 0u64..1000, index in 0usize..50) {
        let panel = Panel::from_cohort(&small_cohort(seed, 40));
        let sample = bootstrap_sample(&panel, seed, index);
        prop_assert_eq!(&sample, &bootstrap_sample(&panel, seed, index));
        for ids in strata(&panel).values() {
            let drawn: usize = ids.iter().map(|id| sample.in_bag.get(id).copied().unwrap_or(0)).sum();
            prop_assert_eq!(drawn, ids.len());
        }
        let everyone = sample.in_bag.len() + sample.out_of_bag.len();
        prop_assert_eq!(everyone, panel.subjects.len());
    }

    #[test]
    fn cohort_csv_round_trips(seed in 0u64..1000) {
        let c = small_cohort(seed, 8);
        let mut buf = Vec::new();
        write_cohort_csv(&c, &mut buf).unwrap();
        let back = read_cohort_csv(buf.as_slice(), &c.specs, ParseOptions::default()).unwrap();
        let key = |c: &Cohort| {
            let mut m: BTreeMap<(String, u32, String), (u64, Option<u64>, Diagnosis)> = BTreeMap::new();
            for r in &c.records {
                m.insert(
                    (r.subject_id.clone(), r.visit_index, r.biomarker.clone()),
                    (r.age.to_bits(), r.value.map(f64::to_bits), r.diagnosis),
                );
            }
            m
        };
        prop_assert_eq!(key(&c), key(&back));
    }
}
