//! Cross-module pipeline tests: conservativeness of the Banach bounds
//! against the Monte-Carlo oracle, oracle seed-stream contracts, size
//! control of the calibrated global test, and end-to-end operator flows.

use nalgebra::DVector;
use permbound::bounds::{
    build_sync_matrix, commutative_tail_bound, noncommutative_tail_bound, BanachSample,
    BoundConfig, Observation,
};
use permbound::designs::{global_test, pairwise_tests, Correction, TestSettings};
use permbound::ingest::{curves_to_operators, simulate_gaussian_curves, LabeledSample};
use permbound::linalg::{GridCurve, NormSpec, SymOperator, Q};
use permbound::mc_oracle::{derive_seed, mc_pvalue, mc_sync_pvalue, sample_sign_vector, substream};
use permbound::scenarios::smooth_kernel;
use rand::Rng;

// Conservativeness of the commutative bound at c = 64: over simulated
// Gaussian curve samples, the raw bound must sit above the MC permutation
// p-value minus three standard errors in at least 99% of replicates.
#[test]
fn commutative_bound_dominates_mc_oracle() {
    let grid = GridCurve::uniform_unit_grid(30);
    let cov = smooth_kernel(&grid, 1.0);
    let mean = GridCurve::new(grid.clone(), vec![0.0; 30]).unwrap();
    let cfg = BoundConfig::default();
    let mut violations = 0;
    let reps = 100;
    for rep in 0..reps {
        let curves = simulate_gaussian_curves(&mean, &cov, 60, derive_seed(50, rep)).unwrap();
        let items: Vec<Observation> = curves.into_iter().map(Observation::Curve).collect();
        for &q in &[Q::Finite(1.0), Q::Finite(2.0)] {
            let sample =
                BanachSample::new(&items[..30], &items[30..], NormSpec::function(q)).unwrap();
            let stat = sample.as_test_statistic().unwrap();
            let bound = commutative_tail_bound(&stat, &cfg).unwrap();
            let est = mc_pvalue(
                |rng| {
                    let sv = sample_sign_vector(60, rng)?;
                    sample.statistic_with_signs(&sv)
                },
                stat.value,
                2_000,
                derive_seed(51, rep),
            )
            .unwrap();
            if bound < est.p_hat - 3.0 * est.std_err {
                violations += 1;
            }
        }
    }
    assert!(
        violations <= 2,
        "commutative bound fell below MC - 3se in {violations}/200 checks"
    );
}

// The same dominance for the operator bound, with covariance operators
// produced by grouping curves (the production ingestion path).
#[test]
fn noncommutative_bound_dominates_mc_oracle() {
    let grid = GridCurve::uniform_unit_grid(20);
    let cov = smooth_kernel(&grid, 1.0);
    let mean = GridCurve::new(grid.clone(), vec![0.0; 20]).unwrap();
    let cfg = BoundConfig::default();
    let mut violations = 0;
    let reps = 50;
    for rep in 0..reps {
        let curves = simulate_gaussian_curves(&mean, &cov, 200, derive_seed(60, rep)).unwrap();
        let sample = LabeledSample::new(
            curves.into_iter().map(Observation::Curve).collect(),
            vec!["x".to_string(); 200],
        )
        .unwrap();
        let ops = curves_to_operators(&sample, 10, derive_seed(61, rep)).unwrap();
        for &q in &[Q::Finite(1.0), Q::Inf] {
            let s = BanachSample::new(&ops.items[..10], &ops.items[10..], NormSpec::schatten(q))
                .unwrap();
            let stat = s.as_test_statistic().unwrap();
            let bound = noncommutative_tail_bound(&stat, &cfg).unwrap();
            let est = mc_pvalue(
                |rng| {
                    let sv = sample_sign_vector(20, rng)?;
                    s.statistic_with_signs(&sv)
                },
                stat.value,
                1_000,
                derive_seed(62, rep),
            )
            .unwrap();
            if bound < est.p_hat - 3.0 * est.std_err {
                violations += 1;
            }
        }
    }
    assert!(
        violations <= 1,
        "operator bound fell below MC - 3se in {violations}/100 checks"
    );
}

// The synchronized Monte-Carlo and the generic Monte-Carlo walk the same
// seed-indexed substreams: on a k = 2 matrix their exceedance counts match
// exactly when handed the same statistic.
#[test]
fn sync_mc_shares_seed_streams_with_generic_mc() {
    let mut rng = substream(70, 0);
    let samples: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x = build_sync_matrix(&samples).unwrap();
    let observed = {
        let col: Vec<f64> = x.column(0).iter().copied().collect();
        let m = samples[0].len();
        (col[..m].iter().sum::<f64>() - col[m..].iter().sum::<f64>()).abs()
    };
    let sync = mc_sync_pvalue(&x, 5_000, 99).unwrap();
    let col: Vec<f64> = x.column(0).iter().copied().collect();
    let generic = mc_pvalue(
        |rng| {
            let sv = sample_sign_vector(col.len(), rng)?;
            Ok(sv
                .signs()
                .iter()
                .zip(&col)
                .map(|(e, v)| e * v)
                .sum::<f64>()
                .abs())
        },
        observed,
        5_000,
        99,
    )
    .unwrap();
    assert_eq!(sync.exceed_count, generic.exceed_count);
    assert_eq!(sync.p_hat, generic.p_hat);
}

// Familywise size of the calibrated synchronized global test: under the
// full null with k = 4, the rejection rate at level 0.05 stays within
// [0.02, 0.08] over 500 calibrated replicates. Tail quantiles of the fitted
// transform need a decent calibration sample; with the default r = 10 the
// fit noise alone inflates the 5% rate to ~0.12.
#[test]
fn global_test_size_under_full_null() {
    let reps = 500;
    let mut rejections = 0;
    for rep in 0..reps {
        let mut rng = substream(80, rep);
        let groups: Vec<(String, Vec<Observation>)> = (0..4)
            .map(|g| {
                (
                    format!("g{g}"),
                    (0..12)
                        .map(|_| {
                            Observation::Scalar(rand_distr::Distribution::sample(
                                &rand_distr::StandardNormal,
                                &mut rng,
                            ))
                        })
                        .collect(),
                )
            })
            .collect();
        let settings = TestSettings {
            r: 200,
            ..TestSettings::new(NormSpec::sequence(Q::Finite(2.0)), derive_seed(81, rep))
        };
        let report = global_test(&groups, &settings).unwrap();
        if report.p_adjusted < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!(
        (0.02..=0.08).contains(&rate),
        "null rejection rate {rate} outside [0.02, 0.08]"
    );
}

// k = 2 reduction: the calibrated global p-value is consistent with the
// single pairwise test (the analytically adjusted univariate path) within
// calibration noise, in the regime the calibration draws actually cover.
#[test]
fn global_k2_consistent_with_pairwise() {
    let mut total = 0.0;
    let reps = 30;
    for rep in 0..reps {
        let mut rng = substream(90, rep);
        let groups: Vec<(String, Vec<Observation>)> = (0..2)
            .map(|g| {
                (
                    format!("g{g}"),
                    (0..15)
                        .map(|_| Observation::Scalar(rng.random_range(-1.0..1.0) + g as f64 * 0.5))
                        .collect(),
                )
            })
            .collect();
        let settings = TestSettings {
            r: 200,
            ..TestSettings::new(NormSpec::sequence(Q::Finite(2.0)), derive_seed(91, rep))
        };
        let pairwise = pairwise_tests(&groups, &settings, Correction::None).unwrap();
        let global = global_test(&groups, &settings).unwrap();
        total +=
            (pairwise[0].p_adjusted.max(1e-12).log2() - global.p_adjusted.max(1e-12).log2()).abs();
    }
    let mean_gap = total / reps as f64;
    assert!(
        mean_gap <= 1.0,
        "k = 2 global vs pairwise mean |log2 gap| = {mean_gap:.2}"
    );
}

// End-to-end operator flow: curves grouped into covariance operators, a
// planted second-order difference detected by the operator test but not
// fabricated under the null.
#[test]
fn grouped_operator_test_detects_planted_covariance_shift() {
    let d = 16;
    let grid = GridCurve::uniform_unit_grid(d);
    let mean = GridCurve::new(grid.clone(), vec![0.0; d]).unwrap();
    let base = smooth_kernel(&grid, 1.0);
    let inflated = SymOperator::new(base.matrix() * 3.0).unwrap();
    let mut null_ps = Vec::new();
    let mut alt_ps = Vec::new();
    for rep in 0..20 {
        let make = |cov: &SymOperator, salt: u64| -> Vec<Observation> {
            let curves =
                simulate_gaussian_curves(&mean, cov, 100, derive_seed(100 + rep, salt)).unwrap();
            let sample = LabeledSample::new(
                curves.into_iter().map(Observation::Curve).collect(),
                vec!["x".to_string(); 100],
            )
            .unwrap();
            curves_to_operators(&sample, 10, derive_seed(200 + rep, salt))
                .unwrap()
                .items
        };
        let g1 = make(&base, 0);
        let g2_null = make(&base, 1);
        let g2_alt = make(&inflated, 2);
        let settings = TestSettings {
            r: 20,
            ..TestSettings::new(NormSpec::schatten(Q::Finite(1.0)), derive_seed(300, rep))
        };
        null_ps.push(
            permbound::designs::two_sample(&g1, &g2_null, &settings)
                .unwrap()
                .p_adjusted,
        );
        alt_ps.push(
            permbound::designs::two_sample(&g1, &g2_alt, &settings)
                .unwrap()
                .p_adjusted,
        );
    }
    let null_mean = null_ps.iter().sum::<f64>() / null_ps.len() as f64;
    let alt_small = alt_ps.iter().filter(|p| **p < 0.05).count();
    assert!(null_mean > 0.2, "null mean adjusted p = {null_mean}");
    assert!(
        alt_small >= 18,
        "planted covariance shift detected in only {alt_small}/20 replicates"
    );
}

// Pooled-mean centring in the statistic layer: a common location shift of
// every item changes neither the statistic nor its scale.
#[test]
fn banach_statistic_invariant_to_common_shift() {
    let mut rng = substream(110, 0);
    let base: Vec<DVector<f64>> = (0..12)
        .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let shifted: Vec<DVector<f64>> = base.iter().map(|v| v.add_scalar(17.5)).collect();
    let to_obs = |vs: &[DVector<f64>]| -> Vec<Observation> {
        vs.iter().cloned().map(Observation::Vector).collect()
    };
    let spec = NormSpec::sequence(Q::Finite(2.0));
    let a = BanachSample::new(&to_obs(&base)[..6], &to_obs(&base)[6..], spec).unwrap();
    let b = BanachSample::new(&to_obs(&shifted)[..6], &to_obs(&shifted)[6..], spec).unwrap();
    let sa = a.as_test_statistic().unwrap();
    let sb = b.as_test_statistic().unwrap();
    assert!((sa.value - sb.value).abs() <= 1e-9 * sa.value.abs().max(1.0));
    assert!((sa.scale - sb.scale).abs() <= 1e-9 * sa.scale.abs().max(1.0));
}
