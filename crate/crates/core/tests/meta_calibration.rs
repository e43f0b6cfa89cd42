use metacp_core::calibration::{
    correction_objective, ecdf_eval, epsilon_adjust, lambda_correction, lambda_correction_exact, meta_cp_classify,
    meta_cp_interval, sample_conditional_meta_cp, CalibrationRecord, Correction, CorrectionMode,
};
use metacp_core::conformal::{Region, ScoreSample};
use metacp_core::models::{FeatureVector, Label, Scorer};
use metacp_core::quantile::{train_set_regressor, QuantileTrainingExample, TrainConfig};
use metacp_core::rng::stream;
use metacp_core::simulator::{LocationFamily, LocationShape};
use metacp_core::{Error, Result};
use proptest::prelude::*;
use rand::Rng;

fn record(q: f64, scores: Vec<f64>) -> CalibrationRecord {
    CalibrationRecord::new(q, ScoreSample::new(scores).unwrap()).unwrap()
}

fn uniform_records(l: usize, m: usize, q: f64, seed: u64) -> Vec<CalibrationRecord> {
    let mut rng = stream(seed, &[]);
    (0..l)
        .map(|_| record(q, (0..m).map(|_| rng.random::<f64>()).collect()))
        .collect()
}

fn uniform_cdf(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

#[test]
fn ecdf_examples() {
    let s = ScoreSample::new(vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(ecdf_eval(&s, 0.5), 0.0);
    assert_eq!(ecdf_eval(&s, 3.0), 1.0);
    assert_eq!(ecdf_eval(&s, 7.0), 1.0);
    assert!((ecdf_eval(&s, 2.0) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn uniform_construction_hits_the_cap() {
    // (l/(l+1))·min(λ, 1) ≥ 0.9 with l = 9 first holds at λ = 1
    let recs = uniform_records(9, 10_000, 0.0, 1);
    let c = lambda_correction(0.9, &recs).unwrap();
    assert!((c.lambda - 1.0).abs() <= 0.01, "{}", c.lambda);
    assert_eq!(c.mode, CorrectionMode::EmpiricalF);
    let exact = lambda_correction_exact(0.9, &[0.0; 9], &[uniform_cdf; 9], 1e-9).unwrap();
    assert!((exact.lambda - 1.0).abs() <= 1e-6);
    assert_eq!(exact.mode, CorrectionMode::ExactF);
}

#[test]
fn exact_mode_matches_closed_form_below_the_cap() {
    // all q̂ = 0: λ solves l/(l+1)·λ = β
    for (l, beta) in [(19usize, 0.5), (50, 0.8), (9, 0.3)] {
        let exact = lambda_correction_exact(beta, &vec![0.0; l], &vec![uniform_cdf; l], 1e-10).unwrap();
        let want = beta * (l + 1) as f64 / l as f64;
        assert!((exact.lambda - want).abs() < 1e-8, "l={l}: {} vs {want}", exact.lambda);
        let empirical = lambda_correction(beta, &uniform_records(l, 20_000, 0.0, l as u64)).unwrap();
        assert!((empirical.lambda - want).abs() < 0.01);
    }
}

#[test]
fn perfect_predictor_needs_only_the_finite_sample_gap() {
    let (l, beta) = (50, 0.9);
    let recs = uniform_records(l, 10_000, beta, 2);
    let c = lambda_correction(beta, &recs).unwrap();
    let gap = beta * (l + 1) as f64 / l as f64 - beta;
    assert!(c.lambda <= 0.02 && (c.lambda - gap).abs() < 0.01, "{}", c.lambda);
}

#[test]
fn single_record_cases() {
    let recs = [record(2.0, vec![2.0; 5])];
    assert_eq!(lambda_correction(0.5, &recs).unwrap().lambda, 0.0);
    assert!(matches!(
        lambda_correction(0.6, &recs),
        Err(Error::InfeasibleCorrection { records: 1, .. })
    ));
    assert!(lambda_correction(0.5, &[] as &[CalibrationRecord]).is_err());
}

#[test]
fn records_validate_their_inputs() {
    let s = ScoreSample::new(vec![0.0]).unwrap();
    assert!(CalibrationRecord::new(f64::NAN, s.clone()).is_err());
    assert!(CalibrationRecord::new(f64::INFINITY, s.clone()).is_err());
    assert!(ScoreSample::new(vec![]).is_err());
    assert_eq!(CalibrationRecord::new(0.5, s).unwrap().m(), 1);
}

fn records_strategy() -> impl Strategy<Value = Vec<(f64, Vec<f64>)>> {
    prop::collection::vec((-1.0f64..1.0, prop::collection::vec(-2.0f64..2.0, 1..12)), 1..8)
}

fn build(raw: &[(f64, Vec<f64>)]) -> Vec<CalibrationRecord> {
    raw.iter().map(|(q, s)| record(*q, s.clone())).collect()
}

/// Brute-force objective straight from the definition.
fn objective(raw: &[(f64, Vec<f64>)], lambda: f64) -> f64 {
    let l = raw.len() as f64;
    raw.iter()
        .map(|(q, s)| s.iter().filter(|&&v| v - q <= lambda).count() as f64 / s.len() as f64)
        .sum::<f64>()
        / (l + 1.0)
}

proptest! {
    #[test]
    fn lambda_is_tight(raw in records_strategy(), frac in 0.01f64..0.99) {
        let l = raw.len() as f64;
        let beta = frac * l / (l + 1.0);
        let lambda = lambda_correction(beta, &build(&raw)).unwrap().lambda;
        prop_assert!(objective(&raw, lambda) >= beta - 1e-12);
        prop_assert!(correction_objective(&build(&raw), lambda) >= beta - 1e-12);
        let below = raw
            .iter()
            .flat_map(|(q, s)| s.iter().map(move |v| v - q))
            .filter(|&b| b < lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        if below.is_finite() {
            prop_assert!(objective(&raw, below) < beta);
        }
        // λ is itself a breakpoint
        let is_breakpoint = raw.iter().any(|(q, s)| s.iter().any(|v| v - q == lambda));
        prop_assert!(is_breakpoint);
    }

    #[test]
    fn lambda_is_monotone_in_beta(raw in records_strategy(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let l = raw.len() as f64;
        let cap = l / (l + 1.0);
        let (lo, hi) = if a <= b { (a * cap, b * cap) } else { (b * cap, a * cap) };
        let recs = build(&raw);
        prop_assert!(lambda_correction(lo, &recs).unwrap().lambda <= lambda_correction(hi, &recs).unwrap().lambda);
    }

    #[test]
    fn conservative_record_never_raises_lambda(raw in records_strategy(), frac in 0.01f64..0.99, extra in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let l = raw.len() as f64;
        let beta = frac * l / (l + 1.0);
        let before = lambda_correction(beta, &build(&raw)).unwrap().lambda;
        let mut more = build(&raw);
        more.push(record(1000.0, extra));
        prop_assert!(lambda_correction(beta, &more).unwrap().lambda <= before);
    }

    #[test]
    fn epsilon_prime_is_below_epsilon(eps in 0.05f64..0.9, delta in 0.01f64..0.9, l in 1usize..60, m in 1usize..100_000) {
        match epsilon_adjust(eps, delta, &vec![m; l]) {
            Ok(adj) => {
                prop_assert!(adj.epsilon_prime < eps && adj.epsilon_prime > 0.0);
                prop_assert!((adj.epsilon - adj.epsilon_prime - adj.tau).abs() < 1e-12);
            }
            Err(e) => prop_assert!(matches!(e, Error::InsufficientCalibration { .. }), "{e}"),
        }
    }
}

#[test]
fn unequal_sample_counts_match_definition() {
    let mut rng = stream(4, &[]);
    let raw: Vec<(f64, Vec<f64>)> = (0..6)
        .map(|i| {
            (
                rng.random_range(-0.5..0.5),
                (0..3 + 7 * i).map(|_| rng.random::<f64>()).collect(),
            )
        })
        .collect();
    let recs = build(&raw);
    for beta in [0.1, 0.4, 0.7, 0.85] {
        let lambda = lambda_correction(beta, &recs).unwrap().lambda;
        let mut candidates: Vec<f64> = raw.iter().flat_map(|(q, s)| s.iter().map(move |v| v - q)).collect();
        candidates.sort_by(f64::total_cmp);
        let first = candidates.into_iter().find(|&c| objective(&raw, c) >= beta).unwrap();
        assert_eq!(lambda, first);
    }
}

struct Table(Vec<f64>);

impl Scorer<Label> for Table {
    fn score(&self, _x: &FeatureVector, y: &Label) -> Result<f64> {
        Ok(self.0[*y])
    }
}

fn correction(lambda: f64) -> Correction {
    Correction {
        lambda,
        beta: 0.9,
        mode: CorrectionMode::EmpiricalF,
    }
}

#[test]
fn meta_sets_follow_the_threshold() {
    let x = FeatureVector::new(vec![0.0]).unwrap();
    let table = Table(vec![-0.9, -0.05, -0.5]);
    let labels = [0, 1, 2];
    let all = meta_cp_classify(&x, &labels, &table, 0.0, &correction(1e300)).unwrap();
    assert_eq!(all.labels().unwrap(), &[0, 1, 2]);
    let none = meta_cp_classify(&x, &labels, &table, -0.5, &correction(-0.5)).unwrap();
    assert!(none.is_empty());
    let tie = meta_cp_classify(&x, &labels, &table, -0.75, &correction(0.25)).unwrap();
    assert_eq!(tie.labels().unwrap(), &[0, 2]);
}

#[test]
fn meta_intervals() {
    let point = meta_cp_interval(3.0, 0.25, &correction(-0.25)).unwrap();
    assert_eq!(point.region, Region::Interval { lo: 3.0, hi: 3.0 });
    assert!(point.contains_value(3.0) && point.size() == 0.0);
    let empty = meta_cp_interval(3.0, 0.25, &correction(-0.5)).unwrap();
    assert!(empty.is_empty() && !empty.contains_value(3.0));
    let wide = meta_cp_interval(-1.0, 0.5, &correction(0.25)).unwrap();
    assert_eq!(wide.region, Region::Interval { lo: -1.75, hi: -0.25 });
    assert_eq!(wide.size(), 1.5);
}

#[test]
fn epsilon_prime_limits_and_monotonicity() {
    let adj = epsilon_adjust(0.1, 0.1, &[100_000_000; 44]).unwrap();
    assert!(adj.epsilon_prime >= 0.09 && adj.epsilon_prime < 0.1);
    let mut last = f64::NEG_INFINITY;
    for delta in [0.01, 0.05, 0.1, 0.2] {
        let e = epsilon_adjust(0.1, delta, &[1000; 44]).unwrap().epsilon_prime;
        assert!(e >= last, "delta {delta}: {e} < {last}");
        last = e;
    }
    let loose = epsilon_adjust(0.1, 0.999, &[1000; 44]).unwrap();
    assert!(loose.epsilon_prime > 0.095, "{}", loose.epsilon_prime);
    assert!(matches!(
        epsilon_adjust(0.01, 0.01, &[5; 3]),
        Err(Error::InsufficientCalibration { .. })
    ));
    assert!(epsilon_adjust(0.1, 0.1, &[]).is_err());
    assert!(epsilon_adjust(0.1, 0.1, &[10, 0]).is_err());
}

#[test]
fn adjusted_sets_contain_plain_sets() {
    let mut rng = stream(5, &[]);
    let recs: Vec<CalibrationRecord> = (0..40)
        .map(|_| {
            let q = rng.random_range(-0.2..0.2);
            record(q, (0..500).map(|_| -rng.random::<f64>()).collect())
        })
        .collect();
    let adj = epsilon_adjust(0.2, 0.1, &[500; 40]).unwrap();
    let plain = lambda_correction(0.8, &recs).unwrap();
    let x = FeatureVector::new(vec![0.0]).unwrap();
    let labels: Vec<Label> = (0..10).collect();
    for _ in 0..50 {
        let table = Table((0..10).map(|_| -rng.random::<f64>()).collect());
        let q_hat = rng.random_range(-0.8..-0.2);
        let wide = sample_conditional_meta_cp(&x, &labels, &table, q_hat, &recs, &adj).unwrap();
        let narrow = meta_cp_classify(&x, &labels, &table, q_hat, &plain).unwrap();
        assert!(narrow.is_subset_of(&wide));
    }
}

#[test]
fn conditional_shortfall_shrinks_with_k() {
    // location family with uniform noise: a task's coverage at threshold t
    // is clamp(t − μ, 0, 1), so per-task shortfall is exact
    let beta = 0.8;
    let family = LocationFamily {
        shape: LocationShape::Uniform,
        spread: 1.0,
        master_seed: 17,
    };
    let shortfall = |k: usize| {
        let data: Vec<QuantileTrainingExample> = (0..300)
            .map(|id| {
                let t = family.task(id, k, 1);
                QuantileTrainingExample {
                    loo_scores: t.support.clone(),
                    target: t.true_quantile(beta),
                }
            })
            .collect();
        let cfg = TrainConfig {
            hidden: 16,
            epochs: 60,
            ..Default::default()
        };
        let model = train_set_regressor(&data, &cfg).unwrap();
        let recs: Vec<CalibrationRecord> = (1000..1050)
            .map(|id| {
                let t = family.task(id, k, 2000);
                record(model.predict_quantile(&t.support).unwrap(), t.test)
            })
            .collect();
        let lambda = lambda_correction(beta, &recs).unwrap().lambda;
        let tasks = 400;
        (2000..2000 + tasks)
            .map(|id| {
                let t = family.task(id, k, 1);
                let cov = (model.predict_quantile(&t.support).unwrap() + lambda - t.location).clamp(0.0, 1.0);
                (beta - cov).max(0.0)
            })
            .sum::<f64>()
            / tasks as f64
    };
    let (s8, s64) = (shortfall(8), shortfall(64));
    assert!(s64 < s8, "k=8 {s8}, k=64 {s64}");
}
