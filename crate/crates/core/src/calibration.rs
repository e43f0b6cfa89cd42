//! Task-level calibration of predicted quantiles.
//!
//! Each calibration task contributes its predicted quantile `Q̂_i` and the
//! empirical CDF of its test scores. The correction `Λ(β)` is the smallest
//! shift with `Σ_i F̂_i(Q̂_i + Λ) / (l + 1) ≥ β`; adding it to a new task's
//! `Q̂` gives a threshold that covers at level `β` across exchangeable tasks.
//! [`epsilon_adjust`] tightens the significance level so the guarantee holds
//! with probability `1 − δ` over the draw of the calibration tasks.

use serde::Serialize;

use crate::conformal::{ceil_rank, check_level, threshold_labels, PredictionSet, ScoreSample};
use crate::error::{Error, Result};
use crate::models::{FeatureVector, Label, Scorer};

/// Slack allowed when comparing the step objective with `β`.
const LEVEL_TOLERANCE: f64 = 1e-12;
/// Number of α values searched by [`epsilon_adjust`].
pub const ALPHA_GRID_SIZE: usize = 200;
/// Decades spanned by the α grid below its upper end.
const ALPHA_GRID_DECADES: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    q_hat: f64,
    sorted_scores: Vec<f64>,
}

impl CalibrationRecord {
    pub fn new(q_hat: f64, test_scores: ScoreSample) -> Result<Self> {
        if !q_hat.is_finite() {
            return Err(Error::NonFinite("calibration q_hat".into()));
        }
        let mut sorted_scores = test_scores.into_inner();
        sorted_scores.sort_by(f64::total_cmp);
        Ok(CalibrationRecord { q_hat, sorted_scores })
    }

    /// Same scores, different prediction.
    pub fn with_q_hat(&self, q_hat: f64) -> Result<Self> {
        if !q_hat.is_finite() {
            return Err(Error::NonFinite("calibration q_hat".into()));
        }
        Ok(CalibrationRecord {
            q_hat,
            sorted_scores: self.sorted_scores.clone(),
        })
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn m(&self) -> usize {
        self.sorted_scores.len()
    }

    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted_scores
    }

    /// Fraction of test scores `≤ v`.
    pub fn ecdf(&self, v: f64) -> f64 {
        self.sorted_scores.partition_point(|&s| s <= v) as f64 / self.m() as f64
    }

    /// Fraction of test scores with `s − Q̂ ≤ λ`. Comparing the difference
    /// rather than `s ≤ Q̂ + λ` keeps the objective consistent with the
    /// breakpoints searched by [`lambda_correction`] under rounding.
    pub fn shifted_ecdf(&self, lambda: f64) -> f64 {
        self.sorted_scores.partition_point(|&s| s - self.q_hat <= lambda) as f64 / self.m() as f64
    }
}

/// Fraction of `scores` that are `≤ v`.
pub fn ecdf_eval(scores: &ScoreSample, v: f64) -> f64 {
    scores.values().iter().filter(|&&s| s <= v).count() as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    EmpiricalF,
    ExactF,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correction {
    pub lambda: f64,
    pub beta: f64,
    pub mode: CorrectionMode,
}

fn check_feasible(beta: f64, l: usize) -> Result<()> {
    check_level("beta", beta)?;
    if l == 0 {
        return Err(Error::arg("correction needs at least one calibration record"));
    }
    let cap = l as f64 / (l as f64 + 1.0);
    if beta > cap + LEVEL_TOLERANCE {
        return Err(Error::InfeasibleCorrection { beta, cap, records: l });
    }
    Ok(())
}

/// Value of `Σ_i F̂_i(Q̂_i + λ) / (l + 1)`.
pub fn correction_objective<'a, I>(records: I, lambda: f64) -> f64
where
    I: IntoIterator<Item = &'a CalibrationRecord>,
{
    let mut total = 0.0;
    let mut l = 0usize;
    for r in records {
        total += r.shifted_ecdf(lambda);
        l += 1;
    }
    total / (l as f64 + 1.0)
}

/// Exact `Λ(β)` over the empirical CDFs.
///
/// The objective is a right-continuous step function that only jumps at the
/// breakpoints `s − Q̂_i`, so the answer is one of them. With equal `m_i` every
/// jump has the same height and the answer is an order statistic of the
/// pooled breakpoints.
pub fn lambda_correction<'a, I>(beta: f64, records: I) -> Result<Correction>
where
    I: IntoIterator<Item = &'a CalibrationRecord>,
{
    let records: Vec<&CalibrationRecord> = records.into_iter().collect();
    let l = records.len();
    check_feasible(beta, l)?;
    let m0 = records[0].m();
    let lambda = if records.iter().all(|r| r.m() == m0) {
        let total = (l + 1) * m0;
        let needed = ceil_rank(beta, total).max(1);
        let mut breakpoints: Vec<f64> = records
            .iter()
            .flat_map(|r| r.sorted_scores.iter().map(move |s| s - r.q_hat))
            .collect();
        let (_, v, _) = breakpoints.select_nth_unstable_by(needed - 1, f64::total_cmp);
        *v
    } else {
        let mut jumps: Vec<(f64, f64)> = records
            .iter()
            .flat_map(|r| {
                let w = 1.0 / ((l as f64 + 1.0) * r.m() as f64);
                r.sorted_scores.iter().map(move |s| (s - r.q_hat, w))
            })
            .collect();
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut found = None;
        let mut i = 0;
        while i < jumps.len() {
            let at = jumps[i].0;
            while i < jumps.len() && jumps[i].0 == at {
                acc += jumps[i].1;
                i += 1;
            }
            if acc >= beta - LEVEL_TOLERANCE {
                found = Some(at);
                break;
            }
        }
        found.ok_or(Error::InfeasibleCorrection {
            beta,
            cap: l as f64 / (l as f64 + 1.0),
            records: l,
        })?
    };
    if !lambda.is_finite() {
        return Err(Error::NonFinite("correction (infinite calibration score)".into()));
    }
    Ok(Correction {
        lambda,
        beta,
        mode: CorrectionMode::EmpiricalF,
    })
}

/// `Λ(β)` for known continuous CDFs, found by bracketing and bisection to
/// `tol` in λ.
pub fn lambda_correction_exact<F>(beta: f64, q_hats: &[f64], cdfs: &[F], tol: f64) -> Result<Correction>
where
    F: Fn(f64) -> f64,
{
    let l = q_hats.len();
    if cdfs.len() != l {
        return Err(Error::arg(format!("{l} predictions but {} CDFs", cdfs.len())));
    }
    check_feasible(beta, l)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::arg("tolerance must be positive"));
    }
    let objective = |lambda: f64| q_hats.iter().zip(cdfs).map(|(q, f)| f(q + lambda)).sum::<f64>() / (l as f64 + 1.0);
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut steps = 0;
    while objective(lo) >= beta || objective(hi) < beta {
        if objective(lo) >= beta {
            lo *= 2.0;
        }
        if objective(hi) < beta {
            hi *= 2.0;
        }
        steps += 1;
        if steps > 1100 {
            return Err(Error::InfeasibleCorrection {
                beta,
                cap: l as f64 / (l as f64 + 1.0),
                records: l,
            });
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if objective(mid) >= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Correction {
        lambda: hi,
        beta,
        mode: CorrectionMode::ExactF,
    })
}

/// Keeps each candidate scoring at most `q_hat_target + λ`.
pub fn meta_cp_classify<S: Scorer<Label>>(
    x: &FeatureVector,
    candidates: &[Label],
    scorer: &S,
    q_hat_target: f64,
    correction: &Correction,
) -> Result<PredictionSet> {
    threshold_labels(
        x,
        candidates,
        scorer,
        q_hat_target + correction.lambda,
        Some(correction.beta),
    )
}

/// `[ŷ − t, ŷ + t]` with `t = q_hat_target + λ`; negative `t` gives the empty
/// interval and `t = 0` the single point `ŷ`.
pub fn meta_cp_interval(point_prediction: f64, q_hat_target: f64, correction: &Correction) -> Result<PredictionSet> {
    if !point_prediction.is_finite() || !q_hat_target.is_finite() {
        return Err(Error::NonFinite("meta interval inputs".into()));
    }
    Ok(PredictionSet::centered_interval(
        point_prediction,
        q_hat_target + correction.lambda,
        Some(correction.beta),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonAdjustment {
    pub epsilon: f64,
    pub delta: f64,
    pub epsilon_prime: f64,
    /// Grid value of α achieving the smallest penalty.
    pub alpha: f64,
    pub tau: f64,
}

/// Penalty `τ(α)` subtracted from ε, or `None` where it is undefined.
fn adjustment_penalty(alpha: f64, delta: f64, m_list: &[usize]) -> Option<f64> {
    let l = m_list.len() as f64;
    let inner = 1.0 - (1.0 - delta) / (1.0 - alpha).powf(l);
    if !(inner > 0.0 && inner < 1.0) {
        return None;
    }
    let gamma_sq: f64 = m_list.iter().map(|&m| (2.0 / alpha).ln() / (2.0 * m as f64)).sum();
    let tau = ((-2.0 / (l * l)) * gamma_sq * inner.ln()).sqrt();
    tau.is_finite().then_some(tau)
}

/// Significance `ε′ < ε` for which meta conformal sets are `(δ, ε)`-valid
/// given calibration tasks with `m_i` test examples each.
pub fn epsilon_adjust(epsilon: f64, delta: f64, m_list: &[usize]) -> Result<EpsilonAdjustment> {
    check_level("epsilon", epsilon)?;
    check_level("delta", delta)?;
    if m_list.is_empty() {
        return Err(Error::arg("epsilon adjustment needs at least one calibration task"));
    }
    if m_list.contains(&0) {
        return Err(Error::arg("every calibration task needs m_i ≥ 1"));
    }
    let l = m_list.len() as f64;
    let alpha_max = 1.0 - (1.0 - delta).powf(1.0 / l);
    let best = (0..ALPHA_GRID_SIZE)
        .map(|j| {
            let exponent = -ALPHA_GRID_DECADES * (1.0 - j as f64 / ALPHA_GRID_SIZE as f64);
            alpha_max * 10f64.powf(exponent)
        })
        .filter_map(|alpha| adjustment_penalty(alpha, delta, m_list).map(|tau| (alpha, tau)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let insufficient = |reason: String| Error::InsufficientCalibration { delta, epsilon, reason };
    let (alpha, tau) = best.ok_or_else(|| insufficient("no feasible α on the search grid".into()))?;
    let epsilon_prime = epsilon - tau;
    if epsilon_prime <= 0.0 {
        return Err(insufficient(format!(
            "adjusted ε′ = {epsilon_prime:.4} is not positive"
        )));
    }
    Ok(EpsilonAdjustment {
        epsilon,
        delta,
        epsilon_prime,
        alpha,
        tau,
    })
}

/// Meta conformal classification at the adjusted level `1 − ε′`.
///
/// `q_hat_target` and the records' `Q̂_i` must come from the quantile
/// predictor trained for `β = 1 − ε′`.
pub fn sample_conditional_meta_cp<'a, S, I>(
    x: &FeatureVector,
    candidates: &[Label],
    scorer: &S,
    q_hat_target: f64,
    records: I,
    adjustment: &EpsilonAdjustment,
) -> Result<PredictionSet>
where
    S: Scorer<Label>,
    I: IntoIterator<Item = &'a CalibrationRecord>,
{
    let correction = lambda_correction(1.0 - adjustment.epsilon_prime, records)?;
    meta_cp_classify(x, candidates, scorer, q_hat_target, &correction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(q: f64, scores: &[f64]) -> CalibrationRecord {
        CalibrationRecord::new(q, ScoreSample::new(scores.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn ecdf_examples() {
        let s = ScoreSample::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(ecdf_eval(&s, 0.5), 0.0);
        assert_eq!(ecdf_eval(&s, 3.0), 1.0);
        assert!((ecdf_eval(&s, 2.0) - 2.0 / 3.0).abs() < 1e-15);
        let r = record(0.0, &[3.0, 1.0, 2.0]);
        for v in [0.5, 1.0, 2.5, 3.0, 9.0] {
            assert_eq!(r.ecdf(v), ecdf_eval(&s, v));
        }
    }

    #[test]
    fn single_record_at_half() {
        let r = record(2.0, &[2.0, 2.0, 2.0]);
        let c = lambda_correction(0.5, [&r]).unwrap();
        assert_eq!(c.lambda, 0.0);
        assert!(matches!(
            lambda_correction(0.6, [&r]),
            Err(Error::InfeasibleCorrection { records: 1, .. })
        ));
    }

    #[test]
    fn unequal_sizes_match_brute_force() {
        let recs = vec![
            record(0.5, &[0.1, 0.9, 1.3]),
            record(-0.2, &[0.0, 0.4]),
            record(1.0, &[2.0, 0.3, 0.7, 1.1]),
        ];
        for beta in [0.1, 0.3, 0.5, 0.7, 0.75] {
            let c = lambda_correction(beta, &recs).unwrap();
            let mut candidates: Vec<f64> = recs
                .iter()
                .flat_map(|r| r.sorted_scores().iter().map(move |s| s - r.q_hat()))
                .collect();
            candidates.sort_by(f64::total_cmp);
            let brute = candidates
                .iter()
                .copied()
                .find(|&lam| correction_objective(&recs, lam) >= beta - 1e-12)
                .unwrap();
            assert_eq!(c.lambda, brute, "beta {beta}");
        }
    }

    #[test]
    fn interval_edge_cases() {
        let c = Correction {
            lambda: -1.0,
            beta: 0.9,
            mode: CorrectionMode::EmpiricalF,
        };
        let point = meta_cp_interval(3.0, 1.0, &c).unwrap();
        assert!(point.contains_value(3.0) && !point.contains_value(3.0 + 1e-12));
        assert_eq!(point.size(), 0.0);
        assert!(meta_cp_interval(3.0, 0.5, &c).unwrap().is_empty());
    }

    #[test]
    fn epsilon_adjust_reference_point() {
        let a = epsilon_adjust(0.1, 0.1, &[1000; 44]).unwrap();
        assert!(a.epsilon_prime < 0.1 && a.epsilon_prime > 0.06, "{a:?}");
        assert!(a.alpha > 0.0 && a.alpha < 1.0 - 0.9f64.powf(1.0 / 44.0));
        assert!(matches!(
            epsilon_adjust(0.01, 0.1, &[5; 3]),
            Err(Error::InsufficientCalibration { .. })
        ));
        assert!(epsilon_adjust(0.1, 0.1, &[0, 10]).is_err());
    }
}
