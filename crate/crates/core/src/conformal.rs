//! Distribution-free conformal primitives.
//!
//! Quantiles use the higher order statistic convention: the β-quantile of `n`
//! values is the `⌈βn⌉`-th smallest, with no interpolation. The inflated
//! quantile appends `+∞` to the sample before taking the quantile, which is
//! the threshold that gives the finite-sample guarantee
//! `P(V_{n+1} ≤ q̂) ≥ β` for exchangeable scores.
//!
//! Set membership always uses `≤`, so a candidate whose score ties the
//! threshold is kept.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{Example, FeatureVector, Label, Scorer};

/// Non-empty sample of nonconformity scores. Entries are finite or `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample(Vec<f64>);

impl ScoreSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("score sample must be non-empty"));
        }
        if let Some(bad) = values.iter().find(|v| v.is_nan() || **v == f64::NEG_INFINITY) {
            return Err(Error::arg(format!("score sample contains {bad}")));
        }
        Ok(ScoreSample(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn check_level(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} must lie in (0, 1), got {value}")))
    }
}

/// `⌈βn⌉`, robust to products like `0.7 * 10 = 7.000000000000001`.
pub(crate) fn ceil_rank(beta: f64, n: usize) -> usize {
    let x = beta * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `rank`-th smallest value (1-based) using linear-time selection.
fn order_statistic(values: &[f64], rank: usize) -> f64 {
    debug_assert!(rank >= 1 && rank <= values.len());
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// `inf{v : F̂(v) ≥ β}` over the empirical distribution of `sample`.
pub fn quantile(beta: f64, sample: &ScoreSample) -> Result<f64> {
    check_level("beta", beta)?;
    let rank = ceil_rank(beta, sample.len()).max(1);
    Ok(order_statistic(sample.values(), rank))
}

/// `quantile(β, sample ∪ {+∞})`. Returns `+∞` exactly when `⌈β(n+1)⌉ > n`.
pub fn inflated_quantile(beta: f64, sample: &ScoreSample) -> Result<f64> {
    check_level("beta", beta)?;
    Ok(inflated_quantile_of(beta, sample.values()))
}

/// Inflated quantile over a raw slice; an empty slice yields `+∞`.
pub(crate) fn inflated_quantile_of(beta: f64, values: &[f64]) -> f64 {
    let n = values.len();
    let rank = ceil_rank(beta, n + 1).max(1);
    if rank > n {
        f64::INFINITY
    } else {
        order_statistic(values, rank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Discrete label set, sorted ascending. May be empty.
    Labels(Vec<Label>),
    /// Closed interval `[lo, hi]` with finite `lo ≤ hi`.
    Interval {
        lo: f64,
        hi: f64,
    },
    EmptyInterval,
    /// Unbounded interval: the whole real line.
    RealLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub region: Region,
    /// Target coverage `1 − ε`; `None` for heuristics with no nominal level.
    pub level: Option<f64>,
}

impl PredictionSet {
    pub fn from_labels(mut labels: Vec<Label>, level: Option<f64>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        PredictionSet {
            region: Region::Labels(labels),
            level,
        }
    }

    /// `[center − half_width, center + half_width]`. Negative half-widths give
    /// the empty interval and an infinite half-width the real line.
    pub fn centered_interval(center: f64, half_width: f64, level: Option<f64>) -> Self {
        let region = if half_width == f64::INFINITY {
            Region::RealLine
        } else if half_width < 0.0 {
            Region::EmptyInterval
        } else {
            Region::Interval {
                lo: center - half_width,
                hi: center + half_width,
            }
        };
        PredictionSet { region, level }
    }

    pub fn labels(&self) -> Option<&[Label]> {
        match &self.region {
            Region::Labels(l) => Some(l),
            _ => None,
        }
    }

    pub fn contains_label(&self, label: Label) -> bool {
        match &self.region {
            Region::Labels(l) => l.binary_search(&label).is_ok(),
            _ => false,
        }
    }

    pub fn contains_value(&self, value: f64) -> bool {
        match self.region {
            Region::Interval { lo, hi } => lo <= value && value <= hi,
            Region::RealLine => true,
            Region::EmptyInterval | Region::Labels(_) => false,
        }
    }

    /// Label count for discrete sets, width for intervals (`+∞` when unbounded).
    pub fn size(&self) -> f64 {
        match &self.region {
            Region::Labels(l) => l.len() as f64,
            Region::Interval { lo, hi } => hi - lo,
            Region::EmptyInterval => 0.0,
            Region::RealLine => f64::INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.region {
            Region::Labels(l) => l.is_empty(),
            Region::EmptyInterval => true,
            _ => false,
        }
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        match (&self.region, &other.region) {
            (Region::Labels(a), Region::Labels(_)) => a.iter().all(|&y| other.contains_label(y)),
            (Region::EmptyInterval, Region::Labels(_)) | (Region::Labels(_), _) | (_, Region::Labels(_)) => {
                self.is_empty()
            }
            (Region::EmptyInterval, _) => true,
            (_, Region::RealLine) => true,
            (Region::RealLine, _) => false,
            (Region::Interval { .. }, Region::EmptyInterval) => false,
            (Region::Interval { lo, hi }, Region::Interval { lo: lo2, hi: hi2 }) => lo2 <= lo && hi <= hi2,
        }
    }
}

/// Keeps every candidate whose score is at most `threshold`.
pub(crate) fn threshold_labels<S: Scorer<Label>>(
    x: &FeatureVector,
    candidates: &[Label],
    scorer: &S,
    threshold: f64,
    level: Option<f64>,
) -> Result<PredictionSet> {
    if candidates.is_empty() {
        return Err(Error::arg("candidate label list is empty"));
    }
    let mut kept = Vec::new();
    for &y in candidates {
        if scorer.score(x, &y)? <= threshold {
            kept.push(y);
        }
    }
    Ok(PredictionSet::from_labels(kept, level))
}

/// Split conformal classification against held-out calibration scores.
pub fn split_cp_classify<S: Scorer<Label>>(
    x: &FeatureVector,
    candidates: &[Label],
    scorer: &S,
    calib_scores: &ScoreSample,
    epsilon: f64,
) -> Result<PredictionSet> {
    check_level("epsilon", epsilon)?;
    let threshold = inflated_quantile(1.0 - epsilon, calib_scores)?;
    threshold_labels(x, candidates, scorer, threshold, Some(1.0 - epsilon))
}

/// Split conformal regression interval from absolute calibration residuals.
pub fn split_cp_interval(
    point_prediction: f64,
    calib_abs_residuals: &ScoreSample,
    epsilon: f64,
) -> Result<PredictionSet> {
    check_level("epsilon", epsilon)?;
    if !point_prediction.is_finite() {
        return Err(Error::NonFinite("point prediction".into()));
    }
    let t = inflated_quantile(1.0 - epsilon, calib_abs_residuals)?;
    Ok(PredictionSet::centered_interval(
        point_prediction,
        t,
        Some(1.0 - epsilon),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FullCpMode {
    /// Compare against the scores of every augmented support point.
    #[default]
    Pooled,
    /// Compare only against support points sharing the candidate's label.
    Mondrian,
}

/// Full conformal classification.
///
/// For each candidate `y` the measure is refit on `support ∪ {(x, y)}` and
/// every point of the augmented set is rescored under that fit, which keeps
/// the `k + 1` scores exchangeable. Labels are discrete by construction, so
/// regression targets cannot reach this path; intervals go through
/// [`split_cp_interval`].
pub fn full_cp_classify<S, F>(
    x: &FeatureVector,
    candidates: &[Label],
    support: &[Example<Label>],
    scorer_factory: F,
    epsilon: f64,
    mode: FullCpMode,
) -> Result<PredictionSet>
where
    S: Scorer<Label>,
    F: Fn(&[Example<Label>]) -> Result<S>,
{
    check_level("epsilon", epsilon)?;
    if candidates.is_empty() {
        return Err(Error::arg("candidate label list is empty"));
    }
    let beta = 1.0 - epsilon;
    let mut augmented = Vec::with_capacity(support.len() + 1);
    augmented.extend_from_slice(support);
    augmented.push(Example { x: x.clone(), y: 0 });
    let mut scores = Vec::with_capacity(support.len());
    let mut kept = Vec::new();
    for &y in candidates {
        augmented.last_mut().expect("augmented is non-empty").y = y;
        let model = scorer_factory(&augmented)?;
        scores.clear();
        for z in support {
            if mode == FullCpMode::Pooled || z.y == y {
                scores.push(model.score(&z.x, &z.y)?);
            }
        }
        let test = model.score(x, &y)?;
        if test <= inflated_quantile_of(beta, &scores) {
            kept.push(y);
        }
    }
    Ok(PredictionSet::from_labels(kept, Some(beta)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MondrianDiagnostics {
    /// Candidates with no calibration scores; their threshold is `+∞`.
    pub uncalibrated: Vec<Label>,
}

/// Label-conditional (Mondrian) split conformal classification.
pub fn mondrian_classify<S: Scorer<Label>>(
    x: &FeatureVector,
    candidates: &[Label],
    scorer: &S,
    per_class_calib: &BTreeMap<Label, ScoreSample>,
    epsilon: f64,
) -> Result<(PredictionSet, MondrianDiagnostics)> {
    check_level("epsilon", epsilon)?;
    if candidates.is_empty() {
        return Err(Error::arg("candidate label list is empty"));
    }
    let beta = 1.0 - epsilon;
    let mut diagnostics = MondrianDiagnostics::default();
    let mut kept = Vec::new();
    for &y in candidates {
        let threshold = match per_class_calib.get(&y) {
            Some(sample) => inflated_quantile_of(beta, sample.values()),
            None => {
                diagnostics.uncalibrated.push(y);
                f64::INFINITY
            }
        };
        if scorer.score(x, &y)? <= threshold {
            kept.push(y);
        }
    }
    Ok((PredictionSet::from_labels(kept, Some(beta)), diagnostics))
}
