//! Meta nonconformity scorers over feature vectors.
//!
//! Two analytic few-shot models stand in for a meta-learned encoder plus
//! adaptation head: a nearest-prototype classifier scored by negative softmax
//! probability, and a closed-form ridge regressor scored by absolute error.

mod family;
mod prototype;
mod ridge;

pub use family::{Encoder, PrototypeFamily, PrototypeScorer, RidgeFamily, RidgeScorer, ScorerFamily};
pub use prototype::{fit_prototypes, fit_prototypes_for, proto_nonconformity, proto_probs, PrototypeModel};
pub use ridge::{fit_ridge, ridge_loo_residuals, ridge_nonconformity, RidgeModel};

use crate::conformal::ScoreSample;
use crate::error::{Error, Result};

pub type Label = usize;

/// One auxiliary task as `(support, held-out)` examples.
pub type TaskPair<'a, Y> = (&'a [Example<Y>], &'a [Example<Y>]);

/// Fixed-dimension vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(FeatureVector(coords))
    }

    pub(crate) fn from_finite(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|c| c.is_finite()));
        FeatureVector(coords)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.0.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<Y> {
    pub x: FeatureVector,
    pub y: Y,
}

/// A fitted nonconformity measure: lower scores conform better.
pub trait Scorer<Y> {
    fn score(&self, x: &FeatureVector, y: &Y) -> Result<f64>;
}

/// Scores each support example under a model fitted on the other `k − 1`.
///
/// The j-th output belongs to the j-th input, so permuting the support
/// permutes the scores the same way.
pub fn leave_one_out_scores<Y, S, F>(support: &[Example<Y>], scorer_factory: F) -> Result<ScoreSample>
where
    Y: Clone,
    S: Scorer<Y>,
    F: Fn(&[Example<Y>]) -> Result<S>,
{
    if support.len() < 2 {
        return Err(Error::arg(format!(
            "leave-one-out scoring needs at least 2 examples, got {}",
            support.len()
        )));
    }
    let mut rest: Vec<Example<Y>> = support[1..].to_vec();
    let mut scores = Vec::with_capacity(support.len());
    for j in 0..support.len() {
        if j > 0 {
            // rest holds support \ {j}: swap example j - 1 back in for j
            rest[j - 1] = support[j - 1].clone();
        }
        let model = scorer_factory(&rest)?;
        scores.push(model.score(&support[j].x, &support[j].y)?);
    }
    ScoreSample::new(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn feature_vector_rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
        assert_eq!(fv(&[3.0, 4.0]).distance(&fv(&[0.0, 0.0])), 5.0);
    }

    #[test]
    fn loo_needs_two_examples() {
        let one = vec![Example {
            x: fv(&[0.0]),
            y: 0usize,
        }];
        assert!(leave_one_out_scores(&one, fit_prototypes).is_err());
    }

    #[test]
    fn loo_visits_every_holdout_once() {
        // scorer reports the sum of held-in labels, which identifies the holdout
        struct SumScorer(f64);
        impl Scorer<f64> for SumScorer {
            fn score(&self, _x: &FeatureVector, _y: &f64) -> Result<f64> {
                Ok(self.0)
            }
        }
        let support: Vec<Example<f64>> = (0..5)
            .map(|i| Example {
                x: fv(&[0.0]),
                y: f64::from(1u32 << i),
            })
            .collect();
        let scores = leave_one_out_scores(&support, |rest: &[Example<f64>]| {
            Ok(SumScorer(rest.iter().map(|e| e.y).sum()))
        })
        .unwrap();
        let expected: Vec<f64> = (0..5).map(|i| 31.0 - f64::from(1u32 << i)).collect();
        assert_eq!(scores.values(), expected.as_slice());
    }

    #[test]
    fn loo_identical_prototype_pair_is_symmetric() {
        let support = vec![
            Example {
                x: fv(&[1.0, 1.0]),
                y: 0usize,
            },
            Example {
                x: fv(&[1.0, 1.0]),
                y: 0,
            },
            Example {
                x: fv(&[4.0, 0.0]),
                y: 1,
            },
            Example {
                x: fv(&[4.0, 0.0]),
                y: 1,
            },
        ];
        let s = leave_one_out_scores(&support, fit_prototypes).unwrap();
        assert_eq!(s.values()[0], s.values()[1]);
        assert_eq!(s.values()[2], s.values()[3]);
    }
}
