use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::prototype::softmax_neg;
use super::{fit_prototypes, fit_ridge, leave_one_out_scores, proto_probs, ridge_loo_residuals};
use super::{Example, FeatureVector, Label, PrototypeModel, RidgeModel, Scorer, TaskPair};
use crate::conformal::ScoreSample;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Feature map applied before fitting: identity, or a fixed seeded Gaussian
/// projection scaled by `1/√d_out`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Encoder {
    #[default]
    Identity,
    Projection {
        d_in: usize,
        rows: Vec<Vec<f64>>,
    },
}

impl Encoder {
    pub fn projection(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::arg("projection dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, &[purpose::ENCODER, d_in as u64, d_out as u64]);
        let scale = 1.0 / (d_out as f64).sqrt();
        let rows = (0..d_out)
            .map(|_| {
                (0..d_in)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Encoder::Projection { d_in, rows })
    }

    pub fn encode<'a>(&self, x: &'a FeatureVector) -> Result<Cow<'a, FeatureVector>> {
        match self {
            Encoder::Identity => Ok(Cow::Borrowed(x)),
            Encoder::Projection { d_in, rows } => {
                if x.dim() != *d_in {
                    return Err(Error::arg(format!("encoder expects dimension {d_in}, got {}", x.dim())));
                }
                Ok(Cow::Owned(FeatureVector::from_finite(
                    rows.iter().map(|r| x.dot(r)).collect(),
                )))
            }
        }
    }

    fn encode_all<Y: Clone>(&self, support: &[Example<Y>]) -> Result<Vec<Example<Y>>> {
        support
            .iter()
            .map(|e| {
                Ok(Example {
                    x: self.encode(&e.x)?.into_owned(),
                    y: e.y.clone(),
                })
            })
            .collect()
    }
}

/// A few-shot scorer builder: fits a nonconformity measure on one task's
/// support set.
pub trait ScorerFamily: Clone + Send + Sync {
    type Label: Clone + Send + Sync;
    type Scorer: Scorer<Self::Label> + Send + Sync;

    fn fit(&self, support: &[Example<Self::Label>]) -> Result<Self::Scorer>;

    /// Adapts any trainable state of the family to a set of auxiliary tasks,
    /// given as `(support, held-out)` pairs. Analytic families return a copy.
    fn meta_train(&self, _tasks: &[TaskPair<Self::Label>]) -> Result<Self> {
        Ok(self.clone())
    }

    fn loo_scores(&self, support: &[Example<Self::Label>]) -> Result<ScoreSample> {
        leave_one_out_scores(support, |rest: &[Example<Self::Label>]| self.fit(rest))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PrototypeFamily {
    pub encoder: Arc<Encoder>,
}

impl PrototypeFamily {
    pub fn new(encoder: Encoder) -> Self {
        PrototypeFamily {
            encoder: Arc::new(encoder),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeScorer {
    encoder: Arc<Encoder>,
    model: PrototypeModel,
}

impl PrototypeScorer {
    pub fn model(&self) -> &PrototypeModel {
        &self.model
    }

    /// Class probabilities in the model's label order.
    pub fn probs(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        proto_probs(&*self.encoder.encode(x)?, &self.model)
    }
}

impl Scorer<Label> for PrototypeScorer {
    /// A label without a prototype (possible in leave-one-out fits of very
    /// small supports) has probability zero and scores `0`.
    fn score(&self, x: &FeatureVector, y: &Label) -> Result<f64> {
        match self.model.labels().binary_search(y) {
            Ok(i) => Ok(-self.probs(x)?[i]),
            Err(_) => Ok(0.0),
        }
    }
}

impl ScorerFamily for PrototypeFamily {
    type Label = Label;
    type Scorer = PrototypeScorer;

    fn fit(&self, support: &[Example<Label>]) -> Result<PrototypeScorer> {
        Ok(PrototypeScorer {
            encoder: Arc::clone(&self.encoder),
            model: fit_prototypes(&self.encoder.encode_all(support)?)?,
        })
    }

    /// Refits only the held-out example's class prototype. Sums run in
    /// support order, so the result is bit-identical to refitting.
    fn loo_scores(&self, support: &[Example<Label>]) -> Result<ScoreSample> {
        let encoded = self.encoder.encode_all(support)?;
        let mut labels: Vec<Label> = encoded.iter().map(|e| e.y).collect();
        labels.sort_unstable();
        labels.dedup();
        let mut members = vec![Vec::new(); labels.len()];
        for (j, e) in encoded.iter().enumerate() {
            let c = labels.binary_search(&e.y).expect("label collected above");
            members[c].push(j);
        }
        let dim = encoded.first().map(|e| e.x.dim());
        let degenerate = labels.len() < 2
            || (labels.len() == 2 && members.iter().any(|m| m.len() == 1))
            || encoded.iter().any(|e| Some(e.x.dim()) != dim);
        if degenerate {
            // let the refitting path report the error
            return leave_one_out_scores(support, |rest: &[Example<Label>]| self.fit(rest));
        }
        let dim = dim.unwrap_or(0);
        let mean_of = |idx: &mut dyn Iterator<Item = usize>| {
            let mut sum = vec![0.0; dim];
            let mut count = 0usize;
            for i in idx {
                for (s, v) in sum.iter_mut().zip(encoded[i].x.as_slice()) {
                    *s += v;
                }
                count += 1;
            }
            FeatureVector::from_finite(sum.into_iter().map(|v| v / count as f64).collect())
        };
        let full: Vec<FeatureVector> = members.iter().map(|m| mean_of(&mut m.iter().copied())).collect();
        let mut scores = Vec::with_capacity(encoded.len());
        for (j, e) in encoded.iter().enumerate() {
            let c = labels.binary_search(&e.y).expect("label collected above");
            if members[c].len() == 1 {
                scores.push(0.0);
                continue;
            }
            let mut dists: Vec<f64> = full.iter().map(|p| p.distance(&e.x)).collect();
            dists[c] = mean_of(&mut members[c].iter().copied().filter(|&i| i != j)).distance(&e.x);
            scores.push(-softmax_neg(dists)[c]);
        }
        ScoreSample::new(scores)
    }
}

#[derive(Debug, Clone)]
pub struct RidgeFamily {
    pub encoder: Arc<Encoder>,
    pub lambda: f64,
    /// Candidate regularization strengths for [`ScorerFamily::meta_train`].
    pub lambda_grid: Vec<f64>,
}

impl RidgeFamily {
    pub fn new(encoder: Encoder, lambda: f64) -> Self {
        RidgeFamily {
            encoder: Arc::new(encoder),
            lambda,
            lambda_grid: Vec::new(),
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.lambda_grid = grid;
        self
    }

    fn fit_with(&self, support: &[Example<f64>], lambda: f64) -> Result<RidgeScorer> {
        let encoded = self.encoder.encode_all(support)?;
        let xs: Vec<FeatureVector> = encoded.iter().map(|e| e.x.clone()).collect();
        let ys: Vec<f64> = encoded.iter().map(|e| e.y).collect();
        Ok(RidgeScorer {
            encoder: Arc::clone(&self.encoder),
            model: fit_ridge(&xs, &ys, lambda)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RidgeScorer {
    encoder: Arc<Encoder>,
    model: RidgeModel,
}

impl RidgeScorer {
    pub fn model(&self) -> &RidgeModel {
        &self.model
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<f64> {
        self.model.predict(&*self.encoder.encode(x)?)
    }
}

impl Scorer<f64> for RidgeScorer {
    fn score(&self, x: &FeatureVector, y: &f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::NonFinite("candidate target".into()));
        }
        Ok((y - self.predict(x)?).abs())
    }
}

impl ScorerFamily for RidgeFamily {
    type Label = f64;
    type Scorer = RidgeScorer;

    fn fit(&self, support: &[Example<f64>]) -> Result<RidgeScorer> {
        self.fit_with(support, self.lambda)
    }

    /// Picks the grid value with the lowest mean squared held-out error.
    fn meta_train(&self, tasks: &[TaskPair<f64>]) -> Result<Self> {
        if self.lambda_grid.is_empty() {
            return Ok(self.clone());
        }
        let mut best = (f64::INFINITY, self.lambda);
        for &lambda in &self.lambda_grid {
            let mut total = 0.0;
            let mut count = 0usize;
            for (support, held_out) in tasks {
                let scorer = self.fit_with(support, lambda)?;
                for e in held_out.iter() {
                    total += scorer.score(&e.x, &e.y)?.powi(2);
                    count += 1;
                }
            }
            let mse = total / count.max(1) as f64;
            if mse < best.0 {
                best = (mse, lambda);
            }
        }
        Ok(RidgeFamily {
            lambda: best.1,
            ..self.clone()
        })
    }

    fn loo_scores(&self, support: &[Example<f64>]) -> Result<ScoreSample> {
        if self.lambda == 0.0 {
            return leave_one_out_scores(support, |rest: &[Example<f64>]| self.fit(rest));
        }
        let encoded = self.encoder.encode_all(support)?;
        let xs: Vec<FeatureVector> = encoded.iter().map(|e| e.x.clone()).collect();
        let ys: Vec<f64> = encoded.iter().map(|e| e.y).collect();
        ScoreSample::new(
            ridge_loo_residuals(&xs, &ys, self.lambda)?
                .into_iter()
                .map(f64::abs)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn projection_is_seeded_and_linear() {
        let a = Encoder::projection(3, 2, 9).unwrap();
        assert_eq!(a, Encoder::projection(3, 2, 9).unwrap());
        assert_ne!(a, Encoder::projection(3, 2, 10).unwrap());
        let x = fv(&[1.0, -2.0, 0.5]);
        let twice = fv(&[2.0, -4.0, 1.0]);
        let ex = a.encode(&x).unwrap();
        let e2 = a.encode(&twice).unwrap();
        for (u, v) in ex.as_slice().iter().zip(e2.as_slice()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
        assert!(a.encode(&fv(&[1.0])).is_err());
    }

    #[test]
    fn ridge_family_fast_loo_matches_generic() {
        let mut r = rng::stream(4, &[]);
        let support: Vec<Example<f64>> = (0..7)
            .map(|_| Example {
                x: fv(&(0..3).map(|_| r.sample(StandardNormal)).collect::<Vec<f64>>()),
                y: r.sample(StandardNormal),
            })
            .collect();
        let fam = RidgeFamily::new(Encoder::projection(3, 4, 1).unwrap(), 0.2);
        let fast = fam.loo_scores(&support).unwrap();
        let slow = leave_one_out_scores(&support, |rest: &[Example<f64>]| fam.fit(rest)).unwrap();
        for (a, b) in fast.values().iter().zip(slow.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn meta_train_prefers_small_lambda_on_noiseless_tasks() {
        let mut r = rng::stream(8, &[]);
        let w = [1.0, -2.0];
        let mut draw = |n: usize| -> Vec<Example<f64>> {
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
                    Example {
                        y: x[0] * w[0] + x[1] * w[1],
                        x: fv(&x),
                    }
                })
                .collect()
        };
        let data: Vec<_> = (0..5).map(|_| (draw(6), draw(20))).collect();
        let tasks: Vec<TaskPair<f64>> = data.iter().map(|(s, h)| (s.as_slice(), h.as_slice())).collect();
        let fam = RidgeFamily::new(Encoder::Identity, 1.0).with_grid(vec![100.0, 1e-3, 1.0]);
        assert_eq!(fam.meta_train(&tasks).unwrap().lambda, 1e-3);
    }

    #[test]
    fn missing_prototype_scores_zero() {
        let fam = PrototypeFamily::default();
        let support = vec![
            Example { x: fv(&[0.0]), y: 0 },
            Example { x: fv(&[1.0]), y: 1 },
            Example { x: fv(&[5.0]), y: 2 },
        ];
        let s = fam.fit(&support[..2]).unwrap();
        assert_eq!(s.score(&fv(&[5.0]), &2).unwrap(), 0.0);
        let loo = PrototypeFamily::default()
            .loo_scores(&[support.clone(), support].concat())
            .unwrap();
        assert_eq!(loo.len(), 6);
    }

    #[test]
    fn prototype_fast_loo_matches_refitting() {
        let mut r = rng::stream(6, &[]);
        for (n, ways, encoder) in [
            (12, 3, Encoder::Identity),
            (9, 4, Encoder::projection(3, 5, 2).unwrap()),
            (5, 3, Encoder::Identity),
        ] {
            let support: Vec<Example<Label>> = (0..n)
                .map(|i| Example {
                    x: fv(&(0..3).map(|_| r.sample(StandardNormal)).collect::<Vec<f64>>()),
                    y: (i * 7 + 1) % ways,
                })
                .collect();
            let fam = PrototypeFamily::new(encoder);
            let fast = fam.loo_scores(&support).unwrap();
            let slow = leave_one_out_scores(&support, |rest: &[Example<Label>]| fam.fit(rest)).unwrap();
            assert_eq!(fast.values(), slow.values());
        }
        let two = vec![
            Example { x: fv(&[0.0]), y: 0 },
            Example { x: fv(&[1.0]), y: 1 },
            Example { x: fv(&[2.0]), y: 1 },
        ];
        assert!(PrototypeFamily::default().loo_scores(&two).is_err());
    }
}
