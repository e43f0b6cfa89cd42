use super::{Example, FeatureVector, Label, Scorer};
use crate::error::{Error, Result};

/// Per-class mean vectors with labels in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel {
    labels: Vec<Label>,
    prototypes: Vec<FeatureVector>,
}

impl PrototypeModel {
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn prototypes(&self) -> &[FeatureVector] {
        &self.prototypes
    }

    pub fn prototype(&self, label: Label) -> Option<&FeatureVector> {
        self.index_of(label).map(|i| &self.prototypes[i])
    }

    fn index_of(&self, label: Label) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }
}

/// Fits one prototype per label present in `support`.
pub fn fit_prototypes(support: &[Example<Label>]) -> Result<PrototypeModel> {
    let mut labels: Vec<Label> = support.iter().map(|e| e.y).collect();
    labels.sort_unstable();
    labels.dedup();
    fit_prototypes_for(support, &labels)
}

/// Fits prototypes for an explicit label list; every declared label must
/// have at least one support example and every example a declared label.
pub fn fit_prototypes_for(support: &[Example<Label>], declared: &[Label]) -> Result<PrototypeModel> {
    let mut labels = declared.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Fit(format!(
            "prototype model needs at least 2 labels, got {}",
            labels.len()
        )));
    }
    let dim = support
        .first()
        .map(|e| e.x.dim())
        .ok_or_else(|| Error::Fit("empty support".into()))?;
    let mut sums = vec![vec![0.0; dim]; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for e in support {
        if e.x.dim() != dim {
            return Err(Error::arg(format!("feature dimension {} != {}", e.x.dim(), dim)));
        }
        let i = labels
            .binary_search(&e.y)
            .map_err(|_| Error::Fit(format!("support label {} not declared", e.y)))?;
        counts[i] += 1;
        for (s, v) in sums[i].iter_mut().zip(e.x.as_slice()) {
            *s += v;
        }
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fit(format!("label {} has no support examples", labels[i])));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| FeatureVector::from_finite(s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    Ok(PrototypeModel { labels, prototypes })
}

/// Softmax over negative Euclidean distances to each prototype, in the
/// model's label order.
pub fn proto_probs(x: &FeatureVector, model: &PrototypeModel) -> Result<Vec<f64>> {
    let dim = model.prototypes[0].dim();
    if x.dim() != dim {
        return Err(Error::arg(format!("feature dimension {} != {}", x.dim(), dim)));
    }
    Ok(softmax_neg_distance(x, &model.prototypes))
}

fn softmax_neg_distance(x: &FeatureVector, prototypes: &[FeatureVector]) -> Vec<f64> {
    softmax_neg(prototypes.iter().map(|c| c.distance(x)).collect())
}

/// Softmax of `-dists`, shifted by the smallest distance for stability.
pub(crate) fn softmax_neg(dists: Vec<f64>) -> Vec<f64> {
    let nearest = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = dists.iter().map(|d| (nearest - d).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// `−p(candidate | x)`.
pub fn proto_nonconformity(x: &FeatureVector, candidate: Label, model: &PrototypeModel) -> Result<f64> {
    let i = model
        .index_of(candidate)
        .ok_or_else(|| Error::arg(format!("unknown candidate label {candidate}")))?;
    Ok(-proto_probs(x, model)?[i])
}

impl Scorer<Label> for PrototypeModel {
    fn score(&self, x: &FeatureVector, y: &Label) -> Result<f64> {
        proto_nonconformity(x, *y, self)
    }
}
