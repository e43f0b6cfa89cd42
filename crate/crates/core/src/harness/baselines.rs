use crate::conformal::{check_level, PredictionSet};
use crate::error::{Error, Result};
use crate::models::Label;

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::arg("probability vector is empty"));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::NonFinite("probability vector".into()));
    }
    Ok(())
}

/// Label indices ordered by decreasing probability, ties by index.
fn ranked(probs: &[f64]) -> Vec<Label> {
    let mut order: Vec<Label> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// The `k` most probable labels.
pub fn top_k_baseline(probs: &[f64], k: usize) -> Result<PredictionSet> {
    check_probs(probs)?;
    if k == 0 || k > probs.len() {
        return Err(Error::arg(format!("k = {k} outside 1..={}", probs.len())));
    }
    let mut labels = ranked(probs);
    labels.truncate(k);
    Ok(PredictionSet::from_labels(labels, None))
}

/// Most probable labels until their cumulative mass exceeds `1 − ε`; the
/// label that crosses the threshold is kept. If rounding keeps the total at
/// or below `1 − ε`, every label is returned.
pub fn naive_baseline(probs: &[f64], epsilon: f64) -> Result<PredictionSet> {
    check_probs(probs)?;
    check_level("epsilon", epsilon)?;
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for label in ranked(probs) {
        kept.push(label);
        mass += probs[label];
        if mass > 1.0 - epsilon {
            break;
        }
    }
    Ok(PredictionSet::from_labels(kept, Some(1.0 - epsilon)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(top_k_baseline(&p, 1).unwrap().labels().unwrap(), &[1]);
        assert_eq!(top_k_baseline(&p, 3).unwrap().size(), 3.0);
        assert_eq!(naive_baseline(&[0.9, 0.1], 0.2).unwrap().labels().unwrap(), &[0]);
        assert_eq!(naive_baseline(&[0.1; 10], 0.05).unwrap().size(), 10.0);
        assert!(top_k_baseline(&p, 4).is_err());
        assert!(naive_baseline(&[], 0.1).is_err());
    }

    #[test]
    fn ties_follow_label_order() {
        assert_eq!(top_k_baseline(&[0.25; 4], 2).unwrap().labels().unwrap(), &[0, 1]);
    }

    #[test]
    fn degenerate_mass() {
        let p = [0.0, 1.0, 0.0];
        assert_eq!(top_k_baseline(&p, 1).unwrap().labels().unwrap(), &[1]);
        assert_eq!(naive_baseline(&p, 0.01).unwrap().labels().unwrap(), &[1]);
    }
}
