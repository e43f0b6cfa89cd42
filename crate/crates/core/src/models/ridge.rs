use nalgebra::{DMatrix, DVector};

use super::{FeatureVector, Scorer};
use crate::error::{Error, Result};

/// Residual tolerance for the k×k dual solve, relative to ‖Y‖.
const RESIDUAL_TOLERANCE: f64 = 1e-6;
/// Smallest accepted squared Cholesky pivot ratio when `λ = 0`.
const MIN_PIVOT_RATIO: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    weights: Vec<f64>,
    reg: f64,
}

impl RidgeModel {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<f64> {
        if x.dim() != self.weights.len() {
            return Err(Error::arg(format!(
                "feature dimension {} != {}",
                x.dim(),
                self.weights.len()
            )));
        }
        Ok(x.dot(&self.weights))
    }
}

fn design(xs: &[FeatureVector], ys: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if xs.is_empty() {
        return Err(Error::arg("ridge fit needs at least one example"));
    }
    if xs.len() != ys.len() {
        return Err(Error::arg(format!("{} inputs but {} targets", xs.len(), ys.len())));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::NonFinite("ridge targets".into()));
    }
    let d = xs[0].dim();
    if let Some(bad) = xs.iter().find(|x| x.dim() != d) {
        return Err(Error::arg(format!("feature dimension {} != {}", bad.dim(), d)));
    }
    let x = DMatrix::from_fn(xs.len(), d, |i, j| xs[i].as_slice()[j]);
    Ok((x, DVector::from_column_slice(ys)))
}

/// `(XXᵀ + λI)` with a Cholesky factorization, rejecting near-singular
/// systems at `λ = 0`.
fn regularized_gram(x: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let k = x.nrows();
    let gram = x * x.transpose() + DMatrix::<f64>::identity(k, k) * lambda;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("XXᵀ + {lambda}·I is not positive definite")))?;
    if lambda == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if (min / max).powi(2) < MIN_PIVOT_RATIO {
            return Err(Error::Singular(format!(
                "XXᵀ has pivot ratio {:.3e}; use λ > 0",
                (min / max).powi(2)
            )));
        }
    }
    Ok((gram, chol))
}

/// Closed-form ridge in dual form: `w = Xᵀ (XXᵀ + λI)⁻¹ Y`.
pub fn fit_ridge(xs: &[FeatureVector], ys: &[f64], lambda: f64) -> Result<RidgeModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("ridge lambda must be finite and ≥ 0, got {lambda}")));
    }
    let (x, y) = design(xs, ys)?;
    let (gram, chol) = regularized_gram(&x, lambda)?;
    let a = chol.solve(&y);
    let residual = (&gram * &a - &y).norm();
    if residual > RESIDUAL_TOLERANCE * y.norm() {
        return Err(Error::Singular(format!(
            "dual solve residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE:e}·‖Y‖"
        )));
    }
    let w = x.transpose() * a;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge weights".into()));
    }
    Ok(RidgeModel {
        weights: w.iter().copied().collect(),
        reg: lambda,
    })
}

/// Signed leave-one-out residuals `y_j − ŷ_{−j}` without refitting.
///
/// With `G = (XXᵀ + λI)⁻¹` and dual coefficients `a = GY`, the residual of
/// example `j` under the fit on the other examples is `a_j / G_jj`. Requires
/// `λ > 0`.
pub fn ridge_loo_residuals(xs: &[FeatureVector], ys: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("closed-form LOO needs finite λ > 0, got {lambda}")));
    }
    let (x, y) = design(xs, ys)?;
    let (_, chol) = regularized_gram(&x, lambda)?;
    let g = chol.inverse();
    let a = &g * y;
    Ok((0..a.len()).map(|j| a[j] / g[(j, j)]).collect())
}

/// `|y − ⟨w, x⟩|`.
pub fn ridge_nonconformity(x: &FeatureVector, candidate_y: f64, model: &RidgeModel) -> Result<f64> {
    if !candidate_y.is_finite() {
        return Err(Error::NonFinite("candidate target".into()));
    }
    Ok((candidate_y - model.predict(x)?).abs())
}

impl Scorer<f64> for RidgeModel {
    fn score(&self, x: &FeatureVector, y: &f64) -> Result<f64> {
        ridge_nonconformity(x, *y, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{leave_one_out_scores, Example};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn random_problem(seed: u64, k: usize, d: usize) -> (Vec<FeatureVector>, Vec<f64>) {
        let mut rng = crate::rng::stream(seed, &[17]);
        let xs = (0..k)
            .map(|_| fv(&(0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>()))
            .collect();
        let ys = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        (xs, ys)
    }

    /// Gauss-Jordan with partial pivoting, independent of nalgebra.
    fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in 0..n {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    let pivot_row = a[col].clone();
                    for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                        *x -= f * p;
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    fn primal_oracle(xs: &[FeatureVector], ys: &[f64], lambda: f64) -> Vec<f64> {
        let d = xs[0].dim();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for (x, y) in xs.iter().zip(ys) {
            let v = x.as_slice();
            for i in 0..d {
                b[i] += v[i] * y;
                for j in 0..d {
                    a[i][j] += v[i] * v[j];
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        solve_dense(a, b)
    }

    #[test]
    fn interpolates_single_point() {
        let m = fit_ridge(&[fv(&[1.0])], &[2.0], 0.0).unwrap();
        assert!((m.weights()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn heavy_regularization_shrinks_to_zero() {
        let (xs, ys) = random_problem(3, 6, 3);
        let mut last = f64::INFINITY;
        for lambda in [1.0, 1e3, 1e6, 1e9] {
            let norm = fit_ridge(&xs, &ys, lambda)
                .unwrap()
                .weights()
                .iter()
                .map(|w| w.abs())
                .fold(0.0, f64::max);
            assert!(norm < last);
            last = norm;
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn dual_matches_primal() {
        for seed in 0..20 {
            let (xs, ys) = random_problem(seed, 8, 4);
            let w = fit_ridge(&xs, &ys, 0.1).unwrap();
            for (a, b) in w.weights().iter().zip(primal_oracle(&xs, &ys, 0.1)) {
                assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn singular_unregularized_system_is_reported() {
        // k > d makes XXᵀ rank-deficient
        let (xs, ys) = random_problem(1, 6, 2);
        assert!(matches!(fit_ridge(&xs, &ys, 0.0), Err(Error::Singular(_))));
        assert!(fit_ridge(&xs, &ys, -1.0).is_err());
    }

    #[test]
    fn absolute_error_score() {
        let m = fit_ridge(&[fv(&[1.0, 0.0]), fv(&[0.0, 1.0])], &[2.0, -1.0], 0.0).unwrap();
        let x = fv(&[0.5, 0.5]);
        let yhat = m.predict(&x).unwrap();
        assert_eq!(ridge_nonconformity(&x, yhat, &m).unwrap(), 0.0);
        for t in [0.1, 1.0, 7.5] {
            let up = ridge_nonconformity(&x, yhat + t, &m).unwrap();
            let down = ridge_nonconformity(&x, yhat - t, &m).unwrap();
            assert!((up - down).abs() < 1e-12);
        }
        let (xs, ys) = random_problem(9, 10, 3);
        let m = fit_ridge(&xs, &ys, 0.5).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let direct: f64 = (y - x.as_slice().iter().zip(m.weights()).map(|(a, b)| a * b).sum::<f64>()).abs();
            assert!((m.score(x, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_loo_matches_refits() {
        for seed in 0..10 {
            let (xs, ys) = random_problem(seed, 5, 3);
            let support: Vec<Example<f64>> = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| Example { x: x.clone(), y: *y })
                .collect();
            let brute = leave_one_out_scores(&support, |rest: &[Example<f64>]| {
                let rx: Vec<FeatureVector> = rest.iter().map(|e| e.x.clone()).collect();
                let ry: Vec<f64> = rest.iter().map(|e| e.y).collect();
                fit_ridge(&rx, &ry, 0.3)
            })
            .unwrap();
            let fast = ridge_loo_residuals(&xs, &ys, 0.3).unwrap();
            for (b, f) in brute.values().iter().zip(&fast) {
                assert!((b - f.abs()).abs() < 1e-10, "{b} vs {f}");
            }
        }
        let (xs, ys) = random_problem(0, 5, 3);
        assert!(ridge_loo_residuals(&xs, &ys, 0.0).is_err());
    }
}
