//! Ridge-penalized logistic regression fitted by Newton-Raphson (IRLS).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Feature};
use crate::error::LearnerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticParams {
    pub max_iter: usize,
    pub tol: f64,
    /// Penalty `ridge / 2 * |beta|^2` on the slopes (the intercept is not
    /// penalized).
    pub ridge: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept first, then one slope per expanded covariate.
    pub coefficients: Vec<f64>,
    pub terms: Vec<String>,
    pub features: Vec<Feature>,
    pub converged: bool,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intercept column followed by the reference-coded covariates.
fn design(x: &Covariates) -> (DMatrix<f64>, Vec<String>) {
    let expanded = x.expand(true);
    let n = x.n_rows();
    let k = expanded.columns.len() + 1;
    let mut m = DMatrix::from_element(n, k, 1.0);
    for (j, col) in expanded.columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[(i, j + 1)] = v;
        }
    }
    let mut terms = vec!["(intercept)".to_string()];
    terms.extend(expanded.names);
    (m, terms)
}

/// Maximizes the ridge-penalized log-likelihood by Newton steps. Convergence
/// is declared when the largest coefficient update falls below `tol`. If the
/// iteration limit is hit, or the Hessian becomes singular, the current
/// coefficients are returned with `converged = false`.
pub fn fit_logistic(
    x: &Covariates,
    d: &[bool],
    max_iter: usize,
    tol: f64,
    ridge: f64,
) -> Result<LogisticModel, LearnerError> {
    let n = x.n_rows();
    if d.len() != n {
        return Err(crate::error::DataError::LengthMismatch(format!(
            "d has {} values, x has {n} rows",
            d.len()
        ))
        .into());
    }
    if !(ridge >= 0.0) || !(tol > 0.0) {
        return Err(LearnerError::InvalidParam(format!(
            "ridge = {ridge} must be >= 0 and tol = {tol} > 0"
        )));
    }
    let (xm, terms) = design(x);
    let k = xm.ncols();
    if n < k {
        return Err(LearnerError::InsufficientRows { needed: k, found: n });
    }
    let treated = d.iter().filter(|&&t| t).count();
    if treated == 0 || treated == n {
        return Err(LearnerError::OneClass);
    }
    let target = DVector::from_iterator(n, d.iter().map(|&t| if t { 1.0 } else { 0.0 }));
    let mut penalty = DMatrix::identity(k, k) * ridge;
    penalty[(0, 0)] = 0.0;

    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iter {
        iterations = iter + 1;
        let prob = (&xm * &beta).map(sigmoid);
        let weights = prob.map(|p| p * (1.0 - p));
        let gradient = xm.transpose() * (&target - &prob) - &penalty * &beta;
        let mut weighted = xm.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let information = xm.transpose() * weighted + &penalty;
        let Some(chol) = information.cholesky() else {
            break;
        };
        let step = chol.solve(&gradient);
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        beta += &step;
        if step.amax() < tol {
            converged = true;
            break;
        }
    }
    Ok(LogisticModel {
        coefficients: beta.iter().copied().collect(),
        terms,
        features: x.features().to_vec(),
        converged,
        iterations,
    })
}

impl LogisticModel {
    pub fn predict_proba(&self, x_new: &Covariates) -> Result<Vec<f64>, LearnerError> {
        let x = x_new.conform_to(&self.features)?;
        let (xm, _) = design(&x);
        let beta = DVector::from_column_slice(&self.coefficients);
        Ok((xm * beta).iter().map(|&z| sigmoid(z)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only_matches_share() {
        let x = Covariates::empty_columns(10);
        let d: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let m = fit_logistic(&x, &d, 100, 1e-10, 0.0).unwrap();
        assert!(m.converged);
        for p in m.predict_proba(&x).unwrap() {
            assert!((p - 0.3).abs() < 1e-10);
        }
    }

    #[test]
    fn separable_data_flags_non_convergence() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let d: Vec<bool> = xs.iter().map(|&v| v >= 10.0).collect();
        let x = Covariates::from_columns(vec![xs]).unwrap();
        let m = fit_logistic(&x, &d, 50, 1e-8, 0.0).unwrap();
        assert!(!m.converged);
        assert!(m.predict_proba(&x).unwrap().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn errors() {
        let x = Covariates::from_columns(vec![vec![0.0, 1.0, 2.0]]).unwrap();
        assert_eq!(fit_logistic(&x, &[true; 3], 10, 1e-8, 0.0), Err(LearnerError::OneClass));
        let x = Covariates::from_columns(vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            fit_logistic(&x, &[true], 10, 1e-8, 0.0),
            Err(LearnerError::InsufficientRows { .. })
        ));
    }

    fn small_problem() -> (Covariates, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 60;
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n)
            .map(|i| rng.random_bool(sigmoid(0.3 + 0.8 * x1[i] - 0.5 * x2[i])))
            .collect();
        (Covariates::from_columns(vec![x1, x2]).unwrap(), d)
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let (x, d) = small_problem();
        let n = x.n_rows();
        // Plain gradient ascent on the mean log-likelihood.
        let rows: Vec<[f64; 3]> = (0..n).map(|i| [1.0, x.get(i, 0), x.get(i, 1)]).collect();
        let mut beta = [0.0f64; 3];
        for _ in 0..200_000 {
            let mut grad = [0.0; 3];
            for (r, &t) in rows.iter().zip(&d) {
                let z: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let resid = if t { 1.0 } else { 0.0 } - 1.0 / (1.0 + (-z).exp());
                for j in 0..3 {
                    grad[j] += resid * r[j] / n as f64;
                }
            }
            for j in 0..3 {
                beta[j] += 0.5 * grad[j];
            }
            if grad.iter().all(|g| g.abs() < 1e-13) {
                break;
            }
        }
        let m = fit_logistic(&x, &d, 100, 1e-12, 0.0).unwrap();
        assert!(m.converged);
        for (a, b) in m.coefficients.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn score_equations_hold() {
        let (x, d) = small_problem();
        let tol = 1e-9;
        let m = fit_logistic(&x, &d, 100, tol, 0.0).unwrap();
        let p = m.predict_proba(&x).unwrap();
        let n = x.n_rows() as f64;
        let cols = [vec![1.0; x.n_rows()], x.column(0).to_vec(), x.column(1).to_vec()];
        for col in &cols {
            let score: f64 = (0..x.n_rows())
                .map(|i| (if d[i] { 1.0 } else { 0.0 } - p[i]) * col[i])
                .sum::<f64>()
                / n;
            assert!(score.abs() < tol);
        }
    }
}
