//! K-fold cross-fitted nuisance predictions: conditional outcome means per
//! arm and the propensity score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Covariates, Dataset, FoldAssignment};
use crate::error::LearnerError;
use crate::forest::{fit_regression_forest, predict_forest, ForestParams, RegressionForest};
use crate::logistic::{fit_logistic, LogisticModel, LogisticParams};
use crate::rng::derive_seed_path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMethod {
    Forest,
    Logistic,
}

/// A fitted propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PropensityModel {
    Forest(RegressionForest),
    Logistic(LogisticModel),
}

impl PropensityModel {
    pub fn fit(
        x: &Covariates,
        d: &[bool],
        method: PropensityMethod,
        forest_params: &ForestParams,
    ) -> Result<Self, LearnerError> {
        match method {
            PropensityMethod::Forest => {
                let target: Vec<f64> = d.iter().map(|&t| f64::from(u8::from(t))).collect();
                Ok(Self::Forest(fit_regression_forest(x, &target, forest_params)?))
            }
            PropensityMethod::Logistic => {
                let p = LogisticParams::default();
                Ok(Self::Logistic(fit_logistic(x, d, p.max_iter, p.tol, p.ridge)?))
            }
        }
    }

    /// Raw (unclipped) probabilities.
    pub fn predict(&self, x: &Covariates) -> Result<Vec<f64>, LearnerError> {
        match self {
            Self::Forest(f) => predict_forest(f, x),
            Self::Logistic(m) => m.predict_proba(x),
        }
    }
}

/// Clips a propensity into `[eps, 1 - eps]`.
pub fn clip_propensity(e: f64, eps: f64) -> f64 {
    e.clamp(eps, 1.0 - eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    /// Clipped into `[clip_eps, 1 - clip_eps]`.
    pub e_hat: Vec<f64>,
    pub folds: FoldAssignment,
    pub clip_eps: f64,
}

impl NuisanceEstimates {
    pub fn len(&self) -> usize {
        self.mu0_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu0_hat.is_empty()
    }
}

struct FoldPredictions {
    rows: Vec<usize>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    e: Vec<f64>,
}

/// Cross-fits `mu0`, `mu1` and `e` with `k` folds.
///
/// For each fold, `mu1` is fitted on treated rows outside the fold, `mu0` on
/// control rows outside the fold and the propensity on all rows outside the
/// fold; the fold's rows are then predicted. Forest seeds derive from
/// `forest_params.seed` and the fold index, fold membership from `seed`.
pub fn crossfit_nuisances(
    ds: &Dataset,
    k: usize,
    forest_params: &ForestParams,
    prop_method: PropensityMethod,
    clip_eps: f64,
    seed: u64,
) -> Result<NuisanceEstimates, LearnerError> {
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(LearnerError::InvalidParam(format!(
            "clip_eps = {clip_eps} must lie in (0, 0.5)"
        )));
    }
    let folds = make_folds(ds.n(), k, seed)?;
    let needed = 2 * forest_params.min_leaf;
    for fold in 0..k {
        let comp = folds.complement(fold);
        let treated = comp.iter().filter(|&&i| ds.d()[i]).count();
        for (arm, found) in [("treated", treated), ("control", comp.len() - treated)] {
            if found < needed {
                return Err(LearnerError::FoldArmTooSmall {
                    fold,
                    arm,
                    found,
                    needed,
                });
            }
        }
    }
    let per_fold: Vec<FoldPredictions> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let comp = folds.complement(fold);
            let rows = folds.members(fold);
            let (treated, control): (Vec<usize>, Vec<usize>) =
                comp.iter().partition(|&&i| ds.d()[i]);
            let fit_arm = |idx: &[usize], model: u64| {
                let sub = ds.select(idx);
                let params = forest_params.with_seed(derive_seed_path(forest_params.seed, &[fold as u64, model]));
                fit_regression_forest(sub.x(), sub.y(), &params)
            };
            let mu1 = fit_arm(&treated, 1)?;
            let mu0 = fit_arm(&control, 0)?;
            let train = ds.select(&comp);
            let prop_params =
                forest_params.with_seed(derive_seed_path(forest_params.seed, &[fold as u64, 2]));
            let prop = PropensityModel::fit(train.x(), train.d(), prop_method, &prop_params)?;
            let target = ds.x().select_rows(&rows);
            Ok(FoldPredictions {
                mu0: predict_forest(&mu0, &target)?,
                mu1: predict_forest(&mu1, &target)?,
                e: prop.predict(&target)?,
                rows,
            })
        })
        .collect::<Result<_, LearnerError>>()?;
    let n = ds.n();
    let (mut mu0_hat, mut mu1_hat, mut e_hat) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for fp in per_fold {
        for (j, &i) in fp.rows.iter().enumerate() {
            mu0_hat[i] = fp.mu0[j];
            mu1_hat[i] = fp.mu1[j];
            e_hat[i] = clip_propensity(fp.e[j], clip_eps);
        }
    }
    Ok(NuisanceEstimates {
        mu0_hat,
        mu1_hat,
        e_hat,
        folds,
        clip_eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x1[i] + if d[i] { 1.0 + x2[i] } else { 0.0 } + rng.random_range(-0.1..0.1))
            .collect();
        Dataset::new(y, d, Covariates::from_columns(vec![x1, x2]).unwrap()).unwrap()
    }

    fn small_forest() -> ForestParams {
        ForestParams {
            n_trees: 30,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_propensity(0.001, 0.01), 0.01);
        assert_eq!(clip_propensity(0.999, 0.01), 0.99);
        assert_eq!(clip_propensity(0.4, 0.01), 0.4);
    }

    #[test]
    fn deterministic_outcomes_per_arm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let y: Vec<f64> = d.iter().map(|&t| f64::from(u8::from(t))).collect();
        let x = Covariates::from_columns(vec![(0..n).map(|_| rng.random_range(0.0..1.0)).collect()]).unwrap();
        let ds = Dataset::new(y, d, x).unwrap();
        let nu = crossfit_nuisances(&ds, 2, &small_forest(), PropensityMethod::Forest, 0.01, 1).unwrap();
        assert!(nu.mu1_hat.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(nu.mu0_hat.iter().all(|&v| v.abs() < 1e-12));
        assert!(nu.e_hat.iter().all(|&e| (0.01..=0.99).contains(&e)));
    }

    #[test]
    fn out_of_fold_predictions_ignore_own_fold() {
        let ds = dataset(200, 11);
        let base = crossfit_nuisances(&ds, 4, &small_forest(), PropensityMethod::Logistic, 0.01, 2).unwrap();
        let fold = 1;
        let members = base.folds.members(fold);
        // Change every outcome inside the fold and refit.
        let mut y = ds.y().to_vec();
        for &i in &members {
            y[i] = 100.0 * y[i] - 7.0;
        }
        let changed = Dataset::new(y, ds.d().to_vec(), ds.x().clone()).unwrap();
        let other = crossfit_nuisances(&changed, 4, &small_forest(), PropensityMethod::Logistic, 0.01, 2).unwrap();
        for &i in &members {
            assert_eq!(base.mu0_hat[i], other.mu0_hat[i]);
            assert_eq!(base.mu1_hat[i], other.mu1_hat[i]);
            assert_eq!(base.e_hat[i], other.e_hat[i]);
        }
        // Permuting rows among the fold's positions moves predictions with
        // the rows.
        let mut perm: Vec<usize> = (0..ds.n()).collect();
        let last = members.len() - 1;
        for (j, &i) in members.iter().enumerate() {
            perm[i] = members[last - j];
        }
        let permuted = ds.select(&perm);
        let third = crossfit_nuisances(&permuted, 4, &small_forest(), PropensityMethod::Logistic, 0.01, 2).unwrap();
        for &i in &members {
            assert_eq!(third.mu1_hat[i], base.mu1_hat[perm[i]]);
            assert_eq!(third.e_hat[i], base.e_hat[perm[i]]);
        }
    }

    #[test]
    fn fold_complement_needs_both_arms() {
        let ds = dataset(40, 1);
        let d: Vec<bool> = (0..40).map(|i| i == 0).collect();
        let ds = Dataset::new(ds.y().to_vec(), d, ds.x().clone()).unwrap();
        assert!(matches!(
            crossfit_nuisances(&ds, 2, &small_forest(), PropensityMethod::Forest, 0.01, 1),
            Err(LearnerError::FoldArmTooSmall { .. })
        ));
    }
}
