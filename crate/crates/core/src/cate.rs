//! Meta-learners for conditional average treatment effects.

use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Dataset};
use crate::error::{DataError, LearnerError};
use crate::forest::{fit_regression_forest, predict_forest, ForestParams, RegressionForest};
use crate::nuisance::{PropensityMethod, PropensityModel};
use crate::rng::derive_seed;

pub const CATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateKind {
    TLearner,
    XLearner,
}

/// Weight `g(x)` placed on the control-side effect model `tau0` by the
/// X-learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum XWeight {
    Propensity,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CateModel {
    TLearner {
        mu0: RegressionForest,
        mu1: RegressionForest,
    },
    XLearner {
        mu0: RegressionForest,
        mu1: RegressionForest,
        tau0: RegressionForest,
        tau1: RegressionForest,
        weight: XWeight,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        propensity: Option<PropensityModel>,
    },
}

impl CateModel {
    pub fn kind(&self) -> CateKind {
        match self {
            Self::TLearner { .. } => CateKind::TLearner,
            Self::XLearner { .. } => CateKind::XLearner,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&CateFile {
            schema_version: CATE_SCHEMA_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LearnerError> {
        let file: CateFile =
            serde_json::from_str(s).map_err(|e| LearnerError::InvalidParam(e.to_string()))?;
        if file.schema_version != CATE_SCHEMA_VERSION {
            return Err(LearnerError::InvalidParam(format!(
                "unsupported cate schema_version {}",
                file.schema_version
            )));
        }
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct CateFile {
    schema_version: u32,
    model: CateModel,
}

fn arms(ds: &Dataset, min_leaf: usize) -> Result<(Vec<usize>, Vec<usize>), LearnerError> {
    let (treated, control): (Vec<usize>, Vec<usize>) = (0..ds.n()).partition(|&i| ds.d()[i]);
    let needed = 2 * min_leaf;
    for (arm, found) in [("treated", treated.len()), ("control", control.len())] {
        if found < needed {
            return Err(DataError::ArmTooSmall { arm, found, needed }.into());
        }
    }
    Ok((treated, control))
}

fn fit_on(ds: &Dataset, rows: &[usize], target: &[f64], params: &ForestParams) -> Result<RegressionForest, LearnerError> {
    fit_regression_forest(&ds.x().select_rows(rows), target, params)
}

fn outcome_models(
    ds: &Dataset,
    treated: &[usize],
    control: &[usize],
    params: &ForestParams,
) -> Result<(RegressionForest, RegressionForest), LearnerError> {
    let y_of = |rows: &[usize]| rows.iter().map(|&i| ds.y()[i]).collect::<Vec<_>>();
    let p0 = params.with_seed(derive_seed(params.seed, 0));
    let p1 = params.with_seed(derive_seed(params.seed, 1));
    let (mu0, mu1) = rayon::join(
        || fit_on(ds, control, &y_of(control), &p0),
        || fit_on(ds, treated, &y_of(treated), &p1),
    );
    Ok((mu0?, mu1?))
}

/// `tau(x) = mu1(x) - mu0(x)` with one forest per arm.
pub fn fit_t_learner(ds: &Dataset, forest_params: &ForestParams) -> Result<CateModel, LearnerError> {
    let (treated, control) = arms(ds, forest_params.min_leaf)?;
    let (mu0, mu1) = outcome_models(ds, &treated, &control, forest_params)?;
    Ok(CateModel::TLearner { mu0, mu1 })
}

/// Two-stage X-learner. Imputed effects `Y - mu0(X)` on treated rows and
/// `mu1(X) - Y` on control rows are regressed on `X` to give `tau1` and
/// `tau0`, which are blended as `g(x) * tau0(x) + (1 - g(x)) * tau1(x)`.
pub fn fit_x_learner(
    ds: &Dataset,
    forest_params: &ForestParams,
    prop_method: PropensityMethod,
    weight: XWeight,
) -> Result<CateModel, LearnerError> {
    if let XWeight::Constant(g) = weight {
        if !(0.0..=1.0).contains(&g) {
            return Err(LearnerError::InvalidParam(format!("constant weight {g} must lie in [0, 1]")));
        }
    }
    let (treated, control) = arms(ds, forest_params.min_leaf)?;
    let (mu0, mu1) = outcome_models(ds, &treated, &control, forest_params)?;
    let x_t = ds.x().select_rows(&treated);
    let x_c = ds.x().select_rows(&control);
    let d1: Vec<f64> = predict_forest(&mu0, &x_t)?
        .iter()
        .zip(&treated)
        .map(|(m0, &i)| ds.y()[i] - m0)
        .collect();
    let d0: Vec<f64> = predict_forest(&mu1, &x_c)?
        .iter()
        .zip(&control)
        .map(|(m1, &i)| m1 - ds.y()[i])
        .collect();
    let p0 = forest_params.with_seed(derive_seed(forest_params.seed, 2));
    let p1 = forest_params.with_seed(derive_seed(forest_params.seed, 3));
    let (tau0, tau1) = rayon::join(
        || fit_regression_forest(&x_c, &d0, &p0),
        || fit_regression_forest(&x_t, &d1, &p1),
    );
    let propensity = match weight {
        XWeight::Propensity => {
            let pp = forest_params.with_seed(derive_seed(forest_params.seed, 4));
            Some(PropensityModel::fit(ds.x(), ds.d(), prop_method, &pp)?)
        }
        XWeight::Constant(_) => None,
    };
    Ok(CateModel::XLearner {
        mu0,
        mu1,
        tau0: tau0?,
        tau1: tau1?,
        weight,
        propensity,
    })
}

pub fn predict_cate(model: &CateModel, x_new: &Covariates) -> Result<Vec<f64>, LearnerError> {
    match model {
        CateModel::TLearner { mu0, mu1 } => {
            let m0 = predict_forest(mu0, x_new)?;
            let m1 = predict_forest(mu1, x_new)?;
            Ok(m1.iter().zip(&m0).map(|(a, b)| a - b).collect())
        }
        CateModel::XLearner {
            tau0,
            tau1,
            weight,
            propensity,
            ..
        } => {
            let t0 = predict_forest(tau0, x_new)?;
            let t1 = predict_forest(tau1, x_new)?;
            let g = match (weight, propensity) {
                (XWeight::Constant(c), _) => vec![*c; t0.len()],
                (XWeight::Propensity, Some(p)) => p.predict(x_new)?.into_iter().map(|e| e.clamp(0.0, 1.0)).collect(),
                (XWeight::Propensity, None) => {
                    return Err(LearnerError::InvalidParam("x-learner is missing its propensity model".into()))
                }
            };
            Ok((0..t0.len()).map(|i| g[i] * t0[i] + (1.0 - g[i]) * t1[i]).collect())
        }
    }
}
