//! Honest regression forests used for outcome and propensity regressions.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Feature};
use crate::error::LearnerError;
use crate::rng::rng_for;
use crate::split::{best_split, partition, SseCriterion, Split};

pub const FOREST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Share of each subsample reserved for estimating leaf means. `None`
    /// disables honesty.
    pub honest_fraction: Option<f64>,
    /// Share of rows drawn (without replacement) for each tree.
    pub subsample_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            honest_fraction: Some(0.5),
            subsample_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).min(p)
    }

    pub fn validate(&self, p: usize) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::InvalidParam(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be at least 1".into());
        }
        if let Some(m) = self.mtry {
            if m > p || (m == 0 && p > 0) {
                return bad(format!("mtry = {m} must lie in [1, p = {p}]"));
            }
        }
        if let Some(h) = self.honest_fraction {
            if !(h > 0.0 && h < 1.0) {
                return bad(format!("honest_fraction = {h} must lie in (0, 1)"));
            }
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!(
                "subsample_fraction = {} must lie in (0, 1]",
                self.subsample_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestNode {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub children: Option<(u32, u32)>,
    /// Leaf mean (for internal nodes, the mean of the estimation rows below).
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTree {
    pub nodes: Vec<ForestNode>,
}

impl ForestTree {
    fn predict_row(&self, x: &Covariates, i: usize) -> f64 {
        let mut pos = 0usize;
        loop {
            let node = &self.nodes[pos];
            match (&node.split, node.children) {
                (Some(split), Some((l, r))) => {
                    pos = if split.goes_left(x.get(i, split.feature())) {
                        l as usize
                    } else {
                        r as usize
                    };
                }
                _ => return node.value,
            }
        }
    }

    /// Number of estimation rows behind each leaf; exposed for tests.
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub params: ForestParams,
    pub features: Vec<Feature>,
    pub trees: Vec<ForestTree>,
}

impl RegressionForest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ForestFile {
            schema_version: FOREST_SCHEMA_VERSION,
            forest: self.clone(),
        })
        .expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LearnerError> {
        let file: ForestFile =
            serde_json::from_str(s).map_err(|e| LearnerError::InvalidParam(e.to_string()))?;
        if file.schema_version != FOREST_SCHEMA_VERSION {
            return Err(LearnerError::InvalidParam(format!(
                "unsupported forest schema_version {}",
                file.schema_version
            )));
        }
        Ok(file.forest)
    }
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    schema_version: u32,
    forest: RegressionForest,
}

/// Structure-growing node before leaf estimation.
struct GrowNode {
    split: Option<Split>,
    children: Option<(usize, usize)>,
}

fn grow_structure(
    x: &Covariates,
    y: &[f64],
    rows: Vec<usize>,
    params: &ForestParams,
    mtry: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GrowNode> {
    let p = x.n_features();
    let crit = SseCriterion {
        response: y,
        min_leaf: params.min_leaf,
    };
    let mut nodes: Vec<GrowNode> = Vec::new();
    // (rows, depth, parent position, is_left)
    let mut stack = vec![(rows, 0usize, None::<(usize, bool)>)];
    while let Some((rows, depth, parent)) = stack.pop() {
        let pos = nodes.len();
        nodes.push(GrowNode {
            split: None,
            children: None,
        });
        if let Some((q, is_left)) = parent {
            let (l, r) = nodes[q].children.unwrap_or((usize::MAX, usize::MAX));
            nodes[q].children = Some(if is_left { (pos, r) } else { (l, pos) });
        }
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * params.min_leaf || mtry == 0 {
            continue;
        }
        let m = rows.len() as f64;
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / m;
        let sse: f64 = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        let sum_sq: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
        let tol = 1e-12 * sse + 1e-14 * sum_sq;
        let features = sample(rng, p, mtry).into_vec();
        if let Some(best) = best_split(&crit, x, &rows, &features, tol) {
            if best.gain > tol {
                let (left, right) = partition(x, &rows, &best.split);
                nodes[pos].split = Some(best.split);
                stack.push((right, depth + 1, Some((pos, false))));
                stack.push((left, depth + 1, Some((pos, true))));
            }
        }
    }
    nodes
}

/// Routes estimation rows through the structure, collapses any split with an
/// empty side and stores leaf means.
fn estimate_leaves(
    structure: Vec<GrowNode>,
    x: &Covariates,
    y: &[f64],
    est_rows: &[usize],
) -> ForestTree {
    let mut sum = vec![0.0; structure.len()];
    let mut count = vec![0usize; structure.len()];
    for &i in est_rows {
        let mut pos = 0;
        loop {
            sum[pos] += y[i];
            count[pos] += 1;
            match (&structure[pos].split, structure[pos].children) {
                (Some(split), Some((l, r))) => {
                    pos = if split.goes_left(x.get(i, split.feature())) { l } else { r };
                }
                _ => break,
            }
        }
    }
    let mut nodes = Vec::new();
    let mut stack = vec![(0usize, None::<(usize, bool)>)];
    while let Some((old, parent)) = stack.pop() {
        let pos = nodes.len();
        let keep = match structure[old].children {
            Some((l, r)) => count[l] > 0 && count[r] > 0,
            None => false,
        };
        nodes.push(ForestNode {
            split: if keep { structure[old].split.clone() } else { None },
            children: None,
            value: sum[old] / count[old] as f64,
        });
        if let Some((q, is_left)) = parent {
            let node: &mut ForestNode = &mut nodes[q];
            let (l, r) = node.children.unwrap_or((u32::MAX, u32::MAX));
            node.children = Some(if is_left {
                (pos as u32, r)
            } else {
                (l, pos as u32)
            });
        }
        if keep {
            let (l, r) = structure[old].children.expect("kept node has children");
            stack.push((r, Some((pos, false))));
            stack.push((l, Some((pos, true))));
        }
    }
    ForestTree { nodes }
}

fn fit_tree(x: &Covariates, y: &[f64], params: &ForestParams, mtry: usize, index: usize) -> ForestTree {
    let n = x.n_rows();
    let mut rng = rng_for(params.seed, &[index as u64]);
    let size = ((params.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    let mut rows = sample(&mut rng, n, size).into_vec();
    match params.honest_fraction {
        Some(h) if rows.len() >= 2 => {
            rows.shuffle(&mut rng);
            let n_est = ((h * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
            let est = rows.split_off(rows.len() - n_est);
            let structure = grow_structure(x, y, rows, params, mtry, &mut rng);
            estimate_leaves(structure, x, y, &est)
        }
        _ => {
            let structure = grow_structure(x, y, rows.clone(), params, mtry, &mut rng);
            estimate_leaves(structure, x, y, &rows)
        }
    }
}

/// Fits a regression forest. Trees are grown in parallel; each tree draws
/// from its own random stream derived from `params.seed` and its index.
pub fn fit_regression_forest(
    x: &Covariates,
    y: &[f64],
    params: &ForestParams,
) -> Result<RegressionForest, LearnerError> {
    let n = x.n_rows();
    if y.len() != n {
        return Err(crate::error::DataError::LengthMismatch(format!(
            "y has {} values, x has {n} rows",
            y.len()
        ))
        .into());
    }
    params.validate(x.n_features())?;
    if n < 2 * params.min_leaf || n == 0 {
        return Err(LearnerError::InsufficientRows {
            needed: (2 * params.min_leaf).max(1),
            found: n,
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::InvalidParam("non-finite response".into()));
    }
    let mtry = params.resolved_mtry(x.n_features());
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| fit_tree(x, y, params, mtry, t))
        .collect();
    Ok(RegressionForest {
        params: params.clone(),
        features: x.features().to_vec(),
        trees,
    })
}

/// Mean of per-tree predictions for each row of `x_new`.
pub fn predict_forest(forest: &RegressionForest, x_new: &Covariates) -> Result<Vec<f64>, LearnerError> {
    let x = x_new.conform_to(&forest.features)?;
    let k = forest.trees.len() as f64;
    Ok((0..x.n_rows())
        .into_par_iter()
        .map(|i| forest.trees.iter().map(|t| t.predict_row(&x, i)).sum::<f64>() / k)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn uniform_x(n: usize, p: usize, seed: u64) -> Covariates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Covariates::from_columns(
            (0..p)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_response() {
        let x = uniform_x(100, 3, 1);
        let f = fit_regression_forest(&x, &[2.5; 100], &ForestParams { n_trees: 20, ..Default::default() }).unwrap();
        for v in predict_forest(&f, &x).unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_deep_tree_interpolates() {
        let x = uniform_x(50, 2, 2);
        let y: Vec<f64> = (0..50).map(|i| i as f64 * 0.37 - 3.0).collect();
        let params = ForestParams {
            n_trees: 1,
            mtry: Some(2),
            min_leaf: 1,
            max_depth: None,
            honest_fraction: None,
            subsample_fraction: 1.0,
            seed: 4,
        };
        let f = fit_regression_forest(&x, &y, &params).unwrap();
        let pred = predict_forest(&f, &x).unwrap();
        assert_eq!(pred, y);
    }

    #[test]
    fn step_function_out_of_sample() {
        // Oracle: the single split at x1 = 0 that a brute-force search over
        // all thresholds selects on the training data.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let x1: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x1.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = Covariates::from_columns(vec![x1.clone(), x2]).unwrap();

        let (mut best, mut best_t) = (f64::INFINITY, 0.0);
        let mut cands: Vec<f64> = x1.clone();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        for w in cands.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let sse = |left: bool| {
                let vals: Vec<f64> = (0..n).filter(|&i| (x1[i] <= t) == left).map(|i| y[i]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            };
            let total = sse(true) + sse(false);
            if total < best {
                best = total;
                best_t = t;
            }
        }
        assert_eq!(best_t, 0.0);

        let f = fit_regression_forest(&x, &y, &ForestParams { n_trees: 50, seed: 9, ..Default::default() }).unwrap();
        let test = uniform_x(500, 2, 6);
        let test = Covariates::from_columns(vec![
            test.column(0).iter().map(|v| if *v > 0.0 { 1.0 } else { -1.0 }).collect(),
            test.column(1).to_vec(),
        ])
        .unwrap();
        let pred = predict_forest(&f, &test).unwrap();
        let rmse = (pred
            .iter()
            .zip(test.column(0))
            .map(|(p, &v)| (p - if v > best_t { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            / 500.0)
            .sqrt();
        assert!(rmse < 0.1, "rmse {rmse}");
    }

    #[test]
    fn predictions_are_convex_combinations() {
        let x = uniform_x(200, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..200).map(|_| rng.random_range(-5.0..3.0)).collect();
        let f = fit_regression_forest(&x, &y, &ForestParams { n_trees: 30, ..Default::default() }).unwrap();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for v in predict_forest(&f, &uniform_x(100, 4, 9)).unwrap() {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn honest_leaves_hold_estimation_rows() {
        let x = uniform_x(300, 3, 10);
        let y: Vec<f64> = (0..300).map(|i| x.get(i, 0) * 2.0 + x.get(i, 1)).collect();
        let f = fit_regression_forest(&x, &y, &ForestParams { n_trees: 10, min_leaf: 1, ..Default::default() }).unwrap();
        for tree in &f.trees {
            for node in &tree.nodes {
                assert!(node.value.is_finite());
            }
        }
    }

    #[test]
    fn deterministic_order_independent_and_serializable() {
        let x = uniform_x(120, 3, 11);
        let y: Vec<f64> = (0..120).map(|i| x.get(i, 2).sin()).collect();
        let params = ForestParams { n_trees: 15, seed: 3, ..Default::default() };
        let a = fit_regression_forest(&x, &y, &params).unwrap();
        let b = fit_regression_forest(&x, &y, &params).unwrap();
        assert_eq!(a, b);
        let mut reversed = a.clone();
        reversed.trees.reverse();
        let (pa, pr) = (predict_forest(&a, &x).unwrap(), predict_forest(&reversed, &x).unwrap());
        for (u, v) in pa.iter().zip(&pr) {
            assert!((u - v).abs() < 1e-12);
        }
        let single = RegressionForest { trees: vec![a.trees[0].clone()], ..a.clone() };
        let ps = predict_forest(&single, &x).unwrap();
        for (i, v) in ps.iter().enumerate() {
            assert_eq!(*v, a.trees[0].predict_row(&x, i));
        }
        assert_eq!(RegressionForest::from_json(&a.to_json()).unwrap(), a);
        assert!(predict_forest(&a, &Covariates::from_rows(&[]).unwrap_or(Covariates::empty_columns(0))).is_err());
        let empty = Covariates::from_columns(vec![vec![], vec![], vec![]]).unwrap();
        assert!(predict_forest(&a, &empty).unwrap().is_empty());
    }

    #[test]
    fn parameter_errors() {
        let x = uniform_x(10, 2, 1);
        let y = vec![0.0; 10];
        assert!(matches!(
            fit_regression_forest(&x, &y, &ForestParams { mtry: Some(3), ..Default::default() }),
            Err(LearnerError::InvalidParam(_))
        ));
        assert!(matches!(
            fit_regression_forest(&x, &y, &ForestParams { min_leaf: 6, ..Default::default() }),
            Err(LearnerError::InsufficientRows { .. })
        ));
    }
}
