//! Monte Carlo studies of the full pipeline on synthetic populations.
//!
//! A population holds covariates, an untreated outcome `y0`, a true
//! propensity `pi` and individual effects
//! `xi = -a * phi(pi / max pi) - max(-a * phi(pi / max pi))`, with `phi` the
//! standard normal density, so that `xi <= 0` and `max xi = 0`. A validation
//! set is held out; samples are drawn from the rest. Each replication draws a
//! sample, assigns treatment, selects a grouping by cross-validation on the
//! training half and estimates its GATEs on the honest half. Validation
//! points are predicted by the GATE of their leaf.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cate::{fit_t_learner, fit_x_learner, predict_cate, XWeight};
use crate::data::{split_honest, Covariates, Dataset};
use crate::error::{GateError, SimError};
use crate::forest::ForestParams;
use crate::gate::{dr_scores, gate_diff_means, gate_from_scores, GateTable, VarianceKind};
use crate::nuisance::{crossfit_nuisances, PropensityMethod};
use crate::prune::{cross_validate_alpha, GrowTarget};
use crate::rng::{derive_seed_path, rng_for};
use crate::tree::{apply_tree, StopRules};

pub const SIM_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `D ~ Bernoulli(0.5)`.
    Random,
    /// `D ~ Bernoulli(pi(X))`.
    Propensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Aggregation tree on X-learner CATEs.
    AtX,
    /// Aggregation tree on T-learner CATEs.
    AtT,
    /// Adaptive causal tree.
    Ct,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Self::AtX => "AT_x",
            Self::AtT => "AT_t",
            Self::Ct => "CT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Honesty {
    /// Grouping on the training half, GATEs on the honest half.
    Honest,
    /// Grouping and GATEs on the full sample.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSpec {
    pub population_size: usize,
    pub validation_size: usize,
    /// Standard-normal covariates; at least 2.
    pub n_continuous: usize,
    /// Bernoulli(0.5) covariates; at least 1.
    pub n_binary: usize,
    pub noise_sd: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            population_size: 20_000,
            validation_size: 2_000,
            n_continuous: 4,
            n_binary: 3,
            noise_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub forest: ForestParams,
    pub stop: StopRules,
    pub cv_folds: usize,
    pub nuisance_folds: usize,
    pub propensity: PropensityMethod,
    pub clip_eps: f64,
    pub level: f64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            forest: ForestParams {
                n_trees: 200,
                ..ForestParams::default()
            },
            stop: StopRules {
                cp: 0.01,
                ..StopRules::default()
            },
            cv_folds: 5,
            nuisance_folds: 5,
            propensity: PropensityMethod::Logistic,
            clip_eps: 0.01,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationSpec,
    pub sample_sizes: Vec<usize>,
    pub regimes: Vec<Regime>,
    /// Values of the heterogeneity parameter `a`.
    pub heterogeneity: Vec<f64>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_honesty")]
    pub honesty: Vec<Honesty>,
    #[serde(default)]
    pub learner: LearnerSpec,
}

fn default_honesty() -> Vec<Honesty> {
    vec![Honesty::Honest]
}

impl SimConfig {
    pub fn from_toml(s: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.schema_version != SIM_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let p = &self.population;
        if p.n_continuous < 2 || p.n_binary < 1 {
            return bad("need at least 2 continuous and 1 binary covariate".into());
        }
        if p.validation_size == 0 || 2 * p.validation_size > p.population_size {
            return bad(format!(
                "validation_size = {} must be positive and at most half of population_size = {}",
                p.validation_size, p.population_size
            ));
        }
        if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
            return bad(format!("noise_sd = {} must be finite and non-negative", p.noise_sd));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        for list_empty in [
            self.sample_sizes.is_empty(),
            self.regimes.is_empty(),
            self.heterogeneity.is_empty(),
            self.estimators.is_empty(),
            self.honesty.is_empty(),
        ] {
            if list_empty {
                return bad("sample_sizes, regimes, heterogeneity, estimators and honesty must be non-empty".into());
            }
        }
        let pool = p.population_size - p.validation_size;
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n > pool || n < 4) {
            return bad(format!("sample size {n} must lie in [4, {pool}]"));
        }
        if let Some(a) = self.heterogeneity.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return bad(format!("heterogeneity {a} must be finite and non-negative"));
        }
        let l = &self.learner;
        if l.cv_folds < 2 || l.nuisance_folds < 2 {
            return bad("cv_folds and nuisance_folds must be at least 2".into());
        }
        if !(l.level > 0.0 && l.level < 1.0) {
            return bad(format!("level = {} must lie in (0, 1)", l.level));
        }
        if !(l.clip_eps > 0.0 && l.clip_eps < 0.5) {
            return bad(format!("clip_eps = {} must lie in (0, 0.5)", l.clip_eps));
        }
        l.forest
            .validate(p.n_continuous + p.n_binary)
            .map_err(|e| SimError::Config(e.to_string()))?;
        l.stop.validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPopulation {
    pub x: Covariates,
    /// Conditional mean of `y0`.
    pub mu0: Vec<f64>,
    pub y0: Vec<f64>,
    pub pi: Vec<f64>,
    pub xi: Vec<f64>,
    pub validation_idx: Vec<usize>,
    /// Rows available for sampling.
    pub pool_idx: Vec<usize>,
    pub heterogeneity: f64,
}

impl SynthPopulation {
    pub fn y1(&self, i: usize) -> f64 {
        self.y0[i] + self.xi[i]
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `-a * phi(pi / max pi)` shifted so that its maximum is zero.
pub fn individual_effects(pi: &[f64], a: f64) -> Vec<f64> {
    let top = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = pi.iter().map(|&p| -a * normal_pdf(p / top)).collect();
    let shift = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|r| r - shift).collect()
}

/// Draws a population. Covariates, noise and the validation set depend on
/// `seed` only, so populations differing in `a` share everything but `xi`.
///
/// Propensity: `logistic(-0.3 + 0.8 x1 - 0.6 x2 + 0.7 b1)`.
/// Baseline: `1 + 0.8 x1 + 0.5 x2 + 0.5 b1 + sin(x2)`.
pub fn build_population(spec: &PopulationSpec, a: f64, seed: u64) -> Result<SynthPopulation, SimError> {
    if spec.n_continuous < 2 || spec.n_binary < 1 || 2 * spec.validation_size > spec.population_size {
        return Err(SimError::Config("degenerate population spec".into()));
    }
    let n = spec.population_size;
    let mut rng = rng_for(seed, &[0]);
    let mut columns = Vec::with_capacity(spec.n_continuous + spec.n_binary);
    for _ in 0..spec.n_continuous {
        columns.push((0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>());
    }
    for _ in 0..spec.n_binary {
        columns.push((0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect());
    }
    let (x1, x2, b1) = (&columns[0], &columns[1], &columns[spec.n_continuous]);
    let pi: Vec<f64> = (0..n).map(|i| logistic(-0.3 + 0.8 * x1[i] - 0.6 * x2[i] + 0.7 * b1[i])).collect();
    let mu0: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.8 * x1[i] + 0.5 * x2[i] + 0.5 * b1[i] + x2[i].sin())
        .collect();
    let y0: Vec<f64> = mu0
        .iter()
        .map(|m| {
            let e: f64 = StandardNormal.sample(&mut rng);
            m + spec.noise_sd * e
        })
        .collect();
    let xi = individual_effects(&pi, a);
    let mut validation_idx = sample(&mut rng, n, spec.validation_size).into_vec();
    validation_idx.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &validation_idx {
        is_val[i] = true;
    }
    let pool_idx = (0..n).filter(|&i| !is_val[i]).collect();
    let names: Vec<String> = (1..=spec.n_continuous)
        .map(|j| format!("x{j}"))
        .chain((1..=spec.n_binary).map(|j| format!("b{j}")))
        .collect();
    let features = names.into_iter().map(crate::data::Feature::numeric).collect();
    let x = Covariates::new(features, columns)?;
    Ok(SynthPopulation {
        x,
        mu0,
        y0,
        pi,
        xi,
        validation_idx,
        pool_idx,
        heterogeneity: a,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub d: Vec<bool>,
    /// Propensities clipped into `[clip, 1 - clip]` before drawing.
    pub n_clipped: usize,
}

/// Independent Bernoulli draws for the rows `sample_idx` of `pop`.
pub fn assign_treatment(
    pop: &SynthPopulation,
    sample_idx: &[usize],
    regime: Regime,
    clip: f64,
    seed: u64,
) -> Assignment {
    let mut rng = rng_for(seed, &[1]);
    let mut n_clipped = 0;
    let d = sample_idx
        .iter()
        .map(|&i| {
            let p = match regime {
                Regime::Random => 0.5,
                Regime::Propensity => {
                    let c = pop.pi[i].clamp(clip, 1.0 - clip);
                    if c != pop.pi[i] {
                        n_clipped += 1;
                    }
                    c
                }
            };
            rng.random_bool(p)
        })
        .collect();
    Assignment { d, n_clipped }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    /// Prediction for each validation point.
    pub predictions: Vec<f64>,
    pub leaves: usize,
    /// Leaves whose confidence interval covers the mean of `xi` over the
    /// leaf's estimation rows. Leaves with an undefined interval count as
    /// misses.
    pub covered: usize,
    pub n_clipped: usize,
}

/// The sample drawn by a replication: row indices into the population and
/// the assignment.
pub fn draw_sample(pop: &SynthPopulation, sample_size: usize, regime: Regime, clip: f64, seed: u64) -> (Vec<usize>, Assignment) {
    let mut rng = rng_for(seed, &[0]);
    let idx: Vec<usize> = sample(&mut rng, pop.pool_idx.len(), sample_size)
        .into_iter()
        .map(|k| pop.pool_idx[k])
        .collect();
    let assignment = assign_treatment(pop, &idx, regime, clip, seed);
    (idx, assignment)
}

#[allow(clippy::too_many_arguments)]
pub fn run_replication(
    pop: &SynthPopulation,
    learner: &LearnerSpec,
    sample_size: usize,
    regime: Regime,
    estimator: Estimator,
    honesty: Honesty,
    seed: u64,
) -> Result<Replication, SimError> {
    let (idx, assignment) = draw_sample(pop, sample_size, regime, learner.clip_eps, seed);
    let y: Vec<f64> = idx
        .iter()
        .zip(&assignment.d)
        .map(|(&i, &t)| if t { pop.y1(i) } else { pop.y0[i] })
        .collect();
    let ds = Dataset::new(y, assignment.d.clone(), pop.x.select_rows(&idx))?;
    let (train, est) = match honesty {
        Honesty::Honest => {
            let s = split_honest(ds.n(), 0.5, derive_seed_path(seed, &[2]))?;
            (ds.select(&s.train_idx), s.honest_idx)
        }
        Honesty::Adaptive => (ds.clone(), (0..ds.n()).collect()),
    };
    let est_ds = ds.select(&est);
    let forest = learner.forest.with_seed(derive_seed_path(seed, &[3]));
    let cv_seed = derive_seed_path(seed, &[4]);
    let cv = match estimator {
        Estimator::AtX | Estimator::AtT => {
            let model = if estimator == Estimator::AtX {
                fit_x_learner(&train, &forest, learner.propensity, XWeight::Propensity)?
            } else {
                fit_t_learner(&train, &forest)?
            };
            let tau_hat = predict_cate(&model, train.x())?;
            cross_validate_alpha(train.x(), GrowTarget::Aggregation { tau_hat: &tau_hat }, &learner.stop, learner.cv_folds, cv_seed)?
        }
        Estimator::Ct => cross_validate_alpha(
            train.x(),
            GrowTarget::Causal {
                y: train.y(),
                d: train.d(),
            },
            &learner.stop,
            learner.cv_folds,
            cv_seed,
        )?,
    };
    let tree = cv.selected();
    let labels = apply_tree(tree, est_ds.x())?;
    let gates: GateTable = match estimator {
        Estimator::AtX | Estimator::AtT => {
            let nuis = crossfit_nuisances(
                &est_ds,
                learner.nuisance_folds,
                &learner.forest.with_seed(derive_seed_path(seed, &[5])),
                learner.propensity,
                learner.clip_eps,
                derive_seed_path(seed, &[6]),
            )?;
            let scores = dr_scores(est_ds.y(), est_ds.d(), &nuis)?;
            gate_from_scores(&scores, &labels, learner.level, VarianceKind::Hc0)?
        }
        Estimator::Ct => gate_diff_means(est_ds.y(), est_ds.d(), &labels, learner.level, VarianceKind::Hc0)?,
    };
    let leaves = gates.rows.len();
    if leaves != tree.n_leaves() {
        return Err(GateError::EmptyLeaf(leaves + 1).into());
    }
    let mut truth_sum = vec![0.0; leaves];
    for (k, &l) in labels.iter().enumerate() {
        truth_sum[l - 1] += pop.xi[idx[est[k]]];
    }
    let covered = gates
        .rows
        .iter()
        .filter(|r| {
            let truth = truth_sum[r.leaf - 1] / r.n as f64;
            matches!((r.ci_low, r.ci_high), (Some(lo), Some(hi)) if lo <= truth && truth <= hi)
        })
        .count();
    let val_labels = apply_tree(tree, &pop.x.select_rows(&pop.validation_idx))?;
    let predictions = val_labels.iter().map(|&l| gates.rows[l - 1].beta_hat).collect();
    Ok(Replication {
        predictions,
        leaves,
        covered,
        n_clipped: assignment.n_clipped,
    })
}

/// Per-point accuracy over replications, with divisor `R` throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    pub bias: f64,
    pub sd: f64,
}

pub fn point_metrics(truth: &[f64], runs: &[Replication]) -> Vec<PointMetrics> {
    let r = runs.len() as f64;
    (0..truth.len())
        .map(|j| {
            let mean = runs.iter().map(|run| run.predictions[j]).sum::<f64>() / r;
            let mse = runs.iter().map(|run| (run.predictions[j] - truth[j]).powi(2)).sum::<f64>() / r;
            let var = runs.iter().map(|run| (run.predictions[j] - mean).powi(2)).sum::<f64>() / r;
            PointMetrics {
                rmse: mse.sqrt(),
                bias: mean - truth[j],
                sd: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub rmse: f64,
    pub abs_bias: f64,
    pub sd: f64,
    pub coverage: f64,
    pub mean_leaves: f64,
    pub runs: usize,
    pub failed: usize,
    pub clipped_assignments: usize,
    /// Largest `|rmse^2 - bias^2 - sd^2|` over validation points.
    pub max_decomposition_error: f64,
}

/// Aggregates replications. Failed replications are counted and excluded.
pub fn summarize(truth: &[f64], runs: &[Result<Replication, SimError>]) -> Result<CellMetrics, SimError> {
    let ok: Vec<Replication> = runs.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    if ok.is_empty() {
        return Err(SimError::EmptyRuns);
    }
    let points = point_metrics(truth, &ok);
    let m = points.len().max(1) as f64;
    let leaves: usize = ok.iter().map(|r| r.leaves).sum();
    Ok(CellMetrics {
        rmse: points.iter().map(|p| p.rmse).sum::<f64>() / m,
        abs_bias: points.iter().map(|p| p.bias.abs()).sum::<f64>() / m,
        sd: points.iter().map(|p| p.sd).sum::<f64>() / m,
        coverage: ok.iter().map(|r| r.covered).sum::<usize>() as f64 / leaves as f64,
        mean_leaves: leaves as f64 / ok.len() as f64,
        runs: ok.len(),
        failed: runs.len() - ok.len(),
        clipped_assignments: ok.iter().map(|r| r.n_clipped).sum(),
        max_decomposition_error: points
            .iter()
            .map(|p| (p.rmse.powi(2) - p.bias.powi(2) - p.sd.powi(2)).abs())
            .fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub estimator: Estimator,
    pub honesty: Honesty,
    pub regime: Regime,
    pub heterogeneity: f64,
    pub sample_size: usize,
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub seed: u64,
    pub replications: usize,
    pub cells: Vec<SimCell>,
}

/// Progress notice emitted after each cell.
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport, SimError> {
    run_simulation_with_progress(cfg, |_| {})
}

/// Runs every (heterogeneity, regime, sample size, estimator, honesty) cell.
/// Replications run in parallel. Replication `r` of a given
/// (heterogeneity, regime, sample size) draws the same sample for every
/// estimator and honesty variant.
pub fn run_simulation_with_progress(
    cfg: &SimConfig,
    mut progress: impl FnMut(Progress),
) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let total = cfg.heterogeneity.len()
        * cfg.regimes.len()
        * cfg.sample_sizes.len()
        * cfg.estimators.len()
        * cfg.honesty.len();
    let mut cells = Vec::with_capacity(total);
    let pop_seed = derive_seed_path(cfg.seed, &[0]);
    for &a in &cfg.heterogeneity {
        let pop = build_population(&cfg.population, a, pop_seed)?;
        let truth: Vec<f64> = pop.validation_idx.iter().map(|&i| pop.xi[i]).collect();
        for (ri, &regime) in cfg.regimes.iter().enumerate() {
            for (ni, &n) in cfg.sample_sizes.iter().enumerate() {
                for &estimator in &cfg.estimators {
                    for &honesty in &cfg.honesty {
                        let runs: Vec<Result<Replication, SimError>> = (0..cfg.replications)
                            .into_par_iter()
                            .map(|r| {
                                let seed = derive_seed_path(cfg.seed, &[1, ri as u64, ni as u64, r as u64]);
                                run_replication(&pop, &cfg.learner, n, regime, estimator, honesty, seed)
                            })
                            .collect();
                        cells.push(SimCell {
                            estimator,
                            honesty,
                            regime,
                            heterogeneity: a,
                            sample_size: n,
                            metrics: summarize(&truth, &runs)?,
                        });
                        progress(Progress {
                            done: cells.len(),
                            total,
                        });
                    }
                }
            }
        }
    }
    Ok(SimReport {
        schema_version: SIM_SCHEMA_VERSION,
        seed: cfg.seed,
        replications: cfg.replications,
        cells,
    })
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Five panels (RMSE, |Bias|, SD, coverage, leaves) with one row per
    /// estimator variant and one column per design point.
    pub fn to_text(&self) -> String {
        let mut columns: Vec<(Regime, u64, usize)> = Vec::new();
        let mut rows: Vec<(Estimator, Honesty)> = Vec::new();
        for c in &self.cells {
            let col = (c.regime, c.heterogeneity.to_bits(), c.sample_size);
            if !columns.contains(&col) {
                columns.push(col);
            }
            if !rows.contains(&(c.estimator, c.honesty)) {
                rows.push((c.estimator, c.honesty));
            }
        }
        let header: Vec<String> = std::iter::once(String::new())
            .chain(columns.iter().map(|(reg, a, n)| {
                let reg = match reg {
                    Regime::Random => "rand",
                    Regime::Propensity => "prop",
                };
                format!("{reg} a={} n={n}", f64::from_bits(*a))
            }))
            .collect();
        let panels: [(&str, fn(&CellMetrics) -> f64, usize); 5] = [
            ("RMSE", |m| m.rmse, 4),
            ("|Bias|", |m| m.abs_bias, 4),
            ("SD", |m| m.sd, 4),
            ("Coverage", |m| m.coverage, 3),
            ("Leaves", |m| m.mean_leaves, 2),
        ];
        let mut out = String::new();
        for (k, (title, get, digits)) in panels.iter().enumerate() {
            out.push_str(&format!("Panel {}: {title}\n", k + 1));
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|&(est, hon)| {
                    let mut line = vec![match hon {
                        Honesty::Honest => est.label().to_string(),
                        Honesty::Adaptive => format!("{} (adaptive)", est.label()),
                    }];
                    for &(reg, a, n) in &columns {
                        let cell = self.cells.iter().find(|c| {
                            c.estimator == est
                                && c.honesty == hon
                                && c.regime == reg
                                && c.heterogeneity.to_bits() == a
                                && c.sample_size == n
                        });
                        line.push(cell.map_or("-".into(), |c| format!("{:.*}", digits, get(&c.metrics))));
                    }
                    line
                })
                .collect();
            out.push_str(&crate::table::render_rows(&header, &body));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SimConfig {
        SimConfig {
            schema_version: 1,
            seed: 7,
            population: PopulationSpec {
                population_size: 3000,
                validation_size: 200,
                ..Default::default()
            },
            sample_sizes: vec![400],
            regimes: vec![Regime::Random],
            heterogeneity: vec![4.0],
            replications: 3,
            estimators: vec![Estimator::AtT, Estimator::Ct],
            honesty: vec![Honesty::Honest],
            learner: LearnerSpec {
                forest: ForestParams {
                    n_trees: 20,
                    ..Default::default()
                },
                nuisance_folds: 2,
                cv_folds: 3,
                ..Default::default()
            },
        }
    }

    #[test]
    fn effects_are_non_positive_with_zero_max() {
        let pop = build_population(&PopulationSpec::default(), 4.0, 1).unwrap();
        assert!(pop.xi.iter().all(|&v| v <= 0.0));
        assert_eq!(pop.xi.iter().copied().fold(f64::NEG_INFINITY, f64::max), 0.0);
        assert!(pop.pi.iter().all(|&p| p > 0.0 && p < 1.0));
        let zero = build_population(&PopulationSpec::default(), 0.0, 1).unwrap();
        assert!(zero.xi.iter().all(|&v| v == 0.0));
        assert_eq!(zero.y0, pop.y0);
        assert_eq!(pop.validation_idx.len() + pop.pool_idx.len(), pop.x.n_rows());
    }

    #[test]
    fn mode_of_density_gives_most_negative_effect() {
        // pi / max pi near 0 sits at the density's mode.
        let xi = individual_effects(&[0.01, 0.5, 1.0], 2.0);
        let by_hand = |p: f64| -2.0 * normal_pdf(p) + 2.0 * normal_pdf(1.0);
        for (v, p) in xi.iter().zip([0.01, 0.5, 1.0]) {
            assert!((v - by_hand(p)).abs() < 1e-15);
        }
        assert!(xi[0] < xi[1] && xi[1] < xi[2]);
    }

    #[test]
    fn assignment_regimes() {
        let pop = build_population(&PopulationSpec::default(), 1.0, 2).unwrap();
        let a = assign_treatment(&pop, &pop.pool_idx, Regime::Random, 0.01, 3);
        let share = a.d.iter().filter(|&&t| t).count() as f64 / a.d.len() as f64;
        assert!((share - 0.5).abs() < 3.0 * (0.25 / a.d.len() as f64).sqrt());
        assert_eq!(a, assign_treatment(&pop, &pop.pool_idx, Regime::Random, 0.01, 3));
        let mut sure = pop.clone();
        sure.pi = vec![1.0; sure.pi.len()];
        let b = assign_treatment(&sure, &sure.pool_idx, Regime::Propensity, 0.01, 3);
        assert_eq!(b.n_clipped, sure.pool_idx.len());
        assert!(b.d.iter().filter(|&&t| t).count() as f64 > 0.97 * b.d.len() as f64);
    }

    #[test]
    fn summary_formulas() {
        let run = |p: Vec<f64>| Ok(Replication {
            predictions: p,
            leaves: 2,
            covered: 1,
            n_clipped: 0,
        });
        let exact = summarize(&[0.0, 1.0], &[run(vec![0.0, 1.0]), run(vec![0.0, 1.0])]).unwrap();
        assert_eq!((exact.rmse, exact.abs_bias, exact.sd), (0.0, 0.0, 0.0));
        let constant = summarize(&[0.0], &[run(vec![0.3]), run(vec![0.3])]).unwrap();
        assert!((constant.rmse - 0.3).abs() < 1e-15 && (constant.abs_bias - 0.3).abs() < 1e-15);
        assert_eq!(constant.sd, 0.0);
        assert_eq!(constant.coverage, 0.5);
        let failed = summarize(&[0.0], &[run(vec![1.0]), Err(SimError::EmptyRuns)]).unwrap();
        assert_eq!((failed.runs, failed.failed), (1, 1));
        assert_eq!(summarize(&[0.0], &[Err(SimError::EmptyRuns)]), Err(SimError::EmptyRuns));
    }

    #[test]
    fn small_study_is_reproducible() {
        let cfg = small_config();
        let a = run_simulation(&cfg).unwrap();
        assert_eq!(a.cells.len(), 2);
        for c in &a.cells {
            assert!(c.metrics.max_decomposition_error < 1e-10);
            assert!((0.0..=1.0).contains(&c.metrics.coverage));
        }
        assert_eq!(a.to_json(), run_simulation(&cfg).unwrap().to_json());
        assert!(a.to_text().contains("Panel 4: Coverage"));
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = small_config();
        assert_eq!(SimConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let bad = cfg.to_toml().replace("\"ct\"", "\"forest\"");
        let err = SimConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("at_x") && err.contains("ct"), "{err}");
        let unknown = format!("{}\nextra = 1\n", cfg.to_toml());
        assert!(SimConfig::from_toml(&unknown).is_err());
    }
}
