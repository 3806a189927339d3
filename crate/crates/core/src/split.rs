//! Axis-aligned split candidates and greedy split search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Feature, FeatureKind};

/// A binary split on one covariate.
///
/// Numeric splits send `x <= threshold` left. Categorical splits send values
/// whose level code is in `left_levels` left and everything else (including
/// levels never seen in training) right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    Numeric { feature: usize, threshold: f64 },
    Categorical { feature: usize, left_levels: Vec<usize> },
}

impl Split {
    pub fn feature(&self) -> usize {
        match self {
            Split::Numeric { feature, .. } | Split::Categorical { feature, .. } => *feature,
        }
    }

    #[inline]
    pub fn goes_left(&self, value: f64) -> bool {
        match self {
            Split::Numeric { threshold, .. } => value <= *threshold,
            Split::Categorical { left_levels, .. } => {
                value >= 0.0 && left_levels.binary_search(&(value as usize)).is_ok()
            }
        }
    }

    /// Human-readable rule for the left (`left = true`) or right branch.
    pub fn describe(&self, features: &[Feature], left: bool) -> String {
        let feature = &features[self.feature()];
        match self {
            Split::Numeric { threshold, .. } => {
                let op = if left { "<=" } else { ">" };
                format!("{} {op} {}", feature.name, fmt_threshold(*threshold))
            }
            Split::Categorical { left_levels, .. } => {
                let names: Vec<&str> = match &feature.kind {
                    FeatureKind::Categorical { levels } => left_levels
                        .iter()
                        .map(|&c| levels.get(c).map_or("?", String::as_str))
                        .collect(),
                    FeatureKind::Numeric => Vec::new(),
                };
                let op = if left { "in" } else { "not in" };
                format!("{} {op} {{{}}}", feature.name, names.join(", "))
            }
        }
    }
}

fn fmt_threshold(t: f64) -> String {
    let short = format!("{t:.4}");
    if short.parse::<f64>() == Ok(t) {
        format!("{t}")
    } else {
        short
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

/// Sorted distinct values of feature `j` among `rows`.
fn distinct_sorted(x: &Covariates, rows: &[usize], j: usize) -> Vec<f64> {
    let col = x.column(j);
    let mut values: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
}

/// Orders the levels present among `rows` by mean `response` (ties by level
/// code).
fn levels_by_mean(x: &Covariates, rows: &[usize], j: usize, response: &[f64]) -> Vec<usize> {
    let col = x.column(j);
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &i in rows {
        let e = acc.entry(col[i] as usize).or_default();
        e.0 += response[i];
        e.1 += 1;
    }
    let mut levels: Vec<(usize, f64)> = acc
        .into_iter()
        .map(|(code, (s, n))| (code, s / n as f64))
        .collect();
    levels.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    levels.into_iter().map(|(c, _)| c).collect()
}

/// Candidate splits of feature `j` for the node holding `rows`.
///
/// Numeric features yield thresholds at midpoints between consecutive distinct
/// values. Categorical features yield the contiguous prefixes of the levels
/// present in the node after ordering them by mean `response`. A constant
/// feature yields no candidates.
pub fn candidate_splits(x: &Covariates, rows: &[usize], j: usize, response: &[f64]) -> Vec<Split> {
    if x.features()[j].is_categorical() {
        let order = levels_by_mean(x, rows, j, response);
        (1..order.len())
            .map(|k| {
                let mut left_levels = order[..k].to_vec();
                left_levels.sort_unstable();
                Split::Categorical {
                    feature: j,
                    left_levels,
                }
            })
            .collect()
    } else {
        distinct_sorted(x, rows, j)
            .windows(2)
            .map(|w| Split::Numeric {
                feature: j,
                threshold: midpoint(w[0], w[1]),
            })
            .collect()
    }
}

/// Sufficient statistics of a node for one splitting criterion.
pub(crate) trait Criterion: Sync {
    type Stats: Copy + Default + Send;

    fn add(&self, stats: &mut Self::Stats, row: usize);
    fn minus(&self, total: &Self::Stats, part: &Self::Stats) -> Self::Stats;
    fn admissible(&self, child: &Self::Stats) -> bool;
    /// Decrease in the (unnormalized) in-sample loss when a node with stats
    /// `left + right` is split into `left` and `right`.
    fn gain(&self, left: &Self::Stats, right: &Self::Stats, parent: &Self::Stats) -> f64;
    /// Score used to order categorical levels; `None` sorts last.
    fn level_score(&self, stats: &Self::Stats) -> Option<f64>;
}

/// Squared-error reduction on a response vector (CART regression and the
/// aggregation-tree criterion).
pub(crate) struct SseCriterion<'a> {
    pub response: &'a [f64],
    pub min_leaf: usize,
}

#[derive(Clone, Copy, Default, Debug)]
pub(crate) struct SumStats {
    pub n: usize,
    pub sum: f64,
}

impl SumStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
}

impl Criterion for SseCriterion<'_> {
    type Stats = SumStats;

    #[inline]
    fn add(&self, s: &mut SumStats, row: usize) {
        s.n += 1;
        s.sum += self.response[row];
    }

    #[inline]
    fn minus(&self, total: &SumStats, part: &SumStats) -> SumStats {
        SumStats {
            n: total.n - part.n,
            sum: total.sum - part.sum,
        }
    }

    #[inline]
    fn admissible(&self, child: &SumStats) -> bool {
        child.n >= self.min_leaf
    }

    #[inline]
    fn gain(&self, l: &SumStats, r: &SumStats, p: &SumStats) -> f64 {
        let diff = l.mean() - r.mean();
        (l.n as f64) * (r.n as f64) / (p.n as f64) * diff * diff
    }

    fn level_score(&self, s: &SumStats) -> Option<f64> {
        Some(s.mean())
    }
}

/// Adaptive causal-tree criterion: maximizes `sum_l n_l * tau_l^2` where
/// `tau_l` is the within-child difference in mean outcomes.
pub(crate) struct CausalCriterion<'a> {
    pub y: &'a [f64],
    pub d: &'a [bool],
    pub min_leaf: usize,
    pub min_treated: usize,
    pub min_control: usize,
}

#[derive(Clone, Copy, Default, Debug)]
pub(crate) struct ArmStats {
    pub n1: usize,
    pub sum1: f64,
    pub n0: usize,
    pub sum0: f64,
}

impl ArmStats {
    pub fn n(&self) -> usize {
        self.n1 + self.n0
    }

    pub fn effect(&self) -> Option<f64> {
        (self.n1 > 0 && self.n0 > 0).then(|| self.sum1 / self.n1 as f64 - self.sum0 / self.n0 as f64)
    }
}

impl Criterion for CausalCriterion<'_> {
    type Stats = ArmStats;

    #[inline]
    fn add(&self, s: &mut ArmStats, row: usize) {
        if self.d[row] {
            s.n1 += 1;
            s.sum1 += self.y[row];
        } else {
            s.n0 += 1;
            s.sum0 += self.y[row];
        }
    }

    #[inline]
    fn minus(&self, t: &ArmStats, p: &ArmStats) -> ArmStats {
        ArmStats {
            n1: t.n1 - p.n1,
            sum1: t.sum1 - p.sum1,
            n0: t.n0 - p.n0,
            sum0: t.sum0 - p.sum0,
        }
    }

    #[inline]
    fn admissible(&self, c: &ArmStats) -> bool {
        c.n() >= self.min_leaf && c.n1 >= self.min_treated.max(1) && c.n0 >= self.min_control.max(1)
    }

    #[inline]
    fn gain(&self, l: &ArmStats, r: &ArmStats, p: &ArmStats) -> f64 {
        let term = |s: &ArmStats| s.effect().map_or(0.0, |t| s.n() as f64 * t * t);
        term(l) + term(r) - term(p)
    }

    fn level_score(&self, s: &ArmStats) -> Option<f64> {
        s.effect()
    }
}

/// All admissible candidates on one feature, in ascending threshold order.
struct FeatureScan {
    feature: usize,
    /// (gain, numeric threshold or categorical prefix length)
    gains: Vec<(f64, f64)>,
    /// Categorical level order (empty for numeric features).
    order: Vec<usize>,
}

fn scan_feature<C: Criterion>(
    crit: &C,
    x: &Covariates,
    rows: &[usize],
    j: usize,
    parent: &C::Stats,
) -> FeatureScan {
    let col = x.column(j);
    let mut gains = Vec::new();
    if x.features()[j].is_categorical() {
        let mut by_level: BTreeMap<usize, C::Stats> = BTreeMap::new();
        for &i in rows {
            crit.add(by_level.entry(col[i] as usize).or_default(), i);
        }
        let mut levels: Vec<(usize, C::Stats)> = by_level.into_iter().collect();
        levels.sort_by(|a, b| {
            let (sa, sb) = (crit.level_score(&a.1), crit.level_score(&b.1));
            match (sa, sb) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            }
            .then(a.0.cmp(&b.0))
        });
        let order: Vec<usize> = levels.iter().map(|(c, _)| *c).collect();
        // Prefix statistics are re-accumulated from rows so that the
        // arithmetic matches a direct evaluation of each candidate.
        let mut rank = BTreeMap::new();
        for (r, &c) in order.iter().enumerate() {
            rank.insert(c, r);
        }
        let mut sorted: Vec<usize> = rows.to_vec();
        sorted.sort_by_key(|&i| (rank[&(col[i] as usize)], i));
        let mut left = C::Stats::default();
        let mut pos = 0;
        for k in 1..order.len() {
            while pos < sorted.len() && rank[&(col[sorted[pos]] as usize)] < k {
                crit.add(&mut left, sorted[pos]);
                pos += 1;
            }
            let right = crit.minus(parent, &left);
            if crit.admissible(&left) && crit.admissible(&right) {
                gains.push((crit.gain(&left, &right, parent), k as f64));
            }
        }
        FeatureScan {
            feature: j,
            gains,
            order,
        }
    } else {
        let mut sorted: Vec<usize> = rows.to_vec();
        sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut left = C::Stats::default();
        for w in 0..sorted.len().saturating_sub(1) {
            crit.add(&mut left, sorted[w]);
            let (lo, hi) = (col[sorted[w]], col[sorted[w + 1]]);
            if lo == hi {
                continue;
            }
            let right = crit.minus(parent, &left);
            if crit.admissible(&left) && crit.admissible(&right) {
                gains.push((crit.gain(&left, &right, parent), midpoint(lo, hi)));
            }
        }
        FeatureScan {
            feature: j,
            gains,
            order: Vec::new(),
        }
    }
}

/// Winning split of a node together with its gain.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BestSplit {
    pub split: Split,
    pub gain: f64,
}

/// Greedy split search over `features`.
///
/// Gains within `tie_tol` of the maximum are ties; among ties the lowest
/// feature index wins, then the smallest threshold (earliest prefix for
/// categorical features).
pub(crate) fn best_split<C: Criterion>(
    crit: &C,
    x: &Covariates,
    rows: &[usize],
    features: &[usize],
    tie_tol: f64,
) -> Option<BestSplit> {
    let mut parent = C::Stats::default();
    for &i in rows {
        crit.add(&mut parent, i);
    }
    let mut features = features.to_vec();
    features.sort_unstable();
    let scans: Vec<FeatureScan> = features
        .iter()
        .map(|&j| scan_feature(crit, x, rows, j, &parent))
        .collect();
    let max = scans
        .iter()
        .flat_map(|s| s.gains.iter().map(|g| g.0))
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    for scan in &scans {
        if let Some(&(gain, at)) = scan.gains.iter().find(|g| g.0 >= max - tie_tol) {
            let split = if scan.order.is_empty() {
                Split::Numeric {
                    feature: scan.feature,
                    threshold: at,
                }
            } else {
                let mut left_levels = scan.order[..at as usize].to_vec();
                left_levels.sort_unstable();
                Split::Categorical {
                    feature: scan.feature,
                    left_levels,
                }
            };
            return Some(BestSplit { split, gain });
        }
    }
    None
}

/// Partitions `rows` by `split`, preserving order.
pub(crate) fn partition(x: &Covariates, rows: &[usize], split: &Split) -> (Vec<usize>, Vec<usize>) {
    let col = x.column(split.feature());
    rows.iter().partition(|&&i| split.goes_left(col[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov(cols: Vec<Vec<f64>>) -> Covariates {
        Covariates::from_columns(cols).unwrap()
    }

    #[test]
    fn numeric_midpoints() {
        let x = cov(vec![vec![1.0, 1.0, 2.0, 3.0]]);
        let c = candidate_splits(&x, &[0, 1, 2, 3], 0, &[0.0; 4]);
        assert_eq!(
            c,
            vec![
                Split::Numeric { feature: 0, threshold: 1.5 },
                Split::Numeric { feature: 0, threshold: 2.5 }
            ]
        );
        let x = cov(vec![vec![4.0; 5]]);
        assert!(candidate_splits(&x, &[0, 1, 2, 3, 4], 0, &[0.0; 5]).is_empty());
    }

    #[test]
    fn categorical_prefixes() {
        let x = Covariates::new(
            vec![Feature::categorical("g", vec!["a".into(), "b".into(), "c".into()])],
            vec![vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]],
        )
        .unwrap();
        // level means: a = 5, b = 1, c = 3 -> order b, c, a
        let r = [5.0, 1.0, 3.0, 5.0, 1.0, 3.0];
        let c = candidate_splits(&x, &[0, 1, 2, 3, 4, 5], 0, &r);
        assert_eq!(
            c,
            vec![
                Split::Categorical { feature: 0, left_levels: vec![1] },
                Split::Categorical { feature: 0, left_levels: vec![1, 2] }
            ]
        );
    }

    #[test]
    fn routing_boundary_and_unseen_level() {
        let s = Split::Numeric { feature: 0, threshold: 0.5 };
        assert!(s.goes_left(0.5));
        assert!(!s.goes_left(0.500001));
        let s = Split::Categorical { feature: 0, left_levels: vec![0, 2] };
        assert!(s.goes_left(2.0));
        assert!(!s.goes_left(1.0));
        assert!(!s.goes_left(7.0));
    }

    #[test]
    fn midpoint_never_reaches_upper() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
    }

    #[test]
    fn best_split_finds_step() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let tau: Vec<f64> = xs.iter().map(|&v| if v > 9.5 { 1.0 } else { 0.0 }).collect();
        let x = cov(vec![xs.clone(), xs.iter().map(|v| (v * 7.0) % 5.0).collect()]);
        let crit = SseCriterion { response: &tau, min_leaf: 1 };
        let rows: Vec<usize> = (0..20).collect();
        let best = best_split(&crit, &x, &rows, &[0, 1], 1e-12).unwrap();
        assert_eq!(best.split, Split::Numeric { feature: 0, threshold: 9.5 });
        assert!((best.gain - 5.0).abs() < 1e-12);
    }
}
