//! Group average treatment effects on a fixed grouping, with
//! heteroskedasticity-robust inference.
//!
//! Leaf labels are dense and 1-based, as returned by
//! [`apply_tree`](crate::tree::apply_tree).

use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::GateError;
use crate::nuisance::NuisanceEstimates;
use crate::stats::{critical_value, two_sided_p};
use crate::table::{render, render_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrScores {
    pub gamma: Vec<f64>,
}

/// Doubly-robust (AIPW) scores
/// `mu1 - mu0 + D (Y - mu1) / e - (1 - D) (Y - mu0) / (1 - e)`.
pub fn dr_scores(y: &[f64], d: &[bool], nuis: &NuisanceEstimates) -> Result<DrScores, GateError> {
    let n = y.len();
    if d.len() != n || nuis.len() != n || nuis.mu1_hat.len() != n || nuis.e_hat.len() != n {
        return Err(GateError::LengthMismatch(format!(
            "y has {n} values, d has {}, nuisances have {}",
            d.len(),
            nuis.len()
        )));
    }
    let gamma = (0..n)
        .map(|i| {
            let (m0, m1, e) = (nuis.mu0_hat[i], nuis.mu1_hat[i], nuis.e_hat[i]);
            if !(m0.is_finite() && m1.is_finite() && e > 0.0 && e < 1.0 && y[i].is_finite()) {
                return Err(GateError::NonFinite(i));
            }
            let g = if d[i] {
                m1 - m0 + (y[i] - m1) / e
            } else {
                m1 - m0 - (y[i] - m0) / (1.0 - e)
            };
            Ok(g)
        })
        .collect::<Result<_, _>>()?;
    Ok(DrScores { gamma })
}

/// Heteroskedasticity-robust variance flavour.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    #[default]
    Hc0,
    /// HC0 scaled by `n / (n - k)`, with `k` the number of regressors.
    Hc1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMethod {
    DrScores,
    DiffMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub leaf: usize,
    pub n: usize,
    pub share: f64,
    pub beta_hat: f64,
    /// `None` when undefined (a single observation in the leaf).
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTable {
    pub method: GateMethod,
    pub variance: VarianceKind,
    pub level: f64,
    pub rows: Vec<GateRow>,
}

fn check_level(level: f64) -> Result<f64, GateError> {
    if level > 0.0 && level < 1.0 {
        Ok(critical_value(level))
    } else {
        Err(GateError::BadLevel(level))
    }
}

/// Groups row indices by leaf; every label in `1..=max` must occur.
fn group(leaf_ids: &[usize]) -> Result<Vec<Vec<usize>>, GateError> {
    let g = leaf_ids.iter().copied().max().unwrap_or(0);
    if leaf_ids.contains(&0) {
        return Err(GateError::LengthMismatch("leaf labels must start at 1".into()));
    }
    let mut groups = vec![Vec::new(); g];
    for (i, &l) in leaf_ids.iter().enumerate() {
        groups[l - 1].push(i);
    }
    if groups.is_empty() {
        return Err(GateError::EmptyLeaf(1));
    }
    if let Some(l) = groups.iter().position(Vec::is_empty) {
        return Err(GateError::EmptyLeaf(l + 1));
    }
    Ok(groups)
}

fn hc_factor(kind: VarianceKind, n: usize, k: usize) -> Option<f64> {
    match kind {
        VarianceKind::Hc0 => Some(1.0),
        VarianceKind::Hc1 => (n > k).then(|| n as f64 / (n - k) as f64),
    }
}

fn make_row(leaf: usize, n: usize, total: usize, beta_hat: f64, se: Option<f64>, z: f64) -> GateRow {
    GateRow {
        leaf,
        n,
        share: n as f64 / total as f64,
        beta_hat,
        se,
        ci_low: se.map(|s| beta_hat - z * s),
        ci_high: se.map(|s| beta_hat + z * s),
    }
}

/// GATEs as leaf means of the scores; the closed form of OLS of the scores
/// on leaf dummies.
pub fn gate_from_scores(
    scores: &DrScores,
    leaf_ids: &[usize],
    level: f64,
    variance: VarianceKind,
) -> Result<GateTable, GateError> {
    let z = check_level(level)?;
    let n = scores.gamma.len();
    if leaf_ids.len() != n {
        return Err(GateError::LengthMismatch(format!(
            "{} leaf labels for {n} scores",
            leaf_ids.len()
        )));
    }
    let groups = group(leaf_ids)?;
    let factor = hc_factor(variance, n, groups.len());
    let rows = groups
        .iter()
        .enumerate()
        .map(|(l, rows)| {
            let m = rows.len() as f64;
            let mean = rows.iter().map(|&i| scores.gamma[i]).sum::<f64>() / m;
            let rss: f64 = rows.iter().map(|&i| (scores.gamma[i] - mean).powi(2)).sum();
            let se = factor.filter(|_| rows.len() > 1).map(|f| (f * rss).sqrt() / m);
            make_row(l + 1, rows.len(), n, mean, se, z)
        })
        .collect();
    Ok(GateTable {
        method: GateMethod::DrScores,
        variance,
        level,
        rows,
    })
}

/// GATEs as within-leaf differences in mean outcomes between arms; the
/// closed form of OLS on leaf dummies and their interactions with `D`.
pub fn gate_diff_means(
    y: &[f64],
    d: &[bool],
    leaf_ids: &[usize],
    level: f64,
    variance: VarianceKind,
) -> Result<GateTable, GateError> {
    let z = check_level(level)?;
    let n = y.len();
    if d.len() != n || leaf_ids.len() != n {
        return Err(GateError::LengthMismatch(format!(
            "y has {n} values, d has {}, {} leaf labels",
            d.len(),
            leaf_ids.len()
        )));
    }
    let groups = group(leaf_ids)?;
    let factor = hc_factor(variance, n, 2 * groups.len());
    let rows = groups
        .iter()
        .enumerate()
        .map(|(l, rows)| {
            let arm = |t: bool| -> Result<(f64, f64), GateError> {
                let vals: Vec<f64> = rows.iter().filter(|&&i| d[i] == t).map(|&i| y[i]).collect();
                if vals.is_empty() {
                    let arm = if t { "treated" } else { "control" };
                    return Err(GateError::SingleArmLeaf { leaf: l + 1, arm });
                }
                let k = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / k;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k * k);
                Ok((mean, var))
            };
            let (m1, v1) = arm(true)?;
            let (m0, v0) = arm(false)?;
            let se = factor.map(|f| (f * (v1 + v0)).sqrt());
            Ok(make_row(l + 1, rows.len(), n, m1 - m0, se, z))
        })
        .collect::<Result<_, GateError>>()?;
    Ok(GateTable {
        method: GateMethod::DiffMeans,
        variance,
        level,
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl GateTable {
    /// Share-weighted mean of the leaf estimates.
    pub fn average(&self) -> f64 {
        self.rows.iter().map(|r| r.share * r.beta_hat).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let ci = format!("{:.0}% CI", self.level * 100.0);
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    format!("Leaf {}", r.leaf),
                    r.n.to_string(),
                    format!("{:.3}", r.share),
                    format!("{:.4}", r.beta_hat),
                    fmt_opt(r.se),
                    match (r.ci_low, r.ci_high) {
                        (Some(a), Some(b)) => format!("[{a:.4}, {b:.4}]"),
                        _ => "NA".into(),
                    },
                ]
            })
            .collect();
        render(&["", "n", "share", "GATE", "se", &ci], &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub a: usize,
    pub b: usize,
    pub diff: f64,
    pub se: f64,
    pub p_raw: f64,
    pub p_holm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTable {
    pub rows: Vec<DiffRow>,
}

/// Holm step-down adjustment. Returned values align with the input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// All pairwise leaf differences `beta_a - beta_b` (`a < b`), treating leaf
/// estimates as independent, with Holm-adjusted two-sided p-values.
pub fn pairwise_differences(gates: &GateTable) -> Result<DiffTable, GateError> {
    let g = gates.rows.len();
    if g < 2 {
        return Err(GateError::TooFewLeaves { needed: 2, found: g });
    }
    let se: Vec<f64> = gates
        .rows
        .iter()
        .map(|r| r.se.ok_or(GateError::UndefinedSe(r.leaf)))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(g * (g - 1) / 2);
    for a in 0..g {
        for b in a + 1..g {
            let diff = gates.rows[a].beta_hat - gates.rows[b].beta_hat;
            let s = (se[a].powi(2) + se[b].powi(2)).sqrt();
            let p_raw = if s > 0.0 {
                two_sided_p(diff / s)
            } else if diff == 0.0 {
                1.0
            } else {
                0.0
            };
            rows.push(DiffRow {
                a: gates.rows[a].leaf,
                b: gates.rows[b].leaf,
                diff,
                se: s,
                p_raw,
                p_holm: 0.0,
            });
        }
    }
    let adj = holm_adjust(&rows.iter().map(|r| r.p_raw).collect::<Vec<_>>());
    for (r, p) in rows.iter_mut().zip(adj) {
        r.p_holm = p;
    }
    Ok(DiffTable { rows })
}

impl DiffTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    format!("Leaf {} - Leaf {}", r.a, r.b),
                    format!("{:.4}", r.diff),
                    format!("{:.4}", r.se),
                    format!("{:.4}", r.p_raw),
                    format!("{:.4}", r.p_holm),
                ]
            })
            .collect();
        render(&["", "difference", "se", "p", "p (Holm)"], &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafProfiles {
    pub variables: Vec<String>,
    pub n_leaves: usize,
    /// `mean[v][l]` is the mean of variable `v` in leaf `l + 1`.
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

/// Per-leaf means of every covariate (categoricals expanded to one
/// indicator per level) with HC0 standard errors from regressing the
/// covariate on leaf dummies.
pub fn leaf_profiles(x: &Covariates, leaf_ids: &[usize]) -> Result<LeafProfiles, GateError> {
    if leaf_ids.len() != x.n_rows() {
        return Err(GateError::LengthMismatch(format!(
            "{} leaf labels for {} rows",
            leaf_ids.len(),
            x.n_rows()
        )));
    }
    let groups = group(leaf_ids)?;
    let expanded = x.expand(false);
    let (mut mean, mut se) = (Vec::new(), Vec::new());
    for col in &expanded.columns {
        let (mut m_row, mut s_row) = (Vec::new(), Vec::new());
        for rows in &groups {
            let k = rows.len() as f64;
            let m = rows.iter().map(|&i| col[i]).sum::<f64>() / k;
            let ss: f64 = rows.iter().map(|&i| (col[i] - m).powi(2)).sum();
            m_row.push(m);
            s_row.push(ss.sqrt() / k);
        }
        mean.push(m_row);
        se.push(s_row);
    }
    Ok(LeafProfiles {
        variables: expanded.names,
        n_leaves: groups.len(),
        mean,
        se,
    })
}

impl LeafProfiles {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profiles serialize")
    }

    /// One row per variable; each cell is `mean (se)`, with `-` for a zero
    /// standard error.
    pub fn to_text(&self) -> String {
        let mut header = vec![String::new()];
        header.extend((1..=self.n_leaves).map(|l| format!("Leaf {l}")));
        let cells: Vec<Vec<String>> = self
            .variables
            .iter()
            .enumerate()
            .map(|(v, name)| {
                let mut row = vec![name.clone()];
                for l in 0..self.n_leaves {
                    let s = self.se[v][l];
                    let s = if s == 0.0 { "-".to_string() } else { format!("{s:.4}") };
                    row.push(format!("{:.4} ({s})", self.mean[v][l]));
                }
                row
            })
            .collect();
        render_rows(&header, &cells)
    }
}
