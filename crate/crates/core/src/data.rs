//! Data ingestion, honest/training splits, cross-fitting folds and covariate
//! balance diagnostics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::rng::rng_for;

/// Kind of a covariate column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    /// Values are stored as level codes (indices into `levels`).
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical { levels },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { levels } => Some(levels),
            FeatureKind::Numeric => None,
        }
    }
}

/// Column-major covariate matrix with a per-column schema.
///
/// Categorical entries hold their level code as an `f64`. A code outside the
/// declared level set marks a level unseen at training time; trees route such
/// values to the "not in subset" branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    features: Vec<Feature>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl Covariates {
    pub fn new(features: Vec<Feature>, columns: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if features.len() != columns.len() {
            return Err(DataError::LengthMismatch(format!(
                "{} features but {} columns",
                features.len(),
                columns.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for (feature, column) in features.iter().zip(&columns) {
            if !seen.insert(feature.name.as_str()) {
                return Err(DataError::DuplicateColumn(feature.name.clone()));
            }
            if column.len() != n_rows {
                return Err(DataError::LengthMismatch(format!(
                    "column `{}` has {} rows, expected {}",
                    feature.name,
                    column.len(),
                    n_rows
                )));
            }
            for (row, &v) in column.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::InvalidValue {
                        column: feature.name.clone(),
                        row,
                        message: "non-finite value".into(),
                    });
                }
                if let Some(levels) = feature.levels() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= levels.len() {
                        return Err(DataError::InvalidValue {
                            column: feature.name.clone(),
                            row,
                            message: format!("level code {v} outside the declared level set"),
                        });
                    }
                }
            }
        }
        Ok(Self {
            features,
            columns,
            n_rows,
        })
    }

    /// Numeric covariates named `x1..xp` from row-major data.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let p = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(rows.len()); p];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(DataError::LengthMismatch(format!(
                    "row {i} has {} values, expected {p}",
                    row.len()
                )));
            }
            for (col, &v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        let features = (1..=p).map(|j| Feature::numeric(format!("x{j}"))).collect();
        Self::new(features, columns)
    }

    /// Numeric covariates named `x1..xp` from column-major data.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let features = (1..=columns.len())
            .map(|j| Feature::numeric(format!("x{j}")))
            .collect();
        Self::new(features, columns)
    }

    /// A covariate matrix with zero columns and `n_rows` rows.
    pub fn empty_columns(n_rows: usize) -> Self {
        Self {
            features: Vec::new(),
            columns: Vec::new(),
            n_rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    #[inline]
    pub fn get(&self, row: usize, j: usize) -> f64 {
        self.columns[j][row]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            n_rows: rows.len(),
        }
    }

    /// Re-expresses these covariates in terms of `schema`.
    ///
    /// Feature names and kinds must match positionally. Categorical codes are
    /// remapped by level name; levels absent from `schema` receive an
    /// out-of-range code.
    pub fn conform_to(&self, schema: &[Feature]) -> Result<Self, DataError> {
        if schema.len() != self.features.len() {
            return Err(DataError::SchemaMismatch(format!(
                "expected {} covariates, found {}",
                schema.len(),
                self.features.len()
            )));
        }
        let mut columns = Vec::with_capacity(schema.len());
        for ((want, have), col) in schema.iter().zip(&self.features).zip(&self.columns) {
            if want.name != have.name {
                return Err(DataError::SchemaMismatch(format!(
                    "expected covariate `{}`, found `{}`",
                    want.name, have.name
                )));
            }
            match (&want.kind, &have.kind) {
                (FeatureKind::Numeric, FeatureKind::Numeric) => columns.push(col.clone()),
                (
                    FeatureKind::Categorical { levels: target },
                    FeatureKind::Categorical { levels: source },
                ) => {
                    if target == source {
                        columns.push(col.clone());
                    } else {
                        let lookup: HashMap<&str, usize> = target
                            .iter()
                            .enumerate()
                            .map(|(i, l)| (l.as_str(), i))
                            .collect();
                        let unseen = target.len() as f64;
                        let remap: Vec<f64> = source
                            .iter()
                            .map(|l| lookup.get(l.as_str()).map_or(unseen, |&c| c as f64))
                            .collect();
                        columns.push(col.iter().map(|&v| remap[v as usize]).collect());
                    }
                }
                _ => {
                    return Err(DataError::SchemaMismatch(format!(
                        "covariate `{}` changes kind",
                        want.name
                    )))
                }
            }
        }
        Ok(Self {
            features: schema.to_vec(),
            columns,
            n_rows: self.n_rows,
        })
    }

    /// Numeric design matrix with categorical columns expanded to indicators.
    ///
    /// With `drop_first` the first level of each categorical is omitted
    /// (reference coding for regressions); otherwise every level gets a column.
    pub fn expand(&self, drop_first: bool) -> ExpandedColumns {
        let mut names = Vec::new();
        let mut columns = Vec::new();
        for (feature, col) in self.features.iter().zip(&self.columns) {
            match &feature.kind {
                FeatureKind::Numeric => {
                    names.push(feature.name.clone());
                    columns.push(col.clone());
                }
                FeatureKind::Categorical { levels } => {
                    let skip = usize::from(drop_first);
                    for (code, level) in levels.iter().enumerate().skip(skip) {
                        names.push(format!("{}={}", feature.name, level));
                        columns.push(
                            col.iter()
                                .map(|&v| if v as usize == code { 1.0 } else { 0.0 })
                                .collect(),
                        );
                    }
                }
            }
        }
        ExpandedColumns { names, columns }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedColumns {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

/// Observed sample: outcome, binary treatment and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub outcome_name: String,
    pub treatment_name: String,
    y: Vec<f64>,
    d: Vec<bool>,
    x: Covariates,
}

impl Dataset {
    pub fn new(y: Vec<f64>, d: Vec<bool>, x: Covariates) -> Result<Self, DataError> {
        if y.len() != d.len() || y.len() != x.n_rows() {
            return Err(DataError::LengthMismatch(format!(
                "y has {} rows, d has {}, x has {}",
                y.len(),
                d.len(),
                x.n_rows()
            )));
        }
        if y.is_empty() {
            return Err(DataError::TooFewRows { needed: 1, found: 0 });
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidValue {
                column: "outcome".into(),
                row,
                message: "non-finite outcome".into(),
            });
        }
        Ok(Self {
            outcome_name: "y".into(),
            treatment_name: "d".into(),
            y,
            d,
            x,
        })
    }

    pub fn with_names(mut self, outcome: impl Into<String>, treatment: impl Into<String>) -> Self {
        self.outcome_name = outcome.into();
        self.treatment_name = treatment.into();
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.n_features()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[bool] {
        &self.d
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&t| t).count()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            outcome_name: self.outcome_name.clone(),
            treatment_name: self.treatment_name.clone(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            d: rows.iter().map(|&i| self.d[i]).collect(),
            x: self.x.select_rows(rows),
        }
    }
}

/// Which columns of a CSV file become covariates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSelection {
    /// When non-empty, only these columns (in this order) are covariates.
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

/// Reads a dataset from a headed CSV file, using every non-role column as a
/// covariate.
pub fn load_csv(path: &Path, outcome: &str, treatment: &str) -> Result<Dataset, DataError> {
    load_csv_with(path, outcome, treatment, &ColumnSelection::default())
}

pub fn load_csv_with(
    path: &Path,
    outcome: &str,
    treatment: &str,
    selection: &ColumnSelection,
) -> Result<Dataset, DataError> {
    let io_err = |e: &dyn std::fmt::Display| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(|e| io_err(&e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut position = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        if position.insert(name.as_str(), i).is_some() {
            return Err(DataError::DuplicateColumn(name.clone()));
        }
    }
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingColumn(name.to_owned()))
    };
    let y_col = find(outcome)?;
    let d_col = find(treatment)?;

    let covariate_cols: Vec<usize> = if selection.include.is_empty() {
        (0..header.len())
            .filter(|&i| i != y_col && i != d_col)
            .filter(|&i| !selection.exclude.iter().any(|e| e == &header[i]))
            .collect()
    } else {
        selection
            .include
            .iter()
            .map(|name| find(name))
            .collect::<Result<_, _>>()?
    };
    for name in &selection.exclude {
        find(name)?;
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let row = r + 1;
        for (c, field) in record.iter().enumerate() {
            if field.is_empty() && (c == y_col || c == d_col || covariate_cols.contains(&c)) {
                return Err(DataError::MissingCell {
                    row,
                    column: header[c].clone(),
                });
            }
            raw[c].push(field.to_owned());
        }
    }
    let n = raw[y_col].len();
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, found: n });
    }

    let y = raw[y_col]
        .iter()
        .enumerate()
        .map(|(r, s)| {
            parse_finite(s).ok_or_else(|| DataError::NonNumericOutcome {
                row: r + 1,
                value: s.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let d = raw[d_col]
        .iter()
        .enumerate()
        .map(|(r, s)| match parse_finite(s) {
            Some(v) if v == 0.0 => Ok(false),
            Some(v) if v == 1.0 => Ok(true),
            _ => Err(DataError::NonBinaryTreatment {
                row: r + 1,
                value: s.clone(),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut features = Vec::with_capacity(covariate_cols.len());
    let mut columns = Vec::with_capacity(covariate_cols.len());
    for &c in &covariate_cols {
        let values = &raw[c];
        let numeric: Option<Vec<f64>> = values.iter().map(|s| parse_finite(s)).collect();
        match numeric {
            Some(col) => {
                features.push(Feature::numeric(header[c].clone()));
                columns.push(col);
            }
            None => {
                let levels: Vec<String> = values
                    .iter()
                    .cloned()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let code: HashMap<&str, usize> = levels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (l.as_str(), i))
                    .collect();
                columns.push(values.iter().map(|s| code[s.as_str()] as f64).collect());
                features.push(Feature::categorical(header[c].clone(), levels));
            }
        }
    }
    let x = Covariates::new(features, columns)?;
    Ok(Dataset::new(y, d, x)?.with_names(outcome, treatment))
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Disjoint training and honest index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub train_idx: Vec<usize>,
    pub honest_idx: Vec<usize>,
    pub seed: u64,
}

/// Randomly assigns `round(fraction * n)` rows to the training sample and the
/// rest to the honest sample. Both index lists are returned sorted.
pub fn split_honest(n: usize, fraction: f64, seed: u64) -> Result<SampleSplit, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n_train = (fraction * n as f64).round() as usize;
    let n_honest = n.saturating_sub(n_train);
    if n_train < 2 || n_honest < 2 {
        return Err(DataError::TooFewRows {
            needed: 2,
            found: n_train.min(n_honest),
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, &[0x5e11]));
    let mut train_idx = perm[..n_train].to_vec();
    let mut honest_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    honest_idx.sort_unstable();
    Ok(SampleSplit {
        train_idx,
        honest_idx,
        seed,
    })
}

/// Fold membership for K-fold cross-fitting. Fold ids are `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Balanced random folds: sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    if k < 2 || k > n {
        return Err(DataError::BadFoldCount { k, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, &[0xf01d]));
    let mut fold_of = vec![0; n];
    for (slot, &i) in perm.iter().enumerate() {
        fold_of[i] = slot % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub mean_treated: f64,
    pub sd_treated: f64,
    pub mean_control: f64,
    pub sd_control: f64,
    /// `None` when both arms are constant at different values.
    pub normalized_diff: Option<f64>,
    /// `None` when either arm has zero standard deviation.
    pub log_sd_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub n_treated: usize,
    pub n_control: usize,
    pub rows: Vec<BalanceRow>,
}

pub(crate) fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

/// Per-covariate location and dispersion differences between treatment arms.
///
/// Categorical covariates are expanded to one indicator per level. Standard
/// deviations use the `n - 1` denominator.
pub fn balance_table(ds: &Dataset) -> Result<BalanceReport, DataError> {
    let n_treated = ds.n_treated();
    let n_control = ds.n() - n_treated;
    for (arm, found) in [("treated", n_treated), ("control", n_control)] {
        if found < 2 {
            return Err(DataError::ArmTooSmall {
                arm,
                found,
                needed: 2,
            });
        }
    }
    let expanded = ds.x().expand(false);
    let d = ds.d();
    let rows = expanded
        .names
        .iter()
        .zip(&expanded.columns)
        .map(|(name, col)| {
            let arm = |t: bool| {
                col.iter()
                    .zip(d)
                    .filter(move |(_, &di)| di == t)
                    .map(|(&v, _)| v)
            };
            let (mean_t, sd_t) = mean_sd(arm(true));
            let (mean_c, sd_c) = mean_sd(arm(false));
            let pooled = ((sd_t * sd_t + sd_c * sd_c) / 2.0).sqrt();
            let normalized_diff = if pooled > 0.0 {
                Some((mean_t - mean_c) / pooled)
            } else if mean_t == mean_c {
                Some(0.0)
            } else {
                None
            };
            let log_sd_ratio = (sd_t > 0.0 && sd_c > 0.0).then(|| (sd_t / sd_c).ln());
            BalanceRow {
                covariate: name.clone(),
                mean_treated: mean_t,
                sd_treated: sd_t,
                mean_control: mean_c,
                sd_control: sd_c,
                normalized_diff,
                log_sd_ratio,
            }
        })
        .collect();
    Ok(BalanceReport {
        n_treated,
        n_control,
        rows,
    })
}

impl BalanceReport {
    /// Aligned text rendering: one row per covariate, undefined entries as `-`.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let header = [
            "covariate",
            "mean_t",
            "sd_t",
            "mean_c",
            "sd_c",
            "norm_diff",
            "log_sd_ratio",
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.covariate.clone(),
                    format!("{:.3}", r.mean_treated),
                    format!("({:.3})", r.sd_treated),
                    format!("{:.3}", r.mean_control),
                    format!("({:.3})", r.sd_control),
                    fmt_opt(r.normalized_diff),
                    fmt_opt(r.log_sd_ratio),
                ]
            })
            .collect();
        let mut out = format!(
            "treated n = {}, control n = {}\n",
            self.n_treated, self.n_control
        );
        out.push_str(&crate::table::render(&header, &body));
        out
    }
}
