use std::path::{Path, PathBuf};

use aggtree::data::ColumnSelection;
use aggtree::nuisance::PropensityMethod;
use aggtree::{CateKind, ForestParams, StopRules, VarianceKind, XWeight};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage};

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// How a grouping is picked from the pruning sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", try_from = "SelectionFile")]
pub enum Selection {
    /// Cross-validated alpha on the training sample.
    #[default]
    Cv,
    Explicit { alpha: f64 },
    ByLeafCount { leaves: usize },
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Cv,
    Explicit,
    ByLeafCount,
}

/// Flat on-disk form of [`Selection`], so that keys belonging to another
/// mode are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionFile {
    mode: Mode,
    alpha: Option<f64>,
    leaves: Option<usize>,
}

impl TryFrom<SelectionFile> for Selection {
    type Error = String;

    fn try_from(f: SelectionFile) -> Result<Self, String> {
        match (f.mode, f.alpha, f.leaves) {
            (Mode::Cv, None, None) => Ok(Selection::Cv),
            (Mode::Explicit, Some(alpha), None) => Ok(Selection::Explicit { alpha }),
            (Mode::ByLeafCount, None, Some(leaves)) => Ok(Selection::ByLeafCount { leaves }),
            _ => Err("selection needs mode = \"cv\", mode = \"explicit\" with alpha, \
                 or mode = \"by_leaf_count\" with leaves, and nothing else"
                .into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub kind: CateKind,
    /// Used by the CATE learner and by the cross-fitted nuisances. Its
    /// `seed` is replaced by streams derived from the run seed.
    pub forest: ForestParams,
    pub propensity: PropensityMethod,
    /// X-learner only.
    pub x_weight: XWeight,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: CateKind::TLearner,
            forest: ForestParams::default(),
            propensity: PropensityMethod::Logistic,
            x_weight: XWeight::Propensity,
        }
    }
}

fn default_half() -> f64 {
    0.5
}

fn default_folds() -> usize {
    5
}

fn default_level() -> f64 {
    0.95
}

fn default_clip() -> f64 {
    0.01
}

/// Library stop rules with a 1% complexity threshold. Without one, cross
/// validation on a deterministic CATE surface favours very fine groupings
/// whose leaves are often empty on the honest sample.
fn default_stop() -> StopRules {
    StopRules {
        cp: 0.01,
        ..StopRules::default()
    }
}

/// A `[stop]` table that omits `cp` gets the same threshold as no table.
fn stop_with_default_cp<'de, D: serde::Deserializer<'de>>(d: D) -> Result<StopRules, D::Error> {
    let mut table = toml::Table::deserialize(d)?;
    table.entry("cp").or_insert(toml::Value::Float(default_stop().cp));
    table.try_into().map_err(serde::de::Error::custom)
}

fn default_out() -> PathBuf {
    PathBuf::from("aggtree-out")
}

/// Configuration shared by `fit`, `gates` and `balance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// CSV file; relative paths are resolved against the config file.
    pub input: PathBuf,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: ColumnSelection,
    /// Share of rows held out for GATE estimation.
    #[serde(default = "default_half")]
    pub honest_fraction: f64,
    /// Cross-fitting folds for the nuisance regressions.
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Folds for cross-validating alpha.
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default = "default_stop", deserialize_with = "stop_with_default_cp")]
    pub stop: StopRules,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub variance: VarianceKind,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
}

/// The parts of a run config that determine `fit` artifacts.
#[derive(Serialize)]
pub(crate) struct FitKey<'a> {
    input: &'a Path,
    outcome: &'a str,
    treatment: &'a str,
    covariates: &'a ColumnSelection,
    honest_fraction: f64,
    cv_folds: usize,
    learner: &'a LearnerConfig,
    stop: &'a StopRules,
    seed: u64,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CliError::input(Stage::Config, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves and validates a config file, then applies overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.input = base.join(&cfg.input);
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(level) = overrides.level {
            cfg.level = level;
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::input(Stage::Config, m));
        if self.schema_version != RUN_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !(self.honest_fraction > 0.0 && self.honest_fraction < 1.0) {
            return bad(format!("honest_fraction = {} must lie in (0, 1)", self.honest_fraction));
        }
        if self.folds < 2 || self.cv_folds < 2 {
            return bad("folds and cv_folds must be at least 2".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level = {} must lie in (0, 1)", self.level));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return bad(format!("clip_eps = {} must lie in (0, 0.5)", self.clip_eps));
        }
        match self.selection {
            Selection::Explicit { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                return bad(format!("alpha = {alpha} must be finite and non-negative"));
            }
            Selection::ByLeafCount { leaves: 0 } => return bad("leaves must be at least 1".into()),
            _ => {}
        }
        self.stop.validate().map_err(|e| CliError::input(Stage::Config, e.to_string()))
    }

    pub(crate) fn fit_key(&self) -> FitKey<'_> {
        FitKey {
            input: &self.input,
            outcome: &self.outcome,
            treatment: &self.treatment,
            covariates: &self.covariates,
            honest_fraction: self.honest_fraction,
            cv_folds: self.cv_folds,
            learner: &self.learner,
            stop: &self.stop,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
input = "data.csv"
outcome = "y"
treatment = "d"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.selection, Selection::Cv);
        assert_eq!(cfg.honest_fraction, 0.5);
        assert_eq!(cfg.learner.kind, CateKind::TLearner);
        assert_eq!(cfg.stop.cp, 0.01);
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[stop]\nmin_leaf = 8\n")).unwrap();
        assert_eq!((cfg.stop.min_leaf, cfg.stop.cp), (8, 0.01));
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[stop]\ncp = 0.0\n")).unwrap();
        assert_eq!(cfg.stop.cp, 0.0);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn selection_modes_parse() {
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[selection]\nmode = \"by_leaf_count\"\nleaves = 4\n")).unwrap();
        assert_eq!(cfg.selection, Selection::ByLeafCount { leaves: 4 });
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[selection]\nmode = \"explicit\"\nalpha = 0.5\n")).unwrap();
        assert_eq!(cfg.selection, Selection::Explicit { alpha: 0.5 });
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for extra in [
            "colour = 1\n",
            "[stop]\nmin_leafs = 3\n",
            "[learner]\nkind = \"s_learner\"\n",
            "[selection]\nmode = \"cv\"\nalpha = 1.0\n",
        ] {
            assert!(RunConfig::from_toml(&format!("{MINIMAL}{extra}")).is_err(), "{extra}");
        }
        for value in ["honest_fraction = 1.0\n", "level = 0.0\n", "folds = 1\n"] {
            let err = RunConfig::from_toml(&format!("{MINIMAL}{value}")).unwrap_err();
            assert_eq!(err.exit_code(), 2);
        }
        assert!(RunConfig::from_toml(&MINIMAL.replace("= 1", "= 2")).is_err());
    }
}
