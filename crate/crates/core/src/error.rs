use thiserror::Error;

/// Errors raised while ingesting or partitioning data.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("non-binary treatment at row {row}: `{value}`")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("non-numeric outcome at row {row}: `{value}`")]
    NonNumericOutcome { row: usize, value: String },
    #[error("missing value at row {row}, column `{column}`")]
    MissingCell { row: usize, column: String },
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("number of folds {k} must satisfy 2 <= K <= n = {n}")]
    BadFoldCount { k: usize, n: usize },
    #[error("{arm} arm has {found} rows, need at least {needed}")]
    ArmTooSmall {
        arm: &'static str,
        found: usize,
        needed: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid value in column `{column}` at row {row}: {message}")]
    InvalidValue {
        column: String,
        row: usize,
        message: String,
    },
}

/// Errors raised by the nuisance and CATE learners.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("need at least {needed} rows to fit, found {found}")]
    InsufficientRows { needed: usize, found: usize },
    #[error("fold {fold}: complement has {found} {arm} rows, need at least {needed}")]
    FoldArmTooSmall {
        fold: usize,
        arm: &'static str,
        found: usize,
        needed: usize,
    },
    #[error("treatment vector contains a single class")]
    OneClass,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised while growing trees.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("empty input")]
    Empty,
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("no admissible split: {0}")]
    NoAdmissibleSplit(String),
    #[error("invalid stop rules: {0}")]
    InvalidStopRules(String),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised by pruning and grouping selection.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("no subtree with {requested} leaves; available leaf counts: {available:?}")]
    NoSubtreeWithLeaves {
        requested: usize,
        available: Vec<usize>,
    },
    #[error("fold {fold} too small to grow a tree: {rows} rows, need {needed}")]
    FoldTooSmall {
        fold: usize,
        rows: usize,
        needed: usize,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised during GATE estimation and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite nuisance value at row {0}")]
    NonFinite(usize),
    #[error("leaf {0} is empty")]
    EmptyLeaf(usize),
    #[error("leaf {leaf} has no {arm} observations")]
    SingleArmLeaf { leaf: usize, arm: &'static str },
    #[error("leaf {0} has an undefined standard error")]
    UndefinedSe(usize),
    #[error("need at least {needed} leaves, found {found}")]
    TooFewLeaves { needed: usize, found: usize },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    BadLevel(f64),
}

/// Errors raised by the Monte Carlo engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("no successful replications")]
    EmptyRuns,
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Data(#[from] DataError),
}
