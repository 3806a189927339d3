use std::fmt;

use aggtree::{DataError, GateError, LearnerError, PruneError, SimError, TreeError};

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingestion,
    Artifacts,
    Estimation,
    Growing,
    Pruning,
    Nuisance,
    Gates,
    Simulation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingestion => "ingestion",
            Stage::Artifacts => "artifacts",
            Stage::Estimation => "estimation",
            Stage::Growing => "tree-growing",
            Stage::Pruning => "pruning",
            Stage::Nuisance => "nuisance",
            Stage::Gates => "gates",
            Stage::Simulation => "simulation",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, input file or artifact.
    Input,
    /// The data do not support the requested estimate.
    Degenerate,
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error in stage {}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn input(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Input, message)
    }

    pub fn internal(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Internal, message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input => 2,
            ErrorKind::Degenerate => 3,
            ErrorKind::Internal => 4,
        }
    }
}

/// Maps a component error to its exit-code class.
pub trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;

    fn at(&self, stage: Stage) -> CliError {
        CliError::new(stage, self.kind(), self.to_string())
    }
}

impl Classify for DataError {
    fn kind(&self) -> ErrorKind {
        match self {
            DataError::ArmTooSmall { .. } | DataError::TooFewRows { .. } => ErrorKind::Degenerate,
            DataError::LengthMismatch(_) => ErrorKind::Internal,
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for LearnerError {
    fn kind(&self) -> ErrorKind {
        match self {
            LearnerError::InvalidParam(_) => ErrorKind::Input,
            LearnerError::Data(e) => e.kind(),
            _ => ErrorKind::Degenerate,
        }
    }
}

impl Classify for TreeError {
    fn kind(&self) -> ErrorKind {
        match self {
            TreeError::InvalidStopRules(_) | TreeError::Malformed(_) => ErrorKind::Input,
            TreeError::Data(e) => e.kind(),
            _ => ErrorKind::Degenerate,
        }
    }
}

impl Classify for PruneError {
    fn kind(&self) -> ErrorKind {
        match self {
            PruneError::NegativeAlpha(_) | PruneError::NoSubtreeWithLeaves { .. } => ErrorKind::Input,
            PruneError::FoldTooSmall { .. } => ErrorKind::Degenerate,
            PruneError::Tree(e) => e.kind(),
            PruneError::Data(e) => e.kind(),
        }
    }
}

impl Classify for GateError {
    fn kind(&self) -> ErrorKind {
        match self {
            GateError::BadLevel(_) => ErrorKind::Input,
            GateError::LengthMismatch(_) => ErrorKind::Internal,
            _ => ErrorKind::Degenerate,
        }
    }
}

impl Classify for SimError {
    fn kind(&self) -> ErrorKind {
        match self {
            SimError::Config(_) => ErrorKind::Input,
            SimError::EmptyRuns => ErrorKind::Degenerate,
            SimError::Learner(e) => e.kind(),
            SimError::Tree(e) => e.kind(),
            SimError::Prune(e) => e.kind(),
            SimError::Gate(e) => e.kind(),
            SimError::Data(e) => e.kind(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let missing = DataError::MissingColumn("y".into()).at(Stage::Ingestion);
        assert_eq!(missing.exit_code(), 2);
        assert_eq!(missing.to_string(), "error in stage ingestion: missing column `y`");
        assert_eq!(GateError::EmptyLeaf(2).at(Stage::Gates).exit_code(), 3);
        assert_eq!(LearnerError::Data(DataError::Csv("x".into())).at(Stage::Estimation).exit_code(), 2);
        assert_eq!(CliError::internal(Stage::Output, "disk full").exit_code(), 4);
    }
}
