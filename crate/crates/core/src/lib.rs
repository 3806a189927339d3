//! Aggregation trees for heterogeneous treatment effects.
//!
//! The pipeline has three stages. CATEs are first estimated on a training
//! sample ([`cate`]). A deep tree approximating them is then grown
//! ([`tree`]) and pruned into a nested sequence of optimal groupings
//! ([`prune`]). Finally, for any grouping in that sequence, group average
//! treatment effects are estimated on a separate honest sample from
//! doubly-robust scores built with cross-fitted nuisances ([`nuisance`],
//! [`gate`]).
//!
//! [`sim`] runs Monte Carlo studies of the whole procedure on synthetic
//! populations.

pub mod cate;
pub mod data;
pub mod error;
pub mod forest;
pub mod gate;
pub mod logistic;
pub mod nuisance;
pub mod prune;
pub mod rng;
pub mod sim;
pub mod split;
pub mod stats;
pub mod table;
pub mod tree;

pub use cate::{fit_t_learner, fit_x_learner, predict_cate, CateKind, CateModel, XWeight};
pub use data::{
    balance_table, load_csv, load_csv_with, make_folds, split_honest, BalanceReport, Covariates,
    Dataset, Feature, FeatureKind, FoldAssignment, SampleSplit,
};
pub use error::{DataError, GateError, LearnerError, PruneError, SimError, TreeError};
pub use forest::{fit_regression_forest, predict_forest, ForestParams, RegressionForest};
pub use gate::{
    dr_scores, gate_diff_means, gate_from_scores, holm_adjust, leaf_profiles,
    pairwise_differences, DiffTable, DrScores, GateTable, LeafProfiles, VarianceKind,
};
pub use logistic::{fit_logistic, LogisticModel};
pub use nuisance::{crossfit_nuisances, NuisanceEstimates, PropensityMethod};
pub use prune::{
    cross_validate_alpha, subtree_at_alpha, subtree_with_leaves, weakest_link_sequence,
    CvResult, GrowTarget, PruneSequence,
};
pub use split::Split;
pub use tree::{
    apply_tree, grow_aggregation_tree, grow_causal_tree, tree_count_lower_bound, Node,
    StopRules, Tree, TreeKind,
};
