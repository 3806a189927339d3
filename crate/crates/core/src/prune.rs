//! Cost-complexity pruning and cross-validated choice of the complexity
//! parameter.
//!
//! For a subtree `T` of the grown tree, `C_alpha(T) = loss(T) + alpha * |T|`
//! where `|T|` counts leaves. Weakest-link pruning yields thresholds
//! `0 = alpha_0 < alpha_1 < ... < alpha_max` and nested subtrees such that
//! the `k`-th subtree is the smallest minimizer of `C_alpha` for every
//! `alpha` in `[alpha_k, alpha_{k+1})`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{make_folds, Covariates};
use crate::error::PruneError;
use crate::tree::{grow_aggregation_tree, grow_causal_tree, StopRules, Tree, TreeKind};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSequence {
    /// Finest first; the last subtree is the root.
    pub subtrees: Vec<Tree>,
    /// `alphas[k]` is the lower end of the interval on which `subtrees[k]`
    /// is optimal.
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Per-node quantities of the current subtree, indexed by position in the
/// grown tree.
struct Branch {
    leaves: usize,
    risk: f64,
}

fn branches(tree: &Tree, collapsed: &HashSet<usize>) -> Vec<Option<Branch>> {
    let nodes = tree.nodes();
    let mut out: Vec<Option<Branch>> = (0..nodes.len()).map(|_| None).collect();
    // Children always follow their parent in a freshly grown tree, but walk
    // in explicit post-order to avoid relying on it.
    let mut order = Vec::with_capacity(nodes.len());
    let mut stack = vec![0];
    while let Some(pos) = stack.pop() {
        order.push(pos);
        if let Some((l, r)) = nodes[pos].children {
            if !collapsed.contains(&nodes[pos].id) {
                stack.push(l);
                stack.push(r);
            }
        }
    }
    for &pos in order.iter().rev() {
        let node = &nodes[pos];
        out[pos] = Some(match node.children {
            Some((l, r)) if !collapsed.contains(&node.id) => {
                let (a, b) = (out[l].as_ref().expect("child first"), out[r].as_ref().expect("child first"));
                Branch {
                    leaves: a.leaves + b.leaves,
                    risk: a.risk + b.risk,
                }
            }
            _ => Branch {
                leaves: 1,
                risk: node.risk,
            },
        });
    }
    out
}

/// Critical values `g(t)` of the internal nodes of the current subtree.
fn critical_values(tree: &Tree, collapsed: &HashSet<usize>) -> Vec<(usize, f64)> {
    let info = branches(tree, collapsed);
    tree.nodes()
        .iter()
        .enumerate()
        .filter_map(|(pos, node)| {
            let b = info[pos].as_ref()?;
            (b.leaves > 1).then(|| (node.id, (node.risk - b.risk) / (b.leaves - 1) as f64))
        })
        .collect()
}

/// Weakest-link pruning of a grown tree. Nodes sharing the minimal critical
/// value (up to a relative tolerance) collapse in the same step; branches
/// whose removal does not change the loss are pruned from the first subtree.
pub fn weakest_link_sequence(tree: &Tree) -> Result<PruneSequence, PruneError> {
    tree.validate()?;
    let scale = tree.root().risk.abs() + tree.leaves().iter().map(|n| n.risk.abs()).sum::<f64>();
    let tol = 1e-9 * scale;
    let mut collapsed: HashSet<usize> = HashSet::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut subtrees: Vec<Tree> = Vec::new();
    let mut current_alpha = 0.0f64;
    loop {
        let g = critical_values(tree, &collapsed);
        let Some(gmin) = g.iter().map(|&(_, v)| v).reduce(f64::min) else {
            break;
        };
        let level = if alphas.is_empty() {
            // Branches with no loss reduction fold into the first subtree.
            if gmin <= tol {
                0.0
            } else {
                alphas.push(0.0);
                subtrees.push(tree.collapse(&collapsed));
                continue;
            }
        } else {
            gmin.max(current_alpha)
        };
        // Collapse every node at the current level, repeating while
        // collapses expose further ties.
        loop {
            let hits: Vec<usize> = critical_values(tree, &collapsed)
                .into_iter()
                .filter(|&(_, v)| v <= level + tol)
                .map(|(id, _)| id)
                .collect();
            if hits.is_empty() {
                break;
            }
            collapsed.extend(hits);
        }
        let sub = tree.collapse(&collapsed);
        if alphas.is_empty() {
            alphas.push(0.0);
            subtrees.push(sub);
        } else if level <= current_alpha + tol {
            *subtrees.last_mut().expect("non-empty") = sub;
        } else {
            alphas.push(level);
            subtrees.push(sub);
            current_alpha = level;
        }
    }
    if subtrees.is_empty() {
        alphas.push(0.0);
        subtrees.push(tree.collapse(&collapsed));
    }
    let losses = subtrees.iter().map(Tree::loss).collect();
    Ok(PruneSequence {
        subtrees,
        alphas,
        losses,
    })
}

/// Subtree optimal at `alpha`; a value exactly at a threshold maps to the
/// coarser subtree.
pub fn subtree_at_alpha(seq: &PruneSequence, alpha: f64) -> Result<&Tree, PruneError> {
    if !(alpha >= 0.0) {
        return Err(PruneError::NegativeAlpha(alpha));
    }
    let k = seq.alphas.partition_point(|&a| a <= alpha).saturating_sub(1);
    Ok(&seq.subtrees[k])
}

/// The subtree in the sequence with exactly `leaves` leaves.
pub fn subtree_with_leaves(seq: &PruneSequence, leaves: usize) -> Result<&Tree, PruneError> {
    seq.subtrees
        .iter()
        .find(|t| t.n_leaves() == leaves)
        .ok_or_else(|| PruneError::NoSubtreeWithLeaves {
            requested: leaves,
            available: seq.leaf_counts(),
        })
}

#[derive(Serialize)]
struct LeafExport {
    rule: String,
    node_id: usize,
    n: usize,
    value: f64,
}

#[derive(Serialize)]
struct StepExport {
    alpha_interval: (f64, Option<f64>),
    leaf_count: usize,
    loss: f64,
    leaves: Vec<LeafExport>,
}

impl PruneSequence {
    pub fn len(&self) -> usize {
        self.subtrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtrees.is_empty()
    }

    pub fn full(&self) -> &Tree {
        &self.subtrees[0]
    }

    /// Leaf counts, finest first.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.subtrees.iter().map(Tree::n_leaves).collect()
    }

    /// JSON array with one entry per subtree: its alpha interval (upper end
    /// `null` for the root), leaf count, loss and leaves.
    pub fn to_json(&self) -> String {
        let steps: Vec<StepExport> = self
            .subtrees
            .iter()
            .enumerate()
            .map(|(k, t)| StepExport {
                alpha_interval: (self.alphas[k], self.alphas.get(k + 1).copied()),
                leaf_count: t.n_leaves(),
                loss: self.losses[k],
                leaves: t
                    .leaf_positions()
                    .into_iter()
                    .map(|pos| {
                        let node = &t.nodes()[pos];
                        LeafExport {
                            rule: t.rule_path(pos),
                            node_id: node.id,
                            n: node.n,
                            value: node.value,
                        }
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&steps).expect("sequence serializes")
    }
}

/// What a tree is grown on.
#[derive(Debug, Clone, Copy)]
pub enum GrowTarget<'a> {
    Aggregation { tau_hat: &'a [f64] },
    Causal { y: &'a [f64], d: &'a [bool] },
}

impl GrowTarget<'_> {
    pub fn kind(&self) -> TreeKind {
        match self {
            Self::Aggregation { .. } => TreeKind::Aggregation,
            Self::Causal { .. } => TreeKind::Causal,
        }
    }

    pub fn grow(&self, x: &Covariates, stop: &StopRules) -> Result<Tree, PruneError> {
        Ok(match self {
            Self::Aggregation { tau_hat } => grow_aggregation_tree(x, tau_hat, stop)?,
            Self::Causal { y, d } => grow_causal_tree(x, y, d, stop)?,
        })
    }

    fn grow_on(&self, x: &Covariates, rows: &[usize], stop: &StopRules) -> Result<Tree, PruneError> {
        let xs = x.select_rows(rows);
        match self {
            Self::Aggregation { tau_hat } => {
                let t: Vec<f64> = rows.iter().map(|&i| tau_hat[i]).collect();
                Ok(grow_aggregation_tree(&xs, &t, stop)?)
            }
            Self::Causal { y, d } => {
                let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                let ds: Vec<bool> = rows.iter().map(|&i| d[i]).collect();
                Ok(grow_causal_tree(&xs, &ys, &ds, stop)?)
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Aggregation { tau_hat } => tau_hat.len(),
            Self::Causal { y, .. } => y.len(),
        }
    }

    /// Held-out loss of `tree` on `rows`, unnormalized.
    fn held_out_loss(&self, tree: &Tree, x: &Covariates, rows: &[usize]) -> f64 {
        let nodes = tree.nodes();
        match self {
            Self::Aggregation { tau_hat } => rows
                .iter()
                .map(|&i| (tau_hat[i] - nodes[tree.route(x, i)].value).powi(2))
                .sum(),
            Self::Causal { y, d } => {
                // Per leaf: n_te * (tau_tr^2 - 2 * tau_te * tau_tr).
                let mut acc = vec![(0usize, 0.0f64, 0usize, 0.0f64); nodes.len()];
                for &i in rows {
                    let a = &mut acc[tree.route(x, i)];
                    if d[i] {
                        a.0 += 1;
                        a.1 += y[i];
                    } else {
                        a.2 += 1;
                        a.3 += y[i];
                    }
                }
                acc.iter()
                    .enumerate()
                    .filter(|(_, a)| a.0 + a.2 > 0)
                    .map(|(pos, &(n1, s1, n0, s0))| {
                        let tr = nodes[pos].value;
                        let te = if n1 > 0 && n0 > 0 {
                            s1 / n1 as f64 - s0 / n0 as f64
                        } else {
                            tr
                        };
                        (n1 + n0) as f64 * (tr * tr - 2.0 * te * tr)
                    })
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub sequence: PruneSequence,
    /// One candidate per subtree of `sequence`.
    pub candidates: Vec<f64>,
    /// Held-out loss per candidate, averaged over all rows.
    pub cv_loss: Vec<f64>,
    pub selected_index: usize,
    pub selected_alpha: f64,
}

impl CvResult {
    pub fn selected(&self) -> &Tree {
        &self.sequence.subtrees[self.selected_index]
    }
}

/// Candidate values: geometric means of adjacent thresholds, and twice the
/// largest threshold for the root.
fn candidate_alphas(alphas: &[f64]) -> Vec<f64> {
    let m = alphas.len();
    (0..m)
        .map(|k| if k + 1 < m { (alphas[k] * alphas[k + 1]).sqrt() } else { 2.0 * alphas[k] })
        .collect()
}

/// Grows the tree on all rows, prunes it, and picks the candidate alpha
/// with the smallest `k`-fold held-out loss. Ties go to the larger alpha.
pub fn cross_validate_alpha(
    x: &Covariates,
    target: GrowTarget<'_>,
    stop: &StopRules,
    k: usize,
    seed: u64,
) -> Result<CvResult, PruneError> {
    let n = x.n_rows();
    if target.len() != n {
        return Err(crate::error::DataError::LengthMismatch(format!(
            "target has {} values, x has {n} rows",
            target.len()
        ))
        .into());
    }
    let folds = make_folds(n, k, seed)?;
    let needed = 2 * stop.min_leaf;
    for fold in 0..k {
        let rows = n - folds.members(fold).len();
        if rows < needed {
            return Err(PruneError::FoldTooSmall { fold, rows, needed });
        }
    }
    let sequence = weakest_link_sequence(&target.grow(x, stop)?)?;
    let candidates = candidate_alphas(&sequence.alphas);
    let per_fold: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train = folds.complement(fold);
            let test = folds.members(fold);
            let seq = weakest_link_sequence(&target.grow_on(x, &train, stop)?)?;
            candidates
                .iter()
                .map(|&a| Ok(target.held_out_loss(subtree_at_alpha(&seq, a)?, x, &test)))
                .collect::<Result<Vec<f64>, PruneError>>()
        })
        .collect::<Result<_, _>>()?;
    let cv_loss: Vec<f64> = (0..candidates.len())
        .map(|c| per_fold.iter().map(|f| f[c]).sum::<f64>() / n as f64)
        .collect();
    let best = cv_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(f64::MIN_POSITIVE);
    let selected_index = (0..cv_loss.len())
        .rev()
        .find(|&c| cv_loss[c] <= best + tol)
        .expect("at least one candidate");
    Ok(CvResult {
        selected_alpha: candidates[selected_index],
        sequence,
        candidates,
        cv_loss,
        selected_index,
    })
}
