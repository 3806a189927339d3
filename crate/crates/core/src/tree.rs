//! Greedy growth of the deep tree that constrains the admissible groupings.
//!
//! Two splitting rules are supported:
//!
//! * **aggregation** trees approximate pre-estimated CATEs `tau_hat` and choose
//!   splits minimizing the within-child sum of squared deviations of
//!   `tau_hat`;
//! * **causal** trees (adaptive variant) choose splits maximizing
//!   `sum_l n_l * tau_l^2`, with `tau_l` the within-child difference in mean
//!   outcomes between treated and control units.
//!
//! In both cases a node with `n_t` training rows and value `v_t` contributes
//! `-n_t * v_t^2 / n` to the in-sample loss when it is a leaf. That per-node
//! *risk* drives cost-complexity pruning.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Feature};
use crate::error::TreeError;
use crate::split::{best_split, partition, ArmStats, CausalCriterion, SseCriterion, Split};

pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Aggregation,
    Causal,
}

/// Stopping rules for tree growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopRules {
    pub min_leaf: usize,
    /// Causal trees only.
    pub min_leaf_treated: usize,
    /// Causal trees only.
    pub min_leaf_control: usize,
    pub max_depth: Option<usize>,
    /// A split is made only if it lowers the unnormalized loss by more than
    /// `min_gain + cp * root_deviance`.
    pub min_gain: f64,
    /// Complexity threshold relative to the root deviance: the sum of
    /// squared deviations of `tau_hat` (aggregation) or of outcomes from
    /// their arm means (causal).
    pub cp: f64,
}

impl Default for StopRules {
    fn default() -> Self {
        Self {
            min_leaf: 5,
            min_leaf_treated: 3,
            min_leaf_control: 3,
            max_depth: None,
            min_gain: 0.0,
            cp: 0.0,
        }
    }
}

impl StopRules {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.min_leaf == 0 || self.min_leaf_treated == 0 || self.min_leaf_control == 0 {
            return Err(TreeError::InvalidStopRules(
                "leaf minimums must be at least 1".into(),
            ));
        }
        if self.max_depth == Some(0) {
            return Err(TreeError::InvalidStopRules("max_depth must be at least 1".into()));
        }
        if !(self.min_gain >= 0.0 && self.min_gain.is_finite()) {
            return Err(TreeError::InvalidStopRules(format!(
                "min_gain must be finite and non-negative, got {}",
                self.min_gain
            )));
        }
        if !(self.cp >= 0.0 && self.cp.is_finite()) {
            return Err(TreeError::InvalidStopRules(format!(
                "cp must be finite and non-negative, got {}",
                self.cp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Identifier in the fully grown tree; preserved by pruning.
    pub id: usize,
    /// Position of the parent in this tree's node array.
    pub parent: Option<usize>,
    pub depth: usize,
    pub split: Option<Split>,
    /// Positions of the (left, right) children in this tree's node array.
    pub children: Option<(usize, usize)>,
    /// Mean of `tau_hat` (aggregation) or difference in means (causal).
    pub value: f64,
    pub n: usize,
    pub n_treated: Option<usize>,
    pub n_control: Option<usize>,
    /// Contribution of this node to the in-sample loss when it is a leaf.
    pub risk: f64,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub kind: TreeKind,
    pub features: Vec<Feature>,
    pub n_train: usize,
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Leaf positions in depth-first, left-before-right order.
    pub fn leaf_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(pos) = stack.pop() {
            match self.nodes[pos].children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(pos),
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<&Node> {
        self.leaf_positions().into_iter().map(|p| &self.nodes[p]).collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// In-sample loss of the tree: the sum of its leaf risks.
    pub fn loss(&self) -> f64 {
        self.leaves().iter().map(|n| n.risk).sum()
    }

    /// Position of the node holding `id`, if present.
    pub fn position_of(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Leaf position reached by row `i` of `x` (assumed conforming).
    pub fn route(&self, x: &Covariates, i: usize) -> usize {
        let mut pos = 0;
        while let (Some((l, r)), Some(split)) = (self.nodes[pos].children, &self.nodes[pos].split) {
            pos = if split.goes_left(x.get(i, split.feature())) { l } else { r };
        }
        pos
    }

    /// Stable node ids of the leaves reached by each row of `x`.
    pub fn leaf_ids(&self, x: &Covariates) -> Result<Vec<usize>, TreeError> {
        let x = x.conform_to(&self.features)?;
        Ok((0..x.n_rows()).map(|i| self.nodes[self.route(&x, i)].id).collect())
    }

    /// Subtree obtained by turning the nodes with the given ids into leaves.
    /// Descendants of collapsed nodes are dropped and the node array is
    /// compacted; node ids are preserved.
    pub fn collapse(&self, ids: &HashSet<usize>) -> Tree {
        let mut nodes = Vec::new();
        // (old position, new parent position)
        let mut stack: Vec<(usize, Option<usize>, bool)> = vec![(0, None, true)];
        while let Some((old, parent, is_left)) = stack.pop() {
            let src = &self.nodes[old];
            let new_pos = nodes.len();
            let keep_children = src.children.is_some() && !ids.contains(&src.id);
            let mut node = src.clone();
            node.parent = parent;
            node.children = None;
            if !keep_children {
                node.split = None;
            }
            nodes.push(node);
            if let Some(p) = parent {
                let entry: &mut Node = &mut nodes[p];
                let (l, r) = entry.children.unwrap_or((usize::MAX, usize::MAX));
                entry.children = Some(if is_left { (new_pos, r) } else { (l, new_pos) });
            }
            if keep_children {
                let (l, r) = src.children.expect("checked");
                stack.push((r, Some(new_pos), false));
                stack.push((l, Some(new_pos), true));
            }
        }
        Tree {
            kind: self.kind,
            features: self.features.clone(),
            n_train: self.n_train,
            nodes,
        }
    }

    /// Conjunction of split rules leading from the root to node `pos`.
    pub fn rule_path(&self, pos: usize) -> String {
        let mut rules = Vec::new();
        let mut cur = pos;
        while let Some(parent) = self.nodes[cur].parent {
            let p = &self.nodes[parent];
            let (l, _) = p.children.expect("parent has children");
            let split = p.split.as_ref().expect("parent has split");
            rules.push(split.describe(&self.features, l == cur));
            cur = parent;
        }
        if rules.is_empty() {
            return "(all)".into();
        }
        rules.reverse();
        rules.join(" & ")
    }

    /// Checks structural consistency of a deserialized tree.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Malformed(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        if self.nodes[0].parent.is_some() {
            return bad("root has a parent".into());
        }
        let mut seen_ids = HashSet::new();
        let mut reached = vec![false; self.nodes.len()];
        reached[0] = true;
        for (pos, node) in self.nodes.iter().enumerate() {
            if !seen_ids.insert(node.id) {
                return bad(format!("duplicate node id {}", node.id));
            }
            match (node.children, &node.split) {
                (Some((l, r)), Some(split)) => {
                    if l >= self.nodes.len() || r >= self.nodes.len() || l == r {
                        return bad(format!("node {} has invalid children", node.id));
                    }
                    for c in [l, r] {
                        if self.nodes[c].parent != Some(pos) || reached[c] {
                            return bad(format!("node {} has inconsistent child links", node.id));
                        }
                        reached[c] = true;
                    }
                    if split.feature() >= self.features.len() {
                        return bad(format!("node {} splits on a missing feature", node.id));
                    }
                }
                (None, None) => {}
                _ => return bad(format!("node {} mixes split and leaf markers", node.id)),
            }
            if !node.risk.is_finite() || !node.value.is_finite() {
                return bad(format!("node {} has non-finite statistics", node.id));
            }
        }
        if reached.iter().any(|r| !r) {
            return bad("unreachable nodes".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeFile {
            schema_version: TREE_SCHEMA_VERSION,
            tree: self.clone(),
        })
        .expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Tree, TreeError> {
        let file: TreeFile =
            serde_json::from_str(s).map_err(|e| TreeError::Malformed(e.to_string()))?;
        if file.schema_version != TREE_SCHEMA_VERSION {
            return Err(TreeError::Malformed(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        file.tree.validate()?;
        Ok(file.tree)
    }

    /// Graphviz rendering: one box per node with its split rule, size and
    /// value.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph aggregation_tree {\n  node [shape=box, fontname=\"Helvetica\"];\n");
        for node in &self.nodes {
            let head = match &node.split {
                Some(split) => split.describe(&self.features, true),
                None => "leaf".to_string(),
            };
            let _ = writeln!(
                out,
                "  n{} [label=\"{}\\nn = {}\\nvalue = {:.4}\"];",
                node.id,
                head.replace('"', "\\\""),
                node.n,
                node.value
            );
            if let Some((l, r)) = node.children {
                let _ = writeln!(out, "  n{} -> n{} [label=\"yes\"];", node.id, self.nodes[l].id);
                let _ = writeln!(out, "  n{} -> n{} [label=\"no\"];", node.id, self.nodes[r].id);
            }
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    schema_version: u32,
    tree: Tree,
}

/// Dense 1-based leaf labels (depth-first order) for each row of `x_new`.
pub fn apply_tree(tree: &Tree, x_new: &Covariates) -> Result<Vec<usize>, TreeError> {
    let x = x_new.conform_to(&tree.features)?;
    let mut label = vec![0; tree.nodes.len()];
    for (k, pos) in tree.leaf_positions().into_iter().enumerate() {
        label[pos] = k + 1;
    }
    Ok((0..x.n_rows()).map(|i| label[tree.route(&x, i)]).collect())
}

struct Pending {
    rows: Vec<usize>,
    parent: Option<(usize, bool)>,
    depth: usize,
}

fn push_child(nodes: &mut [Node], parent: Option<(usize, bool)>, pos: usize) {
    if let Some((p, is_left)) = parent {
        let (l, r) = nodes[p].children.unwrap_or((usize::MAX, usize::MAX));
        nodes[p].children = Some(if is_left { (pos, r) } else { (l, pos) });
    }
}

/// Grows an aggregation tree approximating `tau_hat`.
pub fn grow_aggregation_tree(
    x: &Covariates,
    tau_hat: &[f64],
    stop: &StopRules,
) -> Result<Tree, TreeError> {
    stop.validate()?;
    let n = x.n_rows();
    if n == 0 {
        return Err(TreeError::Empty);
    }
    if tau_hat.len() != n {
        return Err(TreeError::Data(crate::error::DataError::LengthMismatch(format!(
            "tau_hat has {} values, x has {n} rows",
            tau_hat.len()
        ))));
    }
    if let Some(i) = tau_hat.iter().position(|v| !v.is_finite()) {
        return Err(TreeError::NonFinite(i));
    }
    let crit = SseCriterion {
        response: tau_hat,
        min_leaf: stop.min_leaf,
    };
    let all_features: Vec<usize> = (0..x.n_features()).collect();
    let mut nodes: Vec<Node> = Vec::new();
    let mut stack = vec![Pending {
        rows: (0..n).collect(),
        parent: None,
        depth: 0,
    }];
    let mut threshold = stop.min_gain;
    while let Some(p) = stack.pop() {
        let m = p.rows.len();
        let mean = p.rows.iter().map(|&i| tau_hat[i]).sum::<f64>() / m as f64;
        let sse: f64 = p.rows.iter().map(|&i| (tau_hat[i] - mean).powi(2)).sum();
        if p.parent.is_none() {
            threshold += stop.cp * sse;
        }
        let sum_sq: f64 = p.rows.iter().map(|&i| tau_hat[i] * tau_hat[i]).sum();
        let tol = 1e-9 * sse + 1e-14 * sum_sq;
        let pos = nodes.len();
        nodes.push(Node {
            id: pos,
            parent: p.parent.map(|(q, _)| q),
            depth: p.depth,
            split: None,
            children: None,
            value: mean,
            n: m,
            n_treated: None,
            n_control: None,
            risk: -(m as f64) * mean * mean / n as f64,
        });
        push_child(&mut nodes, p.parent, pos);
        let depth_ok = stop.max_depth.is_none_or(|d| p.depth < d);
        if !depth_ok || m < 2 * stop.min_leaf {
            continue;
        }
        if let Some(best) = best_split(&crit, x, &p.rows, &all_features, tol) {
            if best.gain > threshold + tol {
                let (left, right) = partition(x, &p.rows, &best.split);
                nodes[pos].split = Some(best.split);
                stack.push(Pending {
                    rows: right,
                    parent: Some((pos, false)),
                    depth: p.depth + 1,
                });
                stack.push(Pending {
                    rows: left,
                    parent: Some((pos, true)),
                    depth: p.depth + 1,
                });
            }
        }
    }
    Ok(Tree {
        kind: TreeKind::Aggregation,
        features: x.features().to_vec(),
        n_train: n,
        nodes,
    })
}

/// Grows an adaptive causal tree on observed outcomes and treatments.
pub fn grow_causal_tree(
    x: &Covariates,
    y: &[f64],
    d: &[bool],
    stop: &StopRules,
) -> Result<Tree, TreeError> {
    stop.validate()?;
    let n = x.n_rows();
    if n == 0 {
        return Err(TreeError::Empty);
    }
    if y.len() != n || d.len() != n {
        return Err(TreeError::Data(crate::error::DataError::LengthMismatch(format!(
            "y has {} values, d has {}, x has {n} rows",
            y.len(),
            d.len()
        ))));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(TreeError::NonFinite(i));
    }
    let crit = CausalCriterion {
        y,
        d,
        min_leaf: stop.min_leaf,
        min_treated: stop.min_leaf_treated,
        min_control: stop.min_leaf_control,
    };
    let all_features: Vec<usize> = (0..x.n_features()).collect();
    let mut nodes: Vec<Node> = Vec::new();
    let mut stack = vec![Pending {
        rows: (0..n).collect(),
        parent: None,
        depth: 0,
    }];
    let mut threshold = stop.min_gain;
    while let Some(p) = stack.pop() {
        let mut stats = ArmStats::default();
        for &i in &p.rows {
            if d[i] {
                stats.n1 += 1;
                stats.sum1 += y[i];
            } else {
                stats.n0 += 1;
                stats.sum0 += y[i];
            }
        }
        let Some(effect) = stats.effect() else {
            let arm = if stats.n1 == 0 { "treated" } else { "control" };
            return Err(TreeError::NoAdmissibleSplit(format!(
                "node lacks {arm} observations, difference in means undefined"
            )));
        };
        let (m1, m0) = (
            stats.sum1 / stats.n1 as f64,
            stats.sum0 / stats.n0 as f64,
        );
        let within: f64 = p
            .rows
            .iter()
            .map(|&i| (y[i] - if d[i] { m1 } else { m0 }).powi(2))
            .sum();
        let sum_sq: f64 = p.rows.iter().map(|&i| y[i] * y[i]).sum();
        let tol = 1e-9 * within + 1e-14 * sum_sq;
        if p.parent.is_none() {
            threshold += stop.cp * within;
        }
        let m = p.rows.len();
        let pos = nodes.len();
        nodes.push(Node {
            id: pos,
            parent: p.parent.map(|(q, _)| q),
            depth: p.depth,
            split: None,
            children: None,
            value: effect,
            n: m,
            n_treated: Some(stats.n1),
            n_control: Some(stats.n0),
            risk: -(m as f64) * effect * effect / n as f64,
        });
        push_child(&mut nodes, p.parent, pos);
        let depth_ok = stop.max_depth.is_none_or(|dd| p.depth < dd);
        if !depth_ok || m < 2 * stop.min_leaf {
            continue;
        }
        if let Some(best) = best_split(&crit, x, &p.rows, &all_features, tol) {
            if best.gain > threshold + tol {
                let (left, right) = partition(x, &p.rows, &best.split);
                nodes[pos].split = Some(best.split);
                stack.push(Pending {
                    rows: right,
                    parent: Some((pos, false)),
                    depth: p.depth + 1,
                });
                stack.push(Pending {
                    rows: left,
                    parent: Some((pos, true)),
                    depth: p.depth + 1,
                });
            }
        }
    }
    Ok(Tree {
        kind: TreeKind::Causal,
        features: x.features().to_vec(),
        n_train: n,
        nodes,
    })
}

/// Lower bound on the number of distinct trees of depth at most `depth` over
/// `p` binary covariates: `prod_{d=1..depth} (p - d + 1)^(2^(d-1))`.
///
/// Zero when `depth > p`; one when `depth == 0`.
pub fn tree_count_lower_bound(p: u64, depth: u32) -> BigUint {
    if u64::from(depth) > p {
        return BigUint::from(0u32);
    }
    (1..=depth).fold(BigUint::from(1u32), |acc, d| {
        acc * BigUint::from(p - u64::from(d - 1)).pow(1u32 << (d - 1))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Covariates;

    fn grid_x(n: usize) -> Covariates {
        let x1: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let x2: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect();
        Covariates::from_columns(vec![x1, x2]).unwrap()
    }

    #[test]
    fn counting_bound_values() {
        assert_eq!(tree_count_lower_bound(10, 3), BigUint::from(3_317_760u64));
        assert_eq!(tree_count_lower_bound(20, 3), BigUint::from(757_926_720u64));
        assert_eq!(tree_count_lower_bound(5, 6), BigUint::from(0u32));
        assert_eq!(tree_count_lower_bound(7, 0), BigUint::from(1u32));
        for p in 1..30 {
            assert_eq!(tree_count_lower_bound(p, 1), BigUint::from(p));
        }
        // L_{p-1} == L_p
        assert_eq!(tree_count_lower_bound(6, 5), tree_count_lower_bound(6, 6));
    }

    #[test]
    fn constant_tau_gives_root() {
        let x = grid_x(100);
        let tree = grow_aggregation_tree(&x, &[0.3; 100], &StopRules::default()).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert!((tree.root().value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn too_few_rows_gives_root() {
        let stop = StopRules::default();
        let n = 2 * stop.min_leaf - 1;
        let x = grid_x(n);
        let tau: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let tree = grow_aggregation_tree(&x, &tau, &stop).unwrap();
        assert_eq!(tree.n_leaves(), 1);
    }

    #[test]
    fn step_is_found_first() {
        let n = 200;
        let x = grid_x(n);
        let tau: Vec<f64> = (0..n)
            .map(|i| if x.get(i, 0) > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let tree = grow_aggregation_tree(&x, &tau, &StopRules::default()).unwrap();
        match tree.root().split.as_ref().unwrap() {
            Split::Numeric { feature, threshold } => {
                assert_eq!(*feature, 0);
                assert!(*threshold > 0.5 && *threshold < 0.505);
            }
            other => panic!("unexpected split {other:?}"),
        }
        assert_eq!(tree.n_leaves(), 2);
    }

    #[test]
    fn errors_on_bad_input() {
        let x = grid_x(10);
        let mut tau = vec![0.0; 10];
        tau[3] = f64::NAN;
        assert_eq!(
            grow_aggregation_tree(&x, &tau, &StopRules::default()),
            Err(TreeError::NonFinite(3))
        );
        let empty = Covariates::empty_columns(0);
        assert_eq!(
            grow_aggregation_tree(&empty, &[], &StopRules::default()),
            Err(TreeError::Empty)
        );
    }

    #[test]
    fn all_control_causal_tree_errors() {
        let x = grid_x(20);
        let y = vec![1.0; 20];
        let d = vec![false; 20];
        let err = grow_causal_tree(&x, &y, &d, &StopRules::default()).unwrap_err();
        assert!(err.to_string().contains("no admissible split"));
    }

    #[test]
    fn apply_routes_boundary_left_and_labels_leaves() {
        let n = 100;
        let x = grid_x(n);
        let tau: Vec<f64> = (0..n)
            .map(|i| if x.get(i, 0) > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let tree = grow_aggregation_tree(&x, &tau, &StopRules::default()).unwrap();
        let Some(Split::Numeric { threshold, .. }) = tree.root().split.clone() else {
            panic!("numeric split expected")
        };
        let probe = Covariates::from_columns(vec![vec![threshold, threshold + 1e-9], vec![0.0, 0.0]])
            .unwrap();
        assert_eq!(apply_tree(&tree, &probe).unwrap(), vec![1, 2]);
        let root_only = grow_aggregation_tree(&x, &vec![1.0; n], &StopRules::default()).unwrap();
        assert!(apply_tree(&root_only, &x).unwrap().iter().all(|&l| l == 1));
        let wrong = Covariates::from_columns(vec![vec![0.0]]).unwrap();
        assert!(apply_tree(&tree, &wrong).is_err());
    }

    #[test]
    fn json_round_trip_and_dot() {
        let n = 60;
        let x = grid_x(n);
        let tau: Vec<f64> = (0..n).map(|i| (x.get(i, 0) * 6.0).floor()).collect();
        let tree = grow_aggregation_tree(&x, &tau, &StopRules::default()).unwrap();
        let back = Tree::from_json(&tree.to_json()).unwrap();
        assert_eq!(back, tree);
        let dot = tree.to_dot();
        assert!(dot.starts_with("digraph"));
        assert_eq!(dot.matches("[label=\"yes\"]").count(), tree.n_leaves() - 1);
        assert!(Tree::from_json("{\"schema_version\": 9}").is_err());
    }

    #[test]
    fn collapse_keeps_ids() {
        let n = 80;
        let x = grid_x(n);
        let tau: Vec<f64> = (0..n).map(|i| (x.get(i, 0) * 4.0).floor()).collect();
        let tree = grow_aggregation_tree(&x, &tau, &StopRules::default()).unwrap();
        assert_eq!(tree.n_leaves(), 4);
        let (l, _) = tree.root().children.unwrap();
        let left_id = tree.nodes()[l].id;
        let sub = tree.collapse(&HashSet::from([left_id]));
        sub.validate().unwrap();
        assert_eq!(sub.n_leaves(), 3);
        assert!(sub.leaves().iter().any(|n| n.id == left_id));
        let root = tree.collapse(&HashSet::from([0]));
        assert_eq!(root.n_leaves(), 1);
        assert_eq!(root.nodes().len(), 1);
    }
}
