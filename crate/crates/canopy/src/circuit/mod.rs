//! Tree-structured probabilistic circuits over binary variables.
//!
//! A circuit is an arena of sum, product, and leaf nodes. Children always
//! carry smaller ids than their parents (enforced by [`CircuitBuilder`]), so
//! a single forward sweep over the arena is a bottom-up evaluation and a
//! single reverse sweep is a top-down pass. Validity (tree shape,
//! decomposability, smoothness, simplex weights, scope coverage) is checked
//! by [`Circuit::validate`], never assumed.

pub mod eval;
mod flows;
mod io;

pub use flows::{FlowCache, FlowWorkspace, SumParamLayout};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of one of the `d` binary variables a circuit ranges over.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Var(pub u16);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Maximum number of variables a [`Scope`] can hold (bitset backing).
pub const MAX_VARS: usize = 128;

/// A set of variables, bitset semantics, up to [`MAX_VARS`] members.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Scope(u128);

impl Scope {
    pub const EMPTY: Scope = Scope(0);

    pub fn singleton(var: Var) -> Scope {
        debug_assert!(var.index() < MAX_VARS);
        Scope(1u128 << var.index())
    }

    /// The full scope {0, .., d-1}.
    pub fn full(d: usize) -> Scope {
        assert!(d <= MAX_VARS, "at most {MAX_VARS} variables supported");
        if d == MAX_VARS {
            Scope(u128::MAX)
        } else {
            Scope((1u128 << d) - 1)
        }
    }

    pub fn contains(self, var: Var) -> bool {
        self.0 & (1u128 << var.index()) != 0
    }

    pub fn insert(&mut self, var: Var) {
        self.0 |= 1u128 << var.index();
    }

    pub fn remove(&mut self, var: Var) {
        self.0 &= !(1u128 << var.index());
    }

    pub fn union(self, other: Scope) -> Scope {
        Scope(self.0 | other.0)
    }

    pub fn intersection(self, other: Scope) -> Scope {
        Scope(self.0 & other.0)
    }

    pub fn difference(self, other: Scope) -> Scope {
        Scope(self.0 & !other.0)
    }

    pub fn is_disjoint(self, other: Scope) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_subset_of(self, other: Scope) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn min_var(self) -> Option<Var> {
        if self.is_empty() {
            None
        } else {
            Some(Var(self.0.trailing_zeros() as u16))
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Var> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let idx = bits.trailing_zeros();
                bits &= bits - 1;
                Some(Var(idx as u16))
            }
        })
    }
}

impl std::fmt::Debug for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (i, v) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", v.0)?;
        }
        write!(f, "}}")
    }
}

impl FromIterator<Var> for Scope {
    fn from_iter<T: IntoIterator<Item = Var>>(iter: T) -> Self {
        let mut s = Scope::EMPTY;
        for v in iter {
            s.insert(v);
        }
        s
    }
}

/// Arena index of a node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Leaf distribution over a single binary variable.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub enum LeafParams {
    /// Point-estimated Bernoulli success probability.
    Bernoulli { p: f64 },
    /// Dirichlet-Categorical posterior concentrations for values 0 and 1.
    /// Evaluation uses the predictive mean alpha1 / (alpha0 + alpha1).
    Dirichlet { alpha0: f64, alpha1: f64 },
}

/// Bernoulli leaves are clamped to this range after any update so that
/// log(0) is impossible.
pub const LEAF_P_MIN: f64 = 1e-6;
pub const LEAF_P_MAX: f64 = 1.0 - 1e-6;

impl LeafParams {
    /// Probability assigned to the value 1.
    pub fn mean_one(&self) -> f64 {
        match *self {
            LeafParams::Bernoulli { p } => p,
            LeafParams::Dirichlet { alpha0, alpha1 } => alpha1 / (alpha0 + alpha1),
        }
    }

    /// Probability assigned to an observed bit.
    pub fn prob(&self, bit: u8) -> f64 {
        let p1 = self.mean_one();
        if bit == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    pub fn log_prob(&self, bit: u8) -> f64 {
        self.prob(bit).ln()
    }
}

/// One circuit node. Sum weights live on the node, aligned with `children`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        var: Var,
        params: LeafParams,
    },
    Sum {
        children: Vec<NodeId>,
        weights: Vec<f64>,
    },
    Product {
        children: Vec<NodeId>,
    },
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match self {
            Node::Leaf { .. } => &[],
            Node::Sum { children, .. } => children,
            Node::Product { children } => children,
        }
    }

    pub fn is_sum(&self) -> bool {
        matches!(self, Node::Sum { .. })
    }
}

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("node id {0} out of range (arena has {1} nodes)")]
    IdOutOfRange(u32, usize),
    #[error("variable {0} out of range for {1} variables")]
    VarOutOfRange(u16, usize),
    #[error("node cap {0} exceeded")]
    NodeCapExceeded(usize),
    #[error("{kind} node needs at least {min} children, got {got}")]
    ArityTooSmall {
        kind: &'static str,
        min: usize,
        got: usize,
    },
    #[error("sum node has {children} children but {weights} weights")]
    WeightArityMismatch { children: usize, weights: usize },
    #[error("input has {got} variables, circuit expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input entry at position {0} is {1}, expected 0 or 1")]
    NonBinaryInput(usize, u8),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("circuit text format: {0}")]
    Format(String),
}

/// A single violation found by [`Circuit::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Non-root node with zero or multiple parents (tree shape broken).
    NotATree { node: NodeId, parents: usize },
    /// Product node with two children whose scopes overlap.
    NonDisjointProduct {
        node: NodeId,
        child_a: NodeId,
        child_b: NodeId,
    },
    /// Sum node whose children do not all share one scope.
    NonSmoothSum { node: NodeId, child: NodeId },
    /// Sum weights negative or not summing to one.
    WeightsNotSimplex { node: NodeId, total: f64 },
    /// Sum or product with fewer than two children.
    ArityTooSmall { node: NodeId, arity: usize },
    /// Root scope misses part of the variable set.
    RootScopeIncomplete { missing: Scope },
    /// Variable not covered by any reachable leaf.
    VariableUncovered { var: Var },
    /// Leaf parameter outside its legal range.
    BadLeafParams { node: NodeId },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NotATree { node, parents } => {
                write!(f, "node {} has {} parents, tree needs exactly 1", node.0, parents)
            }
            Violation::NonDisjointProduct { node, child_a, child_b } => write!(
                f,
                "product {} has overlapping child scopes ({} vs {})",
                node.0, child_a.0, child_b.0
            ),
            Violation::NonSmoothSum { node, child } => {
                write!(f, "sum {} child {} has a different scope", node.0, child.0)
            }
            Violation::WeightsNotSimplex { node, total } => {
                write!(f, "sum {} weights sum to {total}, not 1", node.0)
            }
            Violation::ArityTooSmall { node, arity } => {
                write!(f, "node {} has arity {arity} < 2", node.0)
            }
            Violation::RootScopeIncomplete { missing } => {
                write!(f, "root scope misses {missing:?}")
            }
            Violation::VariableUncovered { var } => {
                write!(f, "variable {} appears in no leaf", var.0)
            }
            Violation::BadLeafParams { node } => write!(f, "leaf {} parameters out of range", node.0),
        }
    }
}

/// Outcome of [`Circuit::validate`]; an empty list means valid.
#[derive(Debug, Clone, Default)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance on sum-weight normalization.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A rooted circuit. `scopes` are computed at build time; children always
/// precede parents in the arena.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    nodes: Vec<Node>,
    root: NodeId,
    num_vars: usize,
    scopes: Vec<Scope>,
}

/// Default cap on arena size; generation and builders refuse to grow past it.
pub const DEFAULT_NODE_CAP: usize = 4096;

/// Incremental bottom-up constructor. Children must already exist when a
/// parent references them, which keeps the arena topologically sorted.
pub struct CircuitBuilder {
    nodes: Vec<Node>,
    num_vars: usize,
    node_cap: usize,
}

impl CircuitBuilder {
    pub fn new(num_vars: usize) -> Self {
        assert!(num_vars >= 1 && num_vars <= MAX_VARS);
        CircuitBuilder {
            nodes: Vec::new(),
            num_vars,
            node_cap: DEFAULT_NODE_CAP,
        }
    }

    pub fn with_node_cap(mut self, cap: usize) -> Self {
        self.node_cap = cap;
        self
    }

    fn push(&mut self, node: Node) -> Result<NodeId, CircuitError> {
        if self.nodes.len() >= self.node_cap {
            return Err(CircuitError::NodeCapExceeded(self.node_cap));
        }
        self.nodes.push(node);
        Ok(NodeId(self.nodes.len() as u32 - 1))
    }

    fn check_children(&self, children: &[NodeId]) -> Result<(), CircuitError> {
        for &c in children {
            if c.index() >= self.nodes.len() {
                return Err(CircuitError::IdOutOfRange(c.0, self.nodes.len()));
            }
        }
        Ok(())
    }

    pub fn leaf(&mut self, var: Var, p: f64) -> Result<NodeId, CircuitError> {
        self.leaf_with(var, LeafParams::Bernoulli { p })
    }

    pub fn leaf_with(&mut self, var: Var, params: LeafParams) -> Result<NodeId, CircuitError> {
        if var.index() >= self.num_vars {
            return Err(CircuitError::VarOutOfRange(var.0, self.num_vars));
        }
        self.push(Node::Leaf { var, params })
    }

    pub fn sum(&mut self, children: Vec<NodeId>, weights: Vec<f64>) -> Result<NodeId, CircuitError> {
        self.check_children(&children)?;
        if children.len() < 2 {
            return Err(CircuitError::ArityTooSmall {
                kind: "sum",
                min: 2,
                got: children.len(),
            });
        }
        if children.len() != weights.len() {
            return Err(CircuitError::WeightArityMismatch {
                children: children.len(),
                weights: weights.len(),
            });
        }
        self.push(Node::Sum { children, weights })
    }

    pub fn product(&mut self, children: Vec<NodeId>) -> Result<NodeId, CircuitError> {
        self.check_children(&children)?;
        if children.len() < 2 {
            return Err(CircuitError::ArityTooSmall {
                kind: "product",
                min: 2,
                got: children.len(),
            });
        }
        self.push(Node::Product { children })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Finish the arena. Only structural well-formedness is enforced here;
    /// semantic violations are data for [`Circuit::validate`].
    pub fn build(self, root: NodeId) -> Result<Circuit, CircuitError> {
        if root.index() >= self.nodes.len() {
            return Err(CircuitError::IdOutOfRange(root.0, self.nodes.len()));
        }
        let scopes = compute_scopes(&self.nodes);
        Ok(Circuit {
            nodes: self.nodes,
            root,
            num_vars: self.num_vars,
            scopes,
        })
    }
}

fn compute_scopes(nodes: &[Node]) -> Vec<Scope> {
    let mut scopes = vec![Scope::EMPTY; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        scopes[i] = match node {
            Node::Leaf { var, .. } => Scope::singleton(*var),
            Node::Sum { children, .. } | Node::Product { children } => children
                .iter()
                .fold(Scope::EMPTY, |acc, c| acc.union(scopes[c.index()])),
        };
    }
    scopes
}

impl Circuit {
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn scope(&self, id: NodeId) -> Scope {
        self.scopes[id.index()]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    /// Parent count per node (root included; a valid tree has exactly one
    /// parent everywhere except the root).
    pub fn parent_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for c in node.children() {
                counts[c.index()] += 1;
            }
        }
        counts
    }

    /// True when every node reachable from the root has exactly one parent
    /// and the arena has no extra components.
    pub fn is_tree(&self) -> bool {
        let counts = self.parent_counts();
        self.node_ids().all(|id| {
            let expected = usize::from(id != self.root);
            counts[id.index()] == expected
        })
    }

    /// Replace the weight vector of a sum node. Panics if `id` is not a sum
    /// or the arity does not match; callers mutate weights they just read.
    pub fn set_sum_weights(&mut self, id: NodeId, new_weights: &[f64]) {
        match &mut self.nodes[id.index()] {
            Node::Sum { weights, .. } => {
                assert_eq!(weights.len(), new_weights.len());
                weights.copy_from_slice(new_weights);
            }
            _ => panic!("node {} is not a sum", id.0),
        }
    }

    /// Replace a leaf's parameters, clamping Bernoulli probabilities.
    pub fn set_leaf_params(&mut self, id: NodeId, new_params: LeafParams) {
        match &mut self.nodes[id.index()] {
            Node::Leaf { params, .. } => {
                *params = match new_params {
                    LeafParams::Bernoulli { p } => LeafParams::Bernoulli {
                        p: p.clamp(LEAF_P_MIN, LEAF_P_MAX),
                    },
                    d => d,
                };
            }
            _ => panic!("node {} is not a leaf", id.0),
        }
    }

    /// Report every smoothness, decomposability, tree-shape, simplex, and
    /// scope-coverage violation. Violations are data, not failures.
    pub fn validate(&self) -> ValidityReport {
        let mut violations = Vec::new();
        let counts = self.parent_counts();
        for id in self.node_ids() {
            let expected = usize::from(id != self.root);
            if counts[id.index()] != expected {
                violations.push(Violation::NotATree {
                    node: id,
                    parents: counts[id.index()],
                });
            }
        }

        for id in self.node_ids() {
            match self.node(id) {
                Node::Leaf { params, .. } => {
                    let bad = match *params {
                        LeafParams::Bernoulli { p } => !(p > 0.0 && p < 1.0),
                        LeafParams::Dirichlet { alpha0, alpha1 } => {
                            !(alpha0 > 0.0 && alpha1 > 0.0)
                        }
                    };
                    if bad {
                        violations.push(Violation::BadLeafParams { node: id });
                    }
                }
                Node::Sum { children, weights } => {
                    if children.len() < 2 {
                        violations.push(Violation::ArityTooSmall {
                            node: id,
                            arity: children.len(),
                        });
                    }
                    let total: f64 = weights.iter().sum();
                    if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > SIMPLEX_TOL {
                        violations.push(Violation::WeightsNotSimplex { node: id, total });
                    }
                    let scope0 = self.scope(children[0]);
                    for &c in &children[1..] {
                        if self.scope(c) != scope0 {
                            violations.push(Violation::NonSmoothSum { node: id, child: c });
                        }
                    }
                }
                Node::Product { children } => {
                    if children.len() < 2 {
                        violations.push(Violation::ArityTooSmall {
                            node: id,
                            arity: children.len(),
                        });
                    }
                    let mut seen = Scope::EMPTY;
                    for (i, &c) in children.iter().enumerate() {
                        let sc = self.scope(c);
                        if !seen.is_disjoint(sc) {
                            // name the earliest conflicting sibling
                            let other = children[..i]
                                .iter()
                                .copied()
                                .find(|&o| !self.scope(o).is_disjoint(sc))
                                .unwrap_or(c);
                            violations.push(Violation::NonDisjointProduct {
                                node: id,
                                child_a: other,
                                child_b: c,
                            });
                        }
                        seen = seen.union(sc);
                    }
                }
            }
        }

        let full = Scope::full(self.num_vars);
        let root_scope = self.scope(self.root);
        if root_scope != full {
            violations.push(Violation::RootScopeIncomplete {
                missing: full.difference(root_scope),
            });
        }

        // Coverage over leaves reachable from the root.
        let mut covered = Scope::EMPTY;
        let mut stack = vec![self.root];
        let mut visited = vec![false; self.nodes.len()];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut visited[id.index()], true) {
                continue;
            }
            if let Node::Leaf { var, .. } = self.node(id) {
                covered.insert(*var);
            }
            stack.extend_from_slice(self.node(id).children());
        }
        for var in full.difference(covered).iter() {
            violations.push(Violation::VariableUncovered { var });
        }

        ValidityReport { violations }
    }
}
