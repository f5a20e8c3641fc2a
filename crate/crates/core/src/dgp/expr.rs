//! Expression trees over agent state and observation variables.
//!
//! Nodes are the binary arithmetic basis {add, sub, mul} plus leaves for
//! agent state variables, observation variables, and constants. Subtrees are
//! addressed by preorder index, which is what the genetic operators use to
//! pick and swap material.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Add(Box<ExprNode>, Box<ExprNode>),
    Sub(Box<ExprNode>, Box<ExprNode>),
    Mul(Box<ExprNode>, Box<ExprNode>),
    /// Agent state variable, zero-based.
    VarZ(usize),
    /// Observation variable, zero-based.
    VarY(usize),
    Const(f64),
}

impl ExprNode {
    pub fn children(&self) -> Option<(&ExprNode, &ExprNode)> {
        match self {
            ExprNode::Add(a, b) | ExprNode::Sub(a, b) | ExprNode::Mul(a, b) => Some((a, b)),
            _ => None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children().is_none()
    }

    /// Recursive arithmetic evaluation; non-finite values propagate to the
    /// caller rather than raising.
    pub fn eval(&self, z: &[f64], y: &[f64]) -> f64 {
        match self {
            ExprNode::Add(a, b) => a.eval(z, y) + b.eval(z, y),
            ExprNode::Sub(a, b) => a.eval(z, y) - b.eval(z, y),
            ExprNode::Mul(a, b) => a.eval(z, y) * b.eval(z, y),
            ExprNode::VarZ(i) => z[*i],
            ExprNode::VarY(j) => y[*j],
            ExprNode::Const(c) => *c,
        }
    }

    pub fn node_count(&self) -> usize {
        match self.children() {
            Some((a, b)) => 1 + a.node_count() + b.node_count(),
            None => 1,
        }
    }

    /// Depth in levels; a bare leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self.children() {
            Some((a, b)) => 1 + a.depth().max(b.depth()),
            None => 1,
        }
    }
}

fn get_at<'a>(node: &'a ExprNode, counter: &mut usize, target: usize) -> Option<&'a ExprNode> {
    let mine = *counter;
    *counter += 1;
    if mine == target {
        return Some(node);
    }
    match node.children() {
        Some((a, b)) => get_at(a, counter, target).or_else(|| get_at(b, counter, target)),
        None => None,
    }
}

fn level_at(node: &ExprNode, counter: &mut usize, target: usize, level: usize) -> Option<usize> {
    let mine = *counter;
    *counter += 1;
    if mine == target {
        return Some(level);
    }
    match node.children() {
        Some((a, b)) => level_at(a, counter, target, level + 1)
            .or_else(|| level_at(b, counter, target, level + 1)),
        None => None,
    }
}

fn replace_at(
    node: &ExprNode,
    counter: &mut usize,
    target: usize,
    replacement: &ExprNode,
) -> ExprNode {
    let mine = *counter;
    *counter += 1;
    if mine == target {
        return replacement.clone();
    }
    match node {
        ExprNode::Add(a, b) => ExprNode::Add(
            Box::new(replace_at(a, counter, target, replacement)),
            Box::new(replace_at(b, counter, target, replacement)),
        ),
        ExprNode::Sub(a, b) => ExprNode::Sub(
            Box::new(replace_at(a, counter, target, replacement)),
            Box::new(replace_at(b, counter, target, replacement)),
        ),
        ExprNode::Mul(a, b) => ExprNode::Mul(
            Box::new(replace_at(a, counter, target, replacement)),
            Box::new(replace_at(b, counter, target, replacement)),
        ),
        leaf => leaf.clone(),
    }
}

fn collect_consts(node: &ExprNode, counter: &mut usize, out: &mut Vec<(usize, f64)>) {
    let mine = *counter;
    *counter += 1;
    match node {
        ExprNode::Const(c) => out.push((mine, *c)),
        _ => {
            if let Some((a, b)) = node.children() {
                collect_consts(a, counter, out);
                collect_consts(b, counter, out);
            }
        }
    }
}

fn indices_valid(node: &ExprNode, dim_z: usize, dim_y: usize) -> bool {
    match node {
        ExprNode::VarZ(i) => *i < dim_z,
        ExprNode::VarY(j) => *j < dim_y,
        ExprNode::Const(_) => true,
        _ => {
            let (a, b) = node.children().expect("binary node");
            indices_valid(a, dim_z, dim_y) && indices_valid(b, dim_z, dim_y)
        }
    }
}

/// An expression tree with cached size and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    root: ExprNode,
    size: usize,
    depth: usize,
}

impl ExprTree {
    pub fn new(root: ExprNode) -> Self {
        let size = root.node_count();
        let depth = root.depth();
        Self { root, size, depth }
    }

    pub fn root(&self) -> &ExprNode {
        &self.root
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn eval(&self, z: &[f64], y: &[f64]) -> f64 {
        self.root.eval(z, y)
    }

    pub fn within_caps(&self, max_depth: usize, max_nodes: usize) -> bool {
        self.depth <= max_depth && self.size <= max_nodes
    }

    pub fn indices_valid(&self, dim_z: usize, dim_y: usize) -> bool {
        indices_valid(&self.root, dim_z, dim_y)
    }

    /// Subtree rooted at the given preorder index.
    pub fn subtree(&self, index: usize) -> &ExprNode {
        let mut counter = 0;
        get_at(&self.root, &mut counter, index).expect("preorder index within tree")
    }

    /// Level of the node at the given preorder index; the root sits at 1.
    pub fn node_level(&self, index: usize) -> usize {
        let mut counter = 0;
        level_at(&self.root, &mut counter, index, 1).expect("preorder index within tree")
    }

    /// A new tree with the subtree at `index` replaced.
    pub fn replace_subtree(&self, index: usize, replacement: &ExprNode) -> ExprTree {
        let mut counter = 0;
        ExprTree::new(replace_at(&self.root, &mut counter, index, replacement))
    }

    /// Preorder indices and values of every constant leaf.
    pub fn const_positions(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut counter = 0;
        collect_consts(&self.root, &mut counter, &mut out);
        out
    }
}

fn random_leaf<R: Rng>(rng: &mut R, dim_z: usize, dim_y: usize, const_range: (f64, f64)) -> ExprNode {
    // Observation leaves are unavailable when dim_y is zero (readout trees).
    let kinds = if dim_y == 0 { 2 } else { 3 };
    match rng.gen_range(0..kinds) {
        0 => ExprNode::VarZ(rng.gen_range(0..dim_z)),
        1 => ExprNode::Const(rng.gen_range(const_range.0..=const_range.1)),
        _ => ExprNode::VarY(rng.gen_range(0..dim_y)),
    }
}

fn random_binary(kind: usize, left: ExprNode, right: ExprNode) -> ExprNode {
    match kind {
        0 => ExprNode::Add(Box::new(left), Box::new(right)),
        1 => ExprNode::Sub(Box::new(left), Box::new(right)),
        _ => ExprNode::Mul(Box::new(left), Box::new(right)),
    }
}

fn grow<R: Rng>(
    rng: &mut R,
    dim_z: usize,
    dim_y: usize,
    const_range: (f64, f64),
    depth_left: usize,
    full: bool,
    budget: &mut usize,
) -> ExprNode {
    debug_assert!(*budget >= 1);
    *budget -= 1;
    let binary_possible = depth_left > 1 && *budget >= 2;
    let make_binary = binary_possible && (full || rng.gen_bool(0.6));
    if make_binary {
        let kind = rng.gen_range(0..3);
        // Hold one slot back for the right child while growing the left.
        *budget -= 1;
        let left = grow(rng, dim_z, dim_y, const_range, depth_left - 1, full, budget);
        *budget += 1;
        let right = grow(rng, dim_z, dim_y, const_range, depth_left - 1, full, budget);
        random_binary(kind, left, right)
    } else {
        random_leaf(rng, dim_z, dim_y, const_range)
    }
}

/// Ramped half-and-half generation: a uniformly drawn target depth up to the
/// budget, grown either full (binary wherever depth allows) or with random
/// early leaves, always within the node cap.
pub fn random_tree<R: Rng>(
    rng: &mut R,
    dim_z: usize,
    dim_y: usize,
    const_range: (f64, f64),
    max_nodes: usize,
    depth_budget: usize,
) -> ExprTree {
    let target_depth = rng.gen_range(1..=depth_budget.max(1));
    let full = rng.gen_bool(0.5);
    let mut budget = max_nodes;
    ExprTree::new(grow(rng, dim_z, dim_y, const_range, target_depth, full, &mut budget))
}
