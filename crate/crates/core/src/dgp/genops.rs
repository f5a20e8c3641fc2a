//! Genetic operators over multitree individuals.
//!
//! Crossover swaps subtrees between the same tree slot of two parents;
//! mutation applies at most one of subtree replacement, point mutation, or
//! constant jitter. Offspring that would violate the depth or node caps are
//! rejected and the parents pass through unchanged.

use super::{GpConfig, Individual};
use crate::dgp::expr::{random_tree, ExprNode, ExprTree};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Per-island operator rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorRates {
    pub crossover: f64,
    pub subtree: f64,
    pub point: f64,
    pub constant: f64,
}

/// Islands run the shared rates scaled by `0.5 + i / (n - 1)`, so the ring
/// spans half to one-and-a-half times the configured probabilities.
pub fn island_rate_factor(island: usize, n_islands: usize) -> f64 {
    if n_islands <= 1 {
        1.0
    } else {
        0.5 + island as f64 / (n_islands as f64 - 1.0)
    }
}

impl OperatorRates {
    pub fn for_island(gp: &GpConfig, island: usize) -> Self {
        let f = island_rate_factor(island, gp.n_islands);
        Self {
            crossover: (gp.p_crossover * f).min(1.0),
            subtree: (gp.p_mutate_subtree * f).min(1.0),
            point: (gp.p_mutate_point * f).min(1.0),
            constant: (gp.p_mutate_const * f).min(1.0),
        }
    }
}

/// Copy of an individual as a new unevaluated offspring.
pub fn clone_as_offspring(ind: &Individual, next_id: &mut u64) -> Individual {
    let id = *next_id;
    *next_id += 1;
    Individual {
        state_trees: ind.state_trees.clone(),
        readout_tree: ind.readout_tree.clone(),
        fitness: None,
        id,
    }
}

/// Subtree crossover in one uniformly chosen tree slot.
///
/// Because material only moves between matching slots, readout trees never
/// acquire observation leaves.
pub fn crossover<R: Rng>(
    a: &Individual,
    b: &Individual,
    gp: &GpConfig,
    rng: &mut R,
    next_id: &mut u64,
) -> (Individual, Individual) {
    debug_assert_eq!(a.arity(), b.arity());
    let k = a.arity();
    let slot = rng.gen_range(0..=k);
    let tree_a = a.tree(slot);
    let tree_b = b.tree(slot);
    let ia = rng.gen_range(0..tree_a.size());
    let ib = rng.gen_range(0..tree_b.size());
    let sub_a = tree_a.subtree(ia).clone();
    let sub_b = tree_b.subtree(ib).clone();
    let new_a = tree_a.replace_subtree(ia, &sub_b);
    let new_b = tree_b.replace_subtree(ib, &sub_a);
    if !new_a.within_caps(gp.max_depth, gp.max_nodes) || !new_b.within_caps(gp.max_depth, gp.max_nodes)
    {
        return (clone_as_offspring(a, next_id), clone_as_offspring(b, next_id));
    }
    (a.with_tree(slot, new_a, next_id), b.with_tree(slot, new_b, next_id))
}

fn random_leaf_for_slot<R: Rng>(rng: &mut R, dim_z: usize, dim_y: usize, gp: &GpConfig) -> ExprNode {
    // Single-node tree generation always produces a leaf.
    random_tree(rng, dim_z, dim_y, gp.const_init_range, 1, 1).root().clone()
}

fn point_mutated<R: Rng>(
    tree: &ExprTree,
    dim_z: usize,
    dim_y: usize,
    gp: &GpConfig,
    rng: &mut R,
) -> ExprTree {
    let idx = rng.gen_range(0..tree.size());
    let node = tree.subtree(idx);
    let replacement = match node {
        ExprNode::Add(l, r) | ExprNode::Sub(l, r) | ExprNode::Mul(l, r) => {
            // Swap the function kind, keeping both children.
            let kinds: [fn(Box<ExprNode>, Box<ExprNode>) -> ExprNode; 3] =
                [ExprNode::Add, ExprNode::Sub, ExprNode::Mul];
            let current = match node {
                ExprNode::Add(..) => 0,
                ExprNode::Sub(..) => 1,
                _ => 2,
            };
            let pick = (current + 1 + rng.gen_range(0..2)) % 3;
            kinds[pick](l.clone(), r.clone())
        }
        _ => random_leaf_for_slot(rng, dim_z, dim_y, gp),
    };
    tree.replace_subtree(idx, &replacement)
}

fn subtree_mutated<R: Rng>(
    tree: &ExprTree,
    dim_z: usize,
    dim_y: usize,
    gp: &GpConfig,
    rng: &mut R,
) -> Option<ExprTree> {
    let idx = rng.gen_range(0..tree.size());
    let level = tree.node_level(idx);
    let depth_budget = gp.max_depth.saturating_sub(level) + 1;
    let replacement = random_tree(rng, dim_z, dim_y, gp.const_init_range, gp.max_nodes, depth_budget);
    let mutated = tree.replace_subtree(idx, replacement.root());
    mutated.within_caps(gp.max_depth, gp.max_nodes).then_some(mutated)
}

/// Applies at most one mutation. Shape-preserving variants (point mutation,
/// constant jitter) cannot violate the caps; subtree replacement is rejected
/// if it would.
pub fn mutate<R: Rng>(
    ind: &Individual,
    rates: &OperatorRates,
    gp: &GpConfig,
    dim_y: usize,
    rng: &mut R,
    next_id: &mut u64,
) -> Individual {
    let k = ind.arity();
    let roll: f64 = rng.gen();
    if roll < rates.subtree {
        let slot = rng.gen_range(0..=k);
        let dim_y_slot = if slot == k { 0 } else { dim_y };
        if let Some(tree) = subtree_mutated(ind.tree(slot), k, dim_y_slot, gp, rng) {
            return ind.with_tree(slot, tree, next_id);
        }
        return clone_as_offspring(ind, next_id);
    }
    if roll < rates.subtree + rates.point {
        let slot = rng.gen_range(0..=k);
        let dim_y_slot = if slot == k { 0 } else { dim_y };
        let tree = point_mutated(ind.tree(slot), k, dim_y_slot, gp, rng);
        return ind.with_tree(slot, tree, next_id);
    }
    if roll < rates.subtree + rates.point + rates.constant {
        // Jitter one uniformly chosen constant across the whole multitree.
        let mut positions = Vec::new();
        for slot in 0..=k {
            for (idx, value) in ind.tree(slot).const_positions() {
                positions.push((slot, idx, value));
            }
        }
        if positions.is_empty() {
            return clone_as_offspring(ind, next_id);
        }
        let (slot, idx, value) = positions[rng.gen_range(0..positions.len())];
        let jitter = Normal::new(0.0, gp.const_jitter_std)
            .expect("positive jitter std")
            .sample(rng);
        let tree = ind.tree(slot).replace_subtree(idx, &ExprNode::Const(value + jitter));
        return ind.with_tree(slot, tree, next_id);
    }
    clone_as_offspring(ind, next_id)
}
