//! Differential genetic programming: evolving the symbolic state equations
//! and readout of an agent by simulating it against an environment.
//!
//! Individuals are multitrees (one expression per agent state variable plus
//! a readout). Islands evolve semi-independently under tournament selection,
//! elitism, and ring migration, and every individual in a generation is
//! scored on the same rollout seeds so fitness comparisons share their noise.

pub mod expr;
pub mod genops;
pub mod sexpr;

pub use expr::{random_tree, ExprNode, ExprTree};
pub use genops::{crossover, island_rate_factor, mutate, OperatorRates};
pub use sexpr::{parse_individual, serialize_individual, serialize_tree, ParseError};

use crate::environments::{environment_dynamics, Environment};
use crate::experiments::{rollout, ReturnConfig, RewardTap, RolloutMeta};
use crate::sde::{couple, derive_stream, OpenDynamics, SeedKey, SolverConfig, StateMap, SystemDynamics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::io::{self, Write};
use std::sync::Arc;

const FITNESS_STREAM_TAG: u64 = 0x4450_4700;
const OPERATOR_STREAM_TAG: u64 = 0x4450_4701;

/// Cached evaluation result: the mean return and the identifier of the seed
/// set it was computed under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitness {
    pub value: f64,
    pub seed_set: u64,
}

/// A multitree: one state equation per agent variable plus a readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub state_trees: Vec<ExprTree>,
    pub readout_tree: ExprTree,
    pub fitness: Option<Fitness>,
    /// Lineage identifier, unique within a run.
    pub id: u64,
}

impl Individual {
    /// The null controller: every equation and the readout are zero.
    pub fn null(dim_agent_state: usize) -> Self {
        Self {
            state_trees: (0..dim_agent_state)
                .map(|_| ExprTree::new(ExprNode::Const(0.0)))
                .collect(),
            readout_tree: ExprTree::new(ExprNode::Const(0.0)),
            fitness: None,
            id: 0,
        }
    }

    /// Number of agent state variables.
    pub fn arity(&self) -> usize {
        self.state_trees.len()
    }

    /// Tree in a slot: state equations at 0..arity, the readout at arity.
    pub fn tree(&self, slot: usize) -> &ExprTree {
        if slot < self.state_trees.len() {
            &self.state_trees[slot]
        } else {
            &self.readout_tree
        }
    }

    /// Copy with one tree slot replaced, as a fresh unevaluated offspring.
    pub fn with_tree(&self, slot: usize, tree: ExprTree, next_id: &mut u64) -> Self {
        let mut out = self.clone();
        if slot < out.state_trees.len() {
            out.state_trees[slot] = tree;
        } else {
            out.readout_tree = tree;
        }
        out.fitness = None;
        out.id = *next_id;
        *next_id += 1;
        out
    }

    pub fn total_nodes(&self) -> usize {
        self.state_trees.iter().map(ExprTree::size).sum::<usize>() + self.readout_tree.size()
    }

    /// Arity, caps, and variable-index validity across all trees. Readout
    /// trees must not reference observations.
    pub fn structurally_valid(
        &self,
        dim_z: usize,
        dim_y: usize,
        max_depth: usize,
        max_nodes: usize,
    ) -> bool {
        self.state_trees.len() == dim_z
            && self
                .state_trees
                .iter()
                .all(|t| t.within_caps(max_depth, max_nodes) && t.indices_valid(dim_z, dim_y))
            && self.readout_tree.within_caps(max_depth, max_nodes)
            && self.readout_tree.indices_valid(dim_z, 0)
    }
}

/// Search and evaluation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub n_islands: usize,
    pub pop_size: usize,
    pub n_generations: usize,
    /// Agent state variables per individual.
    pub agent_states: usize,
    pub tournament_size: usize,
    pub p_crossover: f64,
    pub p_mutate_subtree: f64,
    pub p_mutate_point: f64,
    pub p_mutate_const: f64,
    pub const_jitter_std: f64,
    pub elitism_count: usize,
    /// Generations between migrations; zero disables migration.
    pub migration_interval: usize,
    pub migration_count: usize,
    pub const_init_range: (f64, f64),
    pub max_depth: usize,
    pub max_nodes: usize,
    pub rollouts_per_eval: usize,
    pub penalty_fitness: f64,
    /// Pass the evolved readout through tanh like the network agents do.
    pub wrap_readout_tanh: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            n_islands: 10,
            pop_size: 100,
            n_generations: 50,
            agent_states: 2,
            tournament_size: 5,
            p_crossover: 0.7,
            p_mutate_subtree: 0.15,
            p_mutate_point: 0.1,
            p_mutate_const: 0.05,
            const_jitter_std: 0.5,
            elitism_count: 1,
            migration_interval: 10,
            migration_count: 2,
            const_init_range: (-5.0, 5.0),
            max_depth: 8,
            max_nodes: 64,
            rollouts_per_eval: 4,
            penalty_fitness: -1e6,
            wrap_readout_tanh: false,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("n_islands", self.n_islands),
            ("pop_size", self.pop_size),
            ("agent_states", self.agent_states),
            ("tournament_size", self.tournament_size),
            ("max_depth", self.max_depth),
            ("max_nodes", self.max_nodes),
            ("rollouts_per_eval", self.rollouts_per_eval),
        ] {
            if v == 0 {
                return Err(format!("gp.{name} must be at least 1"));
            }
        }
        for (name, p) in [
            ("p_crossover", self.p_crossover),
            ("p_mutate_subtree", self.p_mutate_subtree),
            ("p_mutate_point", self.p_mutate_point),
            ("p_mutate_const", self.p_mutate_const),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("gp.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.elitism_count > self.pop_size {
            return Err("gp.elitism_count cannot exceed gp.pop_size".into());
        }
        if !(self.const_init_range.0 <= self.const_init_range.1) {
            return Err("gp.const_init_range must be ordered".into());
        }
        Ok(())
    }
}

/// Ranking used everywhere selection happens: higher fitness first, ties to
/// fewer nodes, then to the older lineage.
fn rank(a: &Individual, b: &Individual) -> Ordering {
    let fa = a.fitness.expect("ranked individuals carry fitness").value;
    let fb = b.fitness.expect("ranked individuals carry fitness").value;
    fb.partial_cmp(&fa)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.total_nodes().cmp(&b.total_nodes()))
        .then_with(|| a.id.cmp(&b.id))
}

/// Uniform random individual: one tree per state variable plus a readout
/// (which never sees observation leaves).
pub fn random_individual<R: Rng>(
    rng: &mut R,
    dim_z: usize,
    dim_y: usize,
    gp: &GpConfig,
    next_id: &mut u64,
) -> Individual {
    let state_trees = (0..dim_z)
        .map(|_| random_tree(rng, dim_z, dim_y, gp.const_init_range, gp.max_nodes, gp.max_depth))
        .collect();
    let readout_tree = random_tree(rng, dim_z, 0, gp.const_init_range, gp.max_nodes, gp.max_depth);
    let id = *next_id;
    *next_id += 1;
    Individual { state_trees, readout_tree, fitness: None, id }
}

/// Realizes an individual as a closed system on an environment.
///
/// The agent is drift-only (`dz_i = f_i(z, y) dt`), the control is the raw
/// readout `u = g(z)` unless `wrap_tanh` is set, and the agent state starts
/// at zero. Returns the joint system over (agent, environment), the joint
/// initial state, and a tap that recovers (control, reward) from a state.
pub fn individual_to_system<E: Environment + Clone + 'static>(
    ind: &Individual,
    env: &E,
    wrap_tanh: bool,
) -> (SystemDynamics, Vec<f64>, Box<RewardTap>) {
    let k = ind.arity();
    let m = env.dim_obs();
    debug_assert_eq!(env.dim_ctrl(), 1, "evolved individuals carry a single readout");
    debug_assert!(ind.structurally_valid(k, m, usize::MAX, usize::MAX));

    let shared = Arc::new(ind.clone());
    let drift_ind = Arc::clone(&shared);
    let agent = OpenDynamics::new(
        k,
        m,
        0,
        move |z, y, out| {
            for (i, tree) in drift_ind.state_trees.iter().enumerate() {
                out[i] = tree.eval(z, y);
            }
        },
        |_, _, _| {},
    );

    let control_ind = Arc::clone(&shared);
    let control = StateMap::new(k, 1, move |z, out| {
        let raw = control_ind.readout_tree.eval(z, &[]);
        out[0] = if wrap_tanh { raw.tanh() } else { raw };
    });

    let observe_env = env.clone();
    let observe = StateMap::new(env.dim_state(), m, move |s, out| observe_env.observe(s, out));

    let system = couple(agent, environment_dynamics(env), observe, control)
        .expect("individual and environment dimensions are consistent by construction");

    let mut x0 = vec![0.0; k];
    x0.extend(env.initial_state());

    let tap_env = env.clone();
    let tap_ind = shared;
    let tap: Box<RewardTap> = Box::new(move |x: &[f64]| {
        let (z, s) = x.split_at(k);
        let raw = tap_ind.readout_tree.eval(z, &[]);
        let u = vec![if wrap_tanh { raw.tanh() } else { raw }];
        let r = tap_env.reward(s, &u);
        (u, r)
    });

    (system, x0, tap)
}

/// The common rollout seeds every individual in a generation is scored on.
pub fn generation_seeds(master_seed: u64, generation: usize, rollouts: usize) -> Vec<SeedKey> {
    (0..rollouts)
        .map(|r| {
            SeedKey::new(
                master_seed,
                derive_stream(&[FITNESS_STREAM_TAG, generation as u64, r as u64]),
            )
        })
        .collect()
}

/// Mean return over the evaluation rollouts; a rollout that blows up or
/// yields a non-finite return contributes the penalty value instead.
pub fn evaluate_fitness<E: Environment + Clone + 'static>(
    ind: &Individual,
    env: &E,
    eval_seeds: &[SeedKey],
    seed_set: u64,
    sim: &SolverConfig,
    rc: &ReturnConfig,
    gp: &GpConfig,
) -> Fitness {
    let (system, x0, tap) = individual_to_system(ind, env, gp.wrap_readout_tanh);
    let agent_text = serialize_individual(ind);
    let mut total = 0.0;
    for key in eval_seeds {
        let meta = RolloutMeta::new(env.describe(), agent_text.clone());
        let value = match rollout(&system, &x0, sim, rc, &tap, *key, meta) {
            Ok(record) if record.return_value.is_finite() => record.return_value,
            _ => gp.penalty_fitness,
        };
        total += value;
    }
    Fitness { value: total / eval_seeds.len() as f64, seed_set }
}

/// Tournament selection without replacement; with a tournament as large as
/// the population this always returns the best individual.
fn tournament<'a, R: Rng>(pop: &'a [Individual], size: usize, rng: &mut R) -> &'a Individual {
    let n = pop.len();
    let k = size.min(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let i = rng.gen_range(0..n);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen
        .into_iter()
        .map(|i| &pop[i])
        .min_by(|a, b| rank(a, b))
        .expect("tournament draws at least one candidate")
}

/// One generation of an island: elites copied verbatim with their cached
/// fitness, remaining slots filled by crossover-then-mutate offspring scored
/// on this generation's shared seeds.
#[allow(clippy::too_many_arguments)]
pub fn evolve_generation<E: Environment + Clone + 'static>(
    island: &[Individual],
    island_index: usize,
    gp: &GpConfig,
    env: &E,
    gen_seeds: &[SeedKey],
    seed_set: u64,
    sim: &SolverConfig,
    rc: &ReturnConfig,
    rng: &mut ChaCha8Rng,
    next_id: &mut u64,
) -> Vec<Individual> {
    debug_assert_eq!(island.len(), gp.pop_size);
    let rates = OperatorRates::for_island(gp, island_index);
    let dim_y = env.dim_obs();

    let mut ranked: Vec<&Individual> = island.iter().collect();
    ranked.sort_by(|a, b| rank(a, b));
    let mut next: Vec<Individual> =
        ranked.iter().take(gp.elitism_count).map(|e| (*e).clone()).collect();

    while next.len() < gp.pop_size {
        let p1 = tournament(island, gp.tournament_size, rng);
        let p2 = tournament(island, gp.tournament_size, rng);
        let (c1, c2) = if rng.gen_bool(rates.crossover) {
            crossover(p1, p2, gp, rng, next_id)
        } else {
            (
                genops::clone_as_offspring(p1, next_id),
                genops::clone_as_offspring(p2, next_id),
            )
        };
        next.push(mutate(&c1, &rates, gp, dim_y, rng, next_id));
        if next.len() < gp.pop_size {
            next.push(mutate(&c2, &rates, gp, dim_y, rng, next_id));
        }
    }

    next.par_iter_mut().for_each(|ind| {
        if ind.fitness.is_none() {
            ind.fitness = Some(evaluate_fitness(ind, env, gen_seeds, seed_set, sim, rc, gp));
        }
    });
    next
}

/// Ring migration: each island sends copies of its best individuals to the
/// next island, replacing that island's worst members. Population sizes are
/// conserved.
pub fn migrate(islands: &mut [Vec<Individual>], migration_count: usize) {
    let n = islands.len();
    if n < 2 || migration_count == 0 {
        return;
    }
    let migrants: Vec<Vec<Individual>> = islands
        .iter()
        .map(|island| {
            let mut ranked: Vec<&Individual> = island.iter().collect();
            ranked.sort_by(|a, b| rank(a, b));
            ranked.into_iter().take(migration_count).cloned().collect()
        })
        .collect();
    for (source, incoming) in migrants.into_iter().enumerate() {
        let dest = &mut islands[(source + 1) % n];
        let mut order: Vec<usize> = (0..dest.len()).collect();
        order.sort_by(|&a, &b| rank(&dest[a], &dest[b]));
        for (&slot, migrant) in order.iter().rev().zip(incoming) {
            dest[slot] = migrant;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationStat {
    pub generation: usize,
    pub island: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone)]
pub struct EvolutionReport {
    pub stats: Vec<GenerationStat>,
    /// Best individual across all islands after each generation, including
    /// the initial one.
    pub best_per_generation: Vec<Individual>,
    pub final_best: Individual,
}

impl EvolutionReport {
    pub fn max_fitness_per_generation(&self) -> Vec<f64> {
        self.best_per_generation
            .iter()
            .map(|b| b.fitness.expect("report individuals are evaluated").value)
            .collect()
    }

    /// CSV export: `generation,island,best_fitness,mean_fitness`.
    pub fn write_fitness_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        use crate::sde::fmt_full;
        writeln!(w, "generation,island,best_fitness,mean_fitness")?;
        for s in &self.stats {
            writeln!(
                w,
                "{},{},{},{}",
                s.generation,
                s.island,
                fmt_full(s.best_fitness),
                fmt_full(s.mean_fitness)
            )?;
        }
        Ok(())
    }
}

fn record_stats(
    islands: &[Vec<Individual>],
    generation: usize,
    stats: &mut Vec<GenerationStat>,
    best_per_generation: &mut Vec<Individual>,
) {
    for (i, island) in islands.iter().enumerate() {
        let values: Vec<f64> = island
            .iter()
            .map(|ind| ind.fitness.expect("evaluated population").value)
            .collect();
        let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        stats.push(GenerationStat { generation, island: i, best_fitness: best, mean_fitness: mean });
    }
    let best = islands
        .iter()
        .flatten()
        .min_by(|a, b| rank(a, b))
        .expect("populations are non-empty")
        .clone();
    best_per_generation.push(best);
}

/// The full evolutionary run: island initialization, per-generation
/// evolution under common rollout seeds, periodic ring migration. The report
/// is a pure function of (config, environment, master seed); fitness
/// evaluations parallelize but results merge in index order.
pub fn run_dgp<E: Environment + Clone + 'static>(
    gp: &GpConfig,
    env: &E,
    sim: &SolverConfig,
    rc: &ReturnConfig,
    master_seed: u64,
) -> EvolutionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(derive_stream(&[OPERATOR_STREAM_TAG]));
    let mut next_id: u64 = 0;
    let dim_z = gp.agent_states;
    let dim_y = env.dim_obs();

    let mut islands: Vec<Vec<Individual>> = (0..gp.n_islands)
        .map(|_| {
            (0..gp.pop_size)
                .map(|_| random_individual(&mut rng, dim_z, dim_y, gp, &mut next_id))
                .collect()
        })
        .collect();

    let seeds0 = generation_seeds(master_seed, 0, gp.rollouts_per_eval);
    for island in islands.iter_mut() {
        island.par_iter_mut().for_each(|ind| {
            ind.fitness = Some(evaluate_fitness(ind, env, &seeds0, 0, sim, rc, gp));
        });
    }

    let mut stats = Vec::new();
    let mut best_per_generation = Vec::new();
    record_stats(&islands, 0, &mut stats, &mut best_per_generation);

    for gen in 1..=gp.n_generations {
        let gen_seeds = generation_seeds(master_seed, gen, gp.rollouts_per_eval);
        for island_index in 0..islands.len() {
            islands[island_index] = evolve_generation(
                &islands[island_index],
                island_index,
                gp,
                env,
                &gen_seeds,
                gen as u64,
                sim,
                rc,
                &mut rng,
                &mut next_id,
            );
        }
        if gp.migration_interval > 0 && gen % gp.migration_interval == 0 {
            migrate(&mut islands, gp.migration_count);
        }
        record_stats(&islands, gen, &mut stats, &mut best_per_generation);
    }

    let final_best = best_per_generation.last().expect("at least the initial generation").clone();
    EvolutionReport { stats, best_per_generation, final_best }
}
