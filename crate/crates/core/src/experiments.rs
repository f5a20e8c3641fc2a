//! Rollouts, returns, and agent comparisons.
//!
//! A rollout integrates a closed system, taps the control and reward at
//! every recorded step, and reduces the reward stream to a (optionally
//! discounted) return. Comparisons pair runs on identical noise streams so
//! that differences come from the agents, not the draws.

use crate::environments::{Environment, RewardWeights, SdiDistribution, SdiEnv};
use crate::oua::{self, AgentConfig, LearningLayout, OuaHyper};
use crate::sde::{
    derive_stream, integrate_partial, NoiseStream, SdeError, SeedKey, SolverConfig,
    SystemDynamics, Trajectory,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const LEARN_STREAM_TAG: u64 = 0x4F55_4100;
const INTEL_ROLLOUT_TAG: u64 = 0x494E_5400;
const ENV_SAMPLE_TAG: u64 = 0x454E_5600;

/// Discounting and horizon of the return integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnConfig {
    /// Exponential discount rate; zero means plain cumulative reward.
    pub discount_rate: f64,
    pub horizon: f64,
}

impl Default for ReturnConfig {
    fn default() -> Self {
        Self { discount_rate: 0.0, horizon: 1000.0 }
    }
}

/// Left-rectangle quadrature of the discounted reward stream on a uniform
/// grid. The final sample closes the interval and does not contribute.
pub fn compute_return(rewards: &[f64], times: &[f64], rc: &ReturnConfig) -> f64 {
    assert_eq!(rewards.len(), times.len());
    if times.len() < 2 {
        return 0.0;
    }
    let dt = times[1] - times[0];
    let mut acc = 0.0;
    for i in 0..times.len() - 1 {
        if times[i] + 0.5 * dt > rc.horizon {
            break;
        }
        let factor = if rc.discount_rate == 0.0 {
            1.0
        } else {
            (-rc.discount_rate * times[i]).exp()
        };
        acc += factor * rewards[i] * dt;
    }
    acc
}

/// Stable 64-bit content hash (FNV-1a), used to tag agent specs in metadata.
pub fn content_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutMeta {
    pub environment: String,
    pub agent: String,
    pub agent_hash: u64,
}

impl RolloutMeta {
    pub fn new(environment: String, agent: String) -> Self {
        let agent_hash = content_hash(agent.as_bytes());
        Self { environment, agent, agent_hash }
    }
}

/// One simulated episode: trajectory, per-step controls and rewards, and the
/// reduced return.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutRecord {
    pub trajectory: Trajectory,
    /// Step-major controls, `dim_ctrl` entries per recorded step.
    pub controls: Vec<f64>,
    pub dim_ctrl: usize,
    pub rewards: Vec<f64>,
    pub return_value: f64,
    pub seed_key: SeedKey,
    pub metadata: RolloutMeta,
}

/// Extracts the control and instantaneous reward from a recorded state.
pub type RewardTap = dyn Fn(&[f64]) -> (Vec<f64>, f64) + Send + Sync;

/// Integrates one episode and reduces it. Blow-ups abort with the failing
/// time; callers that prefer a penalty value map the error themselves.
pub fn rollout(
    system: &SystemDynamics,
    x0: &[f64],
    sim: &SolverConfig,
    rc: &ReturnConfig,
    tap: &RewardTap,
    seed_key: SeedKey,
    metadata: RolloutMeta,
) -> Result<RolloutRecord, SdeError> {
    let noise = NoiseStream::new(seed_key, system.dim_noise());
    let (trajectory, err) = integrate_partial(system, x0, sim, noise);
    if let Some(e) = err {
        return Err(e);
    }
    let mut controls = Vec::new();
    let mut rewards = Vec::with_capacity(trajectory.len());
    let mut dim_ctrl = 0;
    for state in &trajectory.states {
        let (u, r) = tap(state);
        dim_ctrl = u.len();
        controls.extend_from_slice(&u);
        rewards.push(r);
    }
    let return_value = compute_return(&rewards, &trajectory.times, rc);
    Ok(RolloutRecord {
        trajectory,
        controls,
        dim_ctrl,
        rewards,
        return_value,
        seed_key,
        metadata,
    })
}

/// A ready-to-simulate closed agent-environment system.
pub struct AgentSystem {
    pub system: SystemDynamics,
    pub x0: Vec<f64>,
    pub tap: Box<RewardTap>,
    pub description: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvEvaluation {
    pub environment: String,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntelligenceReport {
    pub mean_return: f64,
    pub per_env: Vec<EnvEvaluation>,
}

/// Monte-Carlo estimate of the expected return over a family of
/// environments: sample environments, average rollouts per environment,
/// then average the per-environment means.
pub fn evaluate_intelligence<F>(
    build: F,
    dist: &SdiDistribution,
    weights: RewardWeights,
    n_env: usize,
    rollouts_per_env: usize,
    master_seed: u64,
    sim: &SolverConfig,
    rc: &ReturnConfig,
) -> Result<IntelligenceReport, SdeError>
where
    F: Fn(&SdiEnv) -> Result<AgentSystem, SdeError> + Sync,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(derive_stream(&[ENV_SAMPLE_TAG]));
    let envs: Vec<SdiEnv> = (0..n_env).map(|_| dist.sample(&mut rng, weights)).collect();

    let per_env: Vec<Result<EnvEvaluation, SdeError>> = envs
        .par_iter()
        .enumerate()
        .map(|(env_idx, env)| {
            let agent = build(env)?;
            let mut returns = Vec::with_capacity(rollouts_per_env);
            for r in 0..rollouts_per_env {
                let key = SeedKey::new(
                    master_seed,
                    derive_stream(&[INTEL_ROLLOUT_TAG, env_idx as u64, r as u64]),
                );
                let meta = RolloutMeta::new(env.describe(), agent.description.clone());
                let record = rollout(&agent.system, &agent.x0, sim, rc, &agent.tap, key, meta)?;
                returns.push(record.return_value);
            }
            let mean_return = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            Ok(EnvEvaluation { environment: env.describe(), mean_return, returns })
        })
        .collect();

    let mut evaluations = Vec::with_capacity(n_env);
    for e in per_env {
        evaluations.push(e?);
    }
    let mean_return =
        evaluations.iter().map(|e| e.mean_return).sum::<f64>() / evaluations.len().max(1) as f64;
    Ok(IntelligenceReport { mean_return, per_env: evaluations })
}

/// Everything a paired learning-vs-baseline run needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearningRunConfig {
    pub env: SdiEnv,
    pub agent: AgentConfig,
    pub oua: OuaHyper,
    pub solver: SolverConfig,
    pub discount_rate: f64,
}

impl LearningRunConfig {
    pub fn return_config(&self) -> ReturnConfig {
        ReturnConfig { discount_rate: self.discount_rate, horizon: self.solver.t_end }
    }
}

/// One arm of a paired run. `completed` is false when integration aborted on
/// a non-finite state; the trajectory then holds the recorded prefix and the
/// return covers that prefix only.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub trajectory: Trajectory,
    pub layout: LearningLayout,
    pub controls: Vec<f64>,
    pub rewards: Vec<f64>,
    pub return_value: f64,
    pub completed: bool,
    pub failure: Option<String>,
    /// Mean |position| over the final fifth of the horizon; absent when the
    /// run did not reach it.
    pub tail_mean_abs_pos: Option<f64>,
    pub tau_clamp_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub learning: ArmRun,
    pub no_learning: ArmRun,
}

impl SeedComparison {
    pub fn learning_won(&self) -> bool {
        self.learning.completed
            && (!self.no_learning.completed
                || self.learning.return_value > self.no_learning.return_value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub config: LearningRunConfig,
    pub runs: Vec<SeedComparison>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSummary {
    pub n_seeds: usize,
    pub learning_wins: usize,
    pub learning_failures: usize,
    pub no_learning_failures: usize,
    pub median_return_learning: Option<f64>,
    pub median_return_no_learning: Option<f64>,
    pub median_tail_abs_pos_learning: Option<f64>,
    pub median_tail_abs_pos_no_learning: Option<f64>,
    pub tau_clamp_active_anywhere: bool,
}

pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("medians of finite values"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

impl ComparisonReport {
    pub fn learning_wins(&self) -> usize {
        self.runs.iter().filter(|r| r.learning_won()).count()
    }

    pub fn summary(&self) -> ComparisonSummary {
        let completed =
            |pick: fn(&SeedComparison) -> &ArmRun| -> (Vec<f64>, Vec<f64>, usize) {
                let mut returns = Vec::new();
                let mut tails = Vec::new();
                let mut failures = 0;
                for run in &self.runs {
                    let arm = pick(run);
                    if arm.completed {
                        returns.push(arm.return_value);
                        if let Some(t) = arm.tail_mean_abs_pos {
                            tails.push(t);
                        }
                    } else {
                        failures += 1;
                    }
                }
                (returns, tails, failures)
            };
        let (mut ret_l, mut tail_l, fail_l) = completed(|r| &r.learning);
        let (mut ret_n, mut tail_n, fail_n) = completed(|r| &r.no_learning);
        ComparisonSummary {
            n_seeds: self.runs.len(),
            learning_wins: self.learning_wins(),
            learning_failures: fail_l,
            no_learning_failures: fail_n,
            median_return_learning: median(&mut ret_l),
            median_return_no_learning: median(&mut ret_n),
            median_tail_abs_pos_learning: median(&mut tail_l),
            median_tail_abs_pos_no_learning: median(&mut tail_n),
            tau_clamp_active_anywhere: self
                .runs
                .iter()
                .any(|r| r.learning.tau_clamp_active || r.no_learning.tau_clamp_active),
        }
    }
}

fn run_arm(cfg: &LearningRunConfig, hyper: OuaHyper, key: SeedKey) -> Result<ArmRun, SdeError> {
    let (system, layout) = oua::build_learning_system(&cfg.env, cfg.agent, hyper)?;
    let x0 = oua::initial_learning_state(&cfg.env, cfg.agent);
    let noise = NoiseStream::new(key, system.dim_noise());
    let (trajectory, err) = integrate_partial(&system, &x0, &cfg.solver, noise);

    let mut controls = Vec::new();
    let mut rewards = Vec::with_capacity(trajectory.len());
    for state in &trajectory.states {
        let (u, r) = oua::control_and_reward(state, &cfg.env, cfg.agent, &layout);
        controls.extend_from_slice(&u);
        rewards.push(r);
    }
    let return_value = compute_return(&rewards, &trajectory.times, &cfg.return_config());

    let completed = err.is_none();
    let tail_mean_abs_pos = if completed {
        let from = 0.8 * cfg.solver.t_end;
        let pos = layout.env().start;
        let tail: Vec<f64> = trajectory
            .times
            .iter()
            .zip(&trajectory.states)
            .filter(|(t, _)| **t >= from)
            .map(|(_, x)| x[pos].abs())
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    } else {
        None
    };
    let tau_clamp_active = oua::tau_clamp_active(&trajectory, &layout, cfg.agent.tau_floor);

    Ok(ArmRun {
        trajectory,
        layout,
        controls,
        rewards,
        return_value,
        completed,
        failure: err.map(|e| e.to_string()),
        tail_mean_abs_pos,
        tau_clamp_active,
    })
}

/// Paired runs with and without adaptation on identical noise streams.
///
/// The no-learning arm zeroes the exploration scale and the adaptation rate,
/// which freezes the parameters at their initial values while consuming the
/// noise stream identically, so the environment sees the same draws in both
/// arms.
pub fn compare_learning(
    seeds: &[u64],
    cfg: &LearningRunConfig,
) -> Result<ComparisonReport, SdeError> {
    let runs: Vec<Result<SeedComparison, SdeError>> = seeds
        .par_iter()
        .map(|&seed| {
            let key = SeedKey::new(seed, derive_stream(&[LEARN_STREAM_TAG]));
            let learning = run_arm(cfg, cfg.oua, key)?;
            let no_learning = run_arm(cfg, cfg.oua.without_learning(), key)?;
            Ok(SeedComparison { seed, learning, no_learning })
        })
        .collect();
    let mut out = Vec::with_capacity(seeds.len());
    for r in runs {
        out.push(r?);
    }
    Ok(ComparisonReport { config: *cfg, runs: out })
}
