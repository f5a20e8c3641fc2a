//! Benchmark environments behind a common interface.
//!
//! The stochastic double integrator is the only environment shipped here: a
//! particle with position/velocity state, friction, a scalar control force,
//! and additive velocity noise.

use crate::sde::OpenDynamics;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Friction, noise scale, and start state of the double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdiParams {
    pub gamma: f64,
    pub epsilon: f64,
    pub s0: [f64; 2],
}

impl Default for SdiParams {
    fn default() -> Self {
        Self { gamma: 0.5, epsilon: 0.1, s0: [2.0, 0.0] }
    }
}

/// Weights of the quadratic reward: position magnitude vs control effort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_pos: f64,
    pub w_ctrl: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_pos: 0.9, w_ctrl: 0.1 }
    }
}

/// A controllable stochastic environment: state equation, observation map,
/// and reward. Implementations are immutable value objects.
pub trait Environment: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_obs(&self) -> usize;
    fn dim_ctrl(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    fn drift(&self, s: &[f64], u: &[f64], out: &mut [f64]);
    /// Row-major `dim_state x dim_noise` matrix.
    fn diffusion(&self, s: &[f64], out: &mut [f64]);
    fn observe(&self, s: &[f64], out: &mut [f64]);
    fn reward(&self, s: &[f64], u: &[f64]) -> f64;
    /// Short human-readable parameter summary for run metadata.
    fn describe(&self) -> String {
        "environment".into()
    }
}

/// Double-integrator drift: position integrates velocity, velocity feels
/// friction and the control force.
pub fn sdi_drift(s: &[f64], u: f64, params: &SdiParams) -> [f64; 2] {
    [s[1], -params.gamma * s[1] + u]
}

/// Noise enters the velocity equation only: the column (0, epsilon).
pub fn sdi_diffusion(params: &SdiParams) -> [f64; 2] {
    [0.0, params.epsilon]
}

/// Full observability: the observation is the state itself.
pub fn observe_full(s: &[f64]) -> Vec<f64> {
    s.to_vec()
}

/// Quadratic penalty on position magnitude and control effort; zero is the
/// best attainable value.
pub fn quadratic_reward(s: &[f64], u: &[f64], w: &RewardWeights) -> f64 {
    let u_sq: f64 = u.iter().map(|v| v * v).sum();
    -w.w_pos * s[0] * s[0] - w.w_ctrl * u_sq
}

/// The stochastic double integrator with its quadratic reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SdiEnv {
    pub params: SdiParams,
    pub weights: RewardWeights,
}

impl SdiEnv {
    pub fn new(params: SdiParams, weights: RewardWeights) -> Self {
        Self { params, weights }
    }
}

impl Environment for SdiEnv {
    fn dim_state(&self) -> usize {
        2
    }

    fn dim_obs(&self) -> usize {
        2
    }

    fn dim_ctrl(&self) -> usize {
        1
    }

    fn dim_noise(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        self.params.s0.to_vec()
    }

    fn drift(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        let d = sdi_drift(s, u[0], &self.params);
        out.copy_from_slice(&d);
    }

    fn diffusion(&self, _s: &[f64], out: &mut [f64]) {
        let col = sdi_diffusion(&self.params);
        out.copy_from_slice(&col);
    }

    fn observe(&self, s: &[f64], out: &mut [f64]) {
        out.copy_from_slice(s);
    }

    fn reward(&self, s: &[f64], u: &[f64]) -> f64 {
        quadratic_reward(s, u, &self.weights)
    }

    fn describe(&self) -> String {
        format!(
            "sdi gamma={} epsilon={} s0=({},{}) w_pos={} w_ctrl={}",
            self.params.gamma,
            self.params.epsilon,
            self.params.s0[0],
            self.params.s0[1],
            self.weights.w_pos,
            self.weights.w_ctrl
        )
    }
}

/// Wraps any environment as an input-driven block for [`crate::sde::couple`].
pub fn environment_dynamics<E: Environment + Clone + 'static>(env: &E) -> OpenDynamics {
    let drift_env = env.clone();
    let diff_env = env.clone();
    OpenDynamics::new(
        env.dim_state(),
        env.dim_ctrl(),
        env.dim_noise(),
        move |s, u, out| drift_env.drift(s, u, out),
        move |s, _, out| diff_env.diffusion(s, out),
    )
}

/// Independent uniform ranges over friction, noise scale, and start state,
/// used to average returns over a family of environments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdiDistribution {
    pub gamma: (f64, f64),
    pub epsilon: (f64, f64),
    pub s0: (f64, f64),
}

impl Default for SdiDistribution {
    fn default() -> Self {
        Self { gamma: (0.25, 1.0), epsilon: (0.05, 0.2), s0: (-2.0, 2.0) }
    }
}

impl SdiDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R, weights: RewardWeights) -> SdiEnv {
        let params = SdiParams {
            gamma: rng.gen_range(self.gamma.0..=self.gamma.1),
            epsilon: rng.gen_range(self.epsilon.0..=self.epsilon.1),
            s0: [
                rng.gen_range(self.s0.0..=self.s0.1),
                rng.gen_range(self.s0.0..=self.s0.1),
            ],
        };
        SdiEnv::new(params, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{integrate, NoiseStream, SeedKey, SolverConfig, SystemDynamics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drift_examples() {
        let p = SdiParams::default();
        assert_eq!(sdi_drift(&[0.0, 0.0], 0.0, &p), [0.0, 0.0]);
        assert_eq!(sdi_drift(&[1.0, 2.0], 0.0, &p), [2.0, -1.0]);
        assert_eq!(sdi_drift(&[0.0, 1.0], 0.5, &p), [1.0, 0.0]);
    }

    #[test]
    fn diffusion_is_constant_velocity_column() {
        let p = SdiParams::default();
        assert_eq!(sdi_diffusion(&p), [0.0, 0.1]);
        let det = SdiParams { epsilon: 0.0, ..p };
        assert_eq!(sdi_diffusion(&det), [0.0, 0.0]);
    }

    #[test]
    fn observation_is_identity() {
        assert_eq!(observe_full(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(observe_full(&[1.5, -2.0]), vec![1.5, -2.0]);
        let env = SdiEnv::default();
        assert_eq!(env.dim_obs(), env.dim_state());
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(quadratic_reward(&[0.0, 3.0], &[0.0], &w), 0.0);
        assert!((quadratic_reward(&[1.0, 0.0], &[1.0], &w) + 1.0).abs() < 1e-15);
        assert!((quadratic_reward(&[2.0, -1.0], &[0.0], &w) + 3.6).abs() < 1e-15);
    }

    #[test]
    fn reward_is_nonpositive_and_sign_symmetric() {
        let w = RewardWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..1000 {
            let s = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let u = [rng.gen_range(-2.0..2.0)];
            let r = quadratic_reward(&s, &u, &w);
            assert!(r <= 0.0);
            let flipped = quadratic_reward(&[-s[0], s[1]], &[-u[0]], &w);
            assert_eq!(r.to_bits(), flipped.to_bits());
        }
        assert_eq!(quadratic_reward(&[0.0, 1.0], &[0.0], &w), 0.0);
    }

    #[test]
    fn uncontrolled_velocity_decays_exponentially() {
        // With epsilon = 0 and u = 0 the velocity is s2(t) = s2(0) e^{-gamma t}.
        let params = SdiParams { epsilon: 0.0, s0: [0.0, 1.0], ..Default::default() };
        let env = SdiEnv::new(params, RewardWeights::default());
        let sys = SystemDynamics::new(
            2,
            0,
            move |s, out| env.drift(s, &[0.0], out),
            |_, _| {},
        );
        let config = SolverConfig { t_end: 2.0, ..Default::default() };
        let traj = integrate(&sys, &[0.0, 1.0], &config, NoiseStream::new(SeedKey::new(0, 0), 0))
            .unwrap();
        let expected = (-0.5f64 * 2.0).exp();
        assert!((traj.final_state()[1] - expected).abs() < 1e-3);
    }

    #[test]
    fn distribution_samples_inside_ranges() {
        let dist = SdiDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let env = dist.sample(&mut rng, RewardWeights::default());
            assert!(env.params.gamma >= 0.25 && env.params.gamma <= 1.0);
            assert!(env.params.epsilon >= 0.05 && env.params.epsilon <= 0.2);
            assert!(env.params.s0.iter().all(|v| (-2.0..=2.0).contains(v)));
        }
    }
}
