//! Ornstein-Uhlenbeck adaptation: learning as extra SDE state.
//!
//! Each flattened network parameter performs an OU walk around a mean, the
//! means drift toward perturbations that outperform the running reward
//! estimate, and the estimate itself is a first-order filter of the reward.
//! Stacking these with the environment and the activations yields one joint
//! system whose forward integration *is* the learning process.

use crate::ctrnn::{self, CtrnnDims};
use crate::environments::Environment;
use crate::sde::{SdeError, SystemDynamics, Trajectory};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::ops::Range;

/// Adaptation rates: OU pull `lambda`, exploration scale `sigma`, mean
/// adaptation rate `eta`, reward filter rate `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuaHyper {
    pub lambda: f64,
    pub sigma: f64,
    pub eta: f64,
    pub rho: f64,
}

impl Default for OuaHyper {
    fn default() -> Self {
        Self { lambda: 2.0, sigma: 0.1, eta: 5.0, rho: 2.0 }
    }
}

impl OuaHyper {
    /// The paired no-learning arm: no exploration noise, no mean adaptation.
    pub fn without_learning(self) -> Self {
        Self { sigma: 0.0, eta: 0.0, ..self }
    }

    /// User-facing configs require strictly positive rates.
    pub fn validate(&self) -> Result<(), SdeError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("eta", self.eta),
            ("rho", self.rho),
        ] {
            if !(v > 0.0) {
                return Err(SdeError::InvalidConfig(format!(
                    "oua.{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning-augmented variables: parameters, their means, and the reward
/// estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct OuaState {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: f64,
}

impl OuaState {
    /// Means start on top of the parameters and the reward estimate at zero.
    pub fn initial(theta0: Vec<f64>) -> Self {
        let mu = theta0.clone();
        Self { theta: theta0, mu, nu: 0.0 }
    }
}

/// Reward-prediction error: observed reward minus the running estimate.
pub fn rpe(r: f64, nu: f64) -> f64 {
    r - nu
}

/// OU drift on the parameters: pull toward the means at rate lambda. The
/// matching diffusion is `sigma` on the diagonal, one channel per parameter.
pub fn theta_drift(theta: &[f64], mu: &[f64], h: &OuaHyper, out: &mut [f64]) {
    for i in 0..theta.len() {
        out[i] = h.lambda * (mu[i] - theta[i]);
    }
}

/// Mean adaptation: move toward the current perturbation when the reward
/// surprise is positive, away when negative.
pub fn mu_drift(theta: &[f64], mu: &[f64], delta: f64, h: &OuaHyper, out: &mut [f64]) {
    for i in 0..theta.len() {
        out[i] = h.eta * delta * (theta[i] - mu[i]);
    }
}

/// First-order filter of the reward.
pub fn nu_drift(r: f64, nu: f64, h: &OuaHyper) -> f64 {
    h.rho * (r - nu)
}

/// Agent shape plus the fixed hyper-parameters of its inference dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub dims: CtrnnDims,
    pub kappa: f64,
    /// Lower clamp applied to time constants wherever the flat parameter
    /// vector is interpreted.
    pub tau_floor: f64,
    /// Excludes time constants from exploration and adaptation.
    pub freeze_tau: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { dims: CtrnnDims::default(), kappa: 0.01, tau_floor: 0.05, freeze_tau: false }
    }
}

/// Index layout of the joint learning state
/// x = (environment, activations, parameters, means, reward estimate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LearningLayout {
    pub dim_env: usize,
    pub dim_env_noise: usize,
    pub neurons: usize,
    pub n_params: usize,
}

impl LearningLayout {
    pub fn env(&self) -> Range<usize> {
        0..self.dim_env
    }

    pub fn alpha(&self) -> Range<usize> {
        self.dim_env..self.dim_env + self.neurons
    }

    pub fn theta(&self) -> Range<usize> {
        let start = self.dim_env + self.neurons;
        start..start + self.n_params
    }

    pub fn mu(&self) -> Range<usize> {
        let start = self.dim_env + self.neurons + self.n_params;
        start..start + self.n_params
    }

    pub fn nu(&self) -> usize {
        self.dim_env + self.neurons + 2 * self.n_params
    }

    pub fn dim(&self) -> usize {
        self.dim_env + self.neurons + 2 * self.n_params + 1
    }

    /// Noise channels: environment, then one per neuron, then one per
    /// parameter. Means and the reward estimate are noiseless.
    pub fn dim_noise(&self) -> usize {
        self.dim_env_noise + self.neurons + self.n_params
    }
}

/// Builds the joint learning SDE over (environment, activations, parameters,
/// means, reward estimate).
///
/// At every drift evaluation the current flat parameters are read as a
/// network, the activations produce a control, the environment produces a
/// reward, and the reward surprise gates mean adaptation.
pub fn build_learning_system<E>(
    env: &E,
    agent: AgentConfig,
    hyper: OuaHyper,
) -> Result<(SystemDynamics, LearningLayout), SdeError>
where
    E: Environment + Clone + 'static,
{
    let dims = agent.dims;
    if env.dim_obs() != dims.inputs {
        return Err(SdeError::DimensionMismatch(format!(
            "environment emits {} observations but the agent expects {}",
            env.dim_obs(),
            dims.inputs
        )));
    }
    if env.dim_ctrl() != dims.outputs {
        return Err(SdeError::DimensionMismatch(format!(
            "environment takes {} controls but the agent produces {}",
            env.dim_ctrl(),
            dims.outputs
        )));
    }

    let layout = LearningLayout {
        dim_env: env.dim_state(),
        dim_env_noise: env.dim_noise(),
        neurons: dims.neurons,
        n_params: dims.param_count(),
    };

    let drift_env = env.clone();
    let h = hyper;
    let a = agent;
    let l = layout;
    let drift = move |x: &[f64], out: &mut [f64]| {
        let s = &x[l.env()];
        let alpha = &x[l.alpha()];
        let theta = &x[l.theta()];
        let mu = &x[l.mu()];
        let nu = x[l.nu()];

        let mut u = vec![0.0; a.dims.outputs];
        ctrnn::readout_from_flat(theta, a.dims, alpha, &mut u);
        let mut y = vec![0.0; a.dims.inputs];
        drift_env.observe(s, &mut y);
        let r = drift_env.reward(s, &u);
        let delta = rpe(r, nu);

        let (head, tail) = out.split_at_mut(l.dim_env);
        drift_env.drift(s, &u, head);
        let (alpha_out, tail) = tail.split_at_mut(l.neurons);
        ctrnn::drift_from_flat(theta, a.dims, a.tau_floor, alpha, &y, alpha_out);
        let (theta_out, tail) = tail.split_at_mut(l.n_params);
        theta_drift(theta, mu, &h, theta_out);
        let (mu_out, nu_out) = tail.split_at_mut(l.n_params);
        mu_drift(theta, mu, delta, &h, mu_out);
        nu_out[0] = nu_drift(r, nu, &h);

        if a.freeze_tau {
            theta_out[..a.dims.neurons].fill(0.0);
            mu_out[..a.dims.neurons].fill(0.0);
        }
    };

    let diff_env = env.clone();
    let diffusion = move |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        let n = l.dim_noise();
        let s = &x[l.env()];
        let mut env_block = vec![0.0; l.dim_env * l.dim_env_noise];
        diff_env.diffusion(s, &mut env_block);
        for i in 0..l.dim_env {
            out[i * n..i * n + l.dim_env_noise]
                .copy_from_slice(&env_block[i * l.dim_env_noise..(i + 1) * l.dim_env_noise]);
        }
        for i in 0..l.neurons {
            let row = l.dim_env + i;
            out[row * n + l.dim_env_noise + i] = a.kappa;
        }
        let frozen = if a.freeze_tau { a.dims.neurons } else { 0 };
        for i in frozen..l.n_params {
            let row = l.dim_env + l.neurons + i;
            out[row * n + l.dim_env_noise + l.neurons + i] = h.sigma;
        }
    };

    Ok((SystemDynamics::new(layout.dim(), layout.dim_noise(), drift, diffusion), layout))
}

/// Joint initial state: environment start, zero activations, zero-initialized
/// parameters with means on top, zero reward estimate.
pub fn initial_learning_state<E: Environment>(env: &E, agent: AgentConfig) -> Vec<f64> {
    let theta0 = ctrnn::flatten(&ctrnn::init_params(agent.dims));
    let oua0 = OuaState::initial(theta0);
    let mut x0 = env.initial_state();
    x0.extend(ctrnn::initial_state(agent.dims));
    x0.extend_from_slice(&oua0.theta);
    x0.extend_from_slice(&oua0.mu);
    x0.push(oua0.nu);
    x0
}

/// Control and reward recovered from a recorded joint state.
pub fn control_and_reward<E: Environment>(
    x: &[f64],
    env: &E,
    agent: AgentConfig,
    layout: &LearningLayout,
) -> (Vec<f64>, f64) {
    let s = &x[layout.env()];
    let alpha = &x[layout.alpha()];
    let theta = &x[layout.theta()];
    let mut u = vec![0.0; agent.dims.outputs];
    ctrnn::readout_from_flat(theta, agent.dims, alpha, &mut u);
    let r = env.reward(s, &u);
    (u, r)
}

/// True when any recorded raw time constant sat below the clamp, meaning the
/// floor actually shaped the dynamics somewhere along the run.
pub fn tau_clamp_active(traj: &Trajectory, layout: &LearningLayout, tau_floor: f64) -> bool {
    let theta = layout.theta();
    traj.states
        .iter()
        .any(|x| x[theta.clone()][..layout.neurons].iter().any(|t| *t < tau_floor))
}

/// Learning-run CSV: `t, s1..sd, u, r, nu, delta, theta_0.., mu_0..`.
pub fn write_learning_csv<E: Environment, W: Write>(
    traj: &Trajectory,
    env: &E,
    agent: AgentConfig,
    layout: &LearningLayout,
    w: &mut W,
) -> io::Result<()> {
    use crate::sde::fmt_full;
    write!(w, "t")?;
    for i in 0..layout.dim_env {
        write!(w, ",s{}", i + 1)?;
    }
    if agent.dims.outputs == 1 {
        write!(w, ",u")?;
    } else {
        for i in 0..agent.dims.outputs {
            write!(w, ",u{}", i + 1)?;
        }
    }
    write!(w, ",r,nu,delta")?;
    for i in 0..layout.n_params {
        write!(w, ",theta_{i}")?;
    }
    for i in 0..layout.n_params {
        write!(w, ",mu_{i}")?;
    }
    writeln!(w)?;

    for (t, x) in traj.times.iter().zip(&traj.states) {
        let (u, r) = control_and_reward(x, env, agent, layout);
        let nu = x[layout.nu()];
        let delta = rpe(r, nu);
        write!(w, "{}", fmt_full(*t))?;
        for v in &x[layout.env()] {
            write!(w, ",{}", fmt_full(*v))?;
        }
        for v in &u {
            write!(w, ",{}", fmt_full(*v))?;
        }
        write!(w, ",{},{},{}", fmt_full(r), fmt_full(nu), fmt_full(delta))?;
        for v in &x[layout.theta()] {
            write!(w, ",{}", fmt_full(*v))?;
        }
        for v in &x[layout.mu()] {
            write!(w, ",{}", fmt_full(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::SdiEnv;
    use crate::sde::{integrate, NoiseStream, SeedKey, SolverConfig, SystemDynamics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rpe_examples() {
        assert_eq!(rpe(-1.0, -1.0), 0.0);
        assert_eq!(rpe(0.0, -2.0), 2.0);
        assert_eq!(rpe(-3.6, 0.0), -3.6);
    }

    #[test]
    fn theta_drift_examples() {
        let h = OuaHyper::default();
        let mut out = vec![0.0; 2];
        theta_drift(&[0.3, 0.3], &[0.3, 0.3], &h, &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
        theta_drift(&[1.0, 0.0], &[0.0, 0.0], &h, &mut out);
        assert_eq!(out, vec![-2.0, 0.0]);
    }

    #[test]
    fn mu_drift_examples() {
        let h = OuaHyper::default();
        let mut out = vec![0.0];
        mu_drift(&[0.7], &[0.6], 0.0, &h, &mut out);
        assert_eq!(out, vec![0.0]);
        mu_drift(&[0.6], &[0.6], 3.0, &h, &mut out);
        assert_eq!(out, vec![0.0]);
        mu_drift(&[0.7], &[0.6], 2.0, &h, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nu_drift_examples() {
        let h = OuaHyper::default();
        assert_eq!(nu_drift(1.0, 1.0, &h), 0.0);
        assert_eq!(nu_drift(-1.0, 0.0, &h), -2.0);
    }

    #[test]
    fn nu_filter_converges_to_constant_reward() {
        // d nu = rho (1 - nu) dt from 0: nu(t) = 1 - e^{-rho t}
        let h = OuaHyper::default();
        let sys = SystemDynamics::new(1, 0, move |x, out| out[0] = nu_drift(1.0, x[0], &h), |_, _| {});
        let config = SolverConfig { t_end: 10.0, ..Default::default() };
        let traj = integrate(&sys, &[0.0], &config, NoiseStream::new(SeedKey::new(0, 0), 0)).unwrap();
        assert!((traj.final_state()[0] - 1.0).abs() < 1e-3);
        // The filter error decays like e^{-rho t} along the way, up to the
        // solver's own discretization error.
        for (t, x) in traj.times.iter().zip(&traj.states).step_by(10) {
            let expected = 1.0 - (-h.rho * t).exp();
            assert!((x[0] - expected).abs() < 5e-3, "t = {t}");
        }
    }

    #[test]
    fn joint_dimension_counts() {
        let env = SdiEnv::default();
        let (sys, layout) =
            build_learning_system(&env, AgentConfig::default(), OuaHyper::default()).unwrap();
        assert_eq!(layout.n_params, 14);
        assert_eq!(sys.dim_state(), 2 + 2 + 14 + 14 + 1);
        assert_eq!(sys.dim_noise(), 1 + 2 + 14);
        assert_eq!(initial_learning_state(&env, AgentConfig::default()).len(), 33);
    }

    #[test]
    fn no_exploration_means_no_learning() {
        // sigma = 0 with theta0 = mu0 keeps theta == mu == mu0 forever.
        let env = SdiEnv::default();
        let agent = AgentConfig::default();
        let hyper = OuaHyper { sigma: 0.0, ..Default::default() };
        let (sys, layout) = build_learning_system(&env, agent, hyper).unwrap();
        let x0 = initial_learning_state(&env, agent);
        let config = SolverConfig { t_end: 20.0, ..Default::default() };
        let traj =
            integrate(&sys, &x0, &config, NoiseStream::new(SeedKey::new(1, 0), sys.dim_noise()))
                .unwrap();
        let theta0 = x0[layout.theta()].to_vec();
        for x in &traj.states {
            assert_eq!(&x[layout.theta()], theta0.as_slice());
            assert_eq!(&x[layout.mu()], theta0.as_slice());
        }
    }

    #[test]
    fn learning_block_fixed_point() {
        // With delta = 0 and theta = mu the learning-block drift vanishes.
        let env = SdiEnv::default();
        let agent = AgentConfig::default();
        let (sys, layout) = build_learning_system(&env, agent, OuaHyper::default()).unwrap();
        let mut x = initial_learning_state(&env, agent);
        // Put the filter exactly on the current reward so delta = 0.
        let (_, r) = control_and_reward(&x, &env, agent, &layout);
        x[layout.nu()] = r;
        let drift = sys.drift(&x);
        assert!(drift[layout.theta()].iter().all(|v| *v == 0.0));
        assert!(drift[layout.mu()].iter().all(|v| *v == 0.0));
        assert_eq!(drift[layout.nu()], 0.0);
    }

    #[test]
    fn frozen_tau_rows_carry_no_dynamics() {
        let env = SdiEnv::default();
        let agent = AgentConfig { freeze_tau: true, ..Default::default() };
        let (sys, layout) = build_learning_system(&env, agent, OuaHyper::default()).unwrap();
        let mut x = initial_learning_state(&env, agent);
        // Push theta away from mu so OU drift would be nonzero if unfrozen.
        let theta = layout.theta();
        x[theta.start] = 2.0;
        x[theta.start + 1] = 0.5;
        let drift = sys.drift(&x);
        assert_eq!(drift[theta.start], 0.0);
        assert_eq!(drift[theta.start + 1], 0.0);
        let diff = sys.diffusion(&x);
        let n = sys.dim_noise();
        for i in 0..2 {
            let row = layout.dim_env + layout.neurons + i;
            assert!(diff[row * n..(row + 1) * n].iter().all(|v| *v == 0.0));
        }
        // Non-tau parameter rows keep their exploration channel.
        let row = layout.dim_env + layout.neurons + 2;
        assert!(diff[row * n..(row + 1) * n].iter().any(|v| *v != 0.0));
    }

    /// Independent re-statement of the full joint drift and diffusion,
    /// assembled with naive loops rather than the composition machinery.
    mod monolithic {
        use super::super::*;
        use crate::environments::SdiEnv;

        pub fn drift(x: &[f64], env: &SdiEnv, a: &AgentConfig, h: &OuaHyper) -> Vec<f64> {
            let k = a.dims.neurons;
            let m = a.dims.inputs;
            let n = a.dims.param_count();
            let s = &x[0..2];
            let alpha = &x[2..2 + k];
            let theta = &x[2 + k..2 + k + n];
            let mu = &x[2 + k + n..2 + k + 2 * n];
            let nu = x[2 + k + 2 * n];

            let tau = &theta[0..k];
            let bias = &theta[k..2 * k];
            let rec = &theta[2 * k..2 * k + k * k];
            let inp = &theta[2 * k + k * k..2 * k + k * k + k * m];
            let ro = &theta[2 * k + k * k + k * m..n];

            let mut u = 0.0;
            for j in 0..k {
                u += ro[j] * alpha[j];
            }
            let u = u.tanh();
            let r = -env.weights.w_pos * s[0] * s[0] - env.weights.w_ctrl * u * u;
            let delta = r - nu;

            let mut out = vec![0.0; x.len()];
            out[0] = s[1];
            out[1] = -env.params.gamma * s[1] + u;
            for i in 0..k {
                let mut acc = -alpha[i];
                for j in 0..k {
                    acc += rec[i * k + j] * (1.0 / (1.0 + (-(alpha[j] + bias[j])).exp()));
                }
                for j in 0..m {
                    acc += inp[i * m + j] * s[j];
                }
                out[2 + i] = acc / tau[i].max(a.tau_floor);
            }
            for i in 0..n {
                out[2 + k + i] = h.lambda * (mu[i] - theta[i]);
                out[2 + k + n + i] = h.eta * delta * (theta[i] - mu[i]);
            }
            out[2 + k + 2 * n] = h.rho * (r - nu);
            out
        }

        pub fn diffusion(x: &[f64], env: &SdiEnv, a: &AgentConfig, h: &OuaHyper) -> Vec<f64> {
            let k = a.dims.neurons;
            let n = a.dims.param_count();
            let d = x.len();
            let cols = 1 + k + n;
            let mut out = vec![0.0; d * cols];
            // velocity row, environment channel
            out[cols] = env.params.epsilon;
            for i in 0..k {
                out[(2 + i) * cols + 1 + i] = a.kappa;
            }
            for i in 0..n {
                out[(2 + k + i) * cols + 1 + k + i] = h.sigma;
            }
            out
        }
    }

    #[test]
    fn composed_system_matches_monolithic_oracle_bitwise() {
        let env = SdiEnv::default();
        let agent = AgentConfig::default();
        let hyper = OuaHyper::default();
        let (sys, layout) = build_learning_system(&env, agent, hyper).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let mut x = vec![0.0; layout.dim()];
            for v in x.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let got = sys.drift(&x);
            let want = monolithic::drift(&x, &env, &agent, &hyper);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                assert_eq!(g.to_bits(), w.to_bits(), "drift component {i}");
            }
            let got = sys.diffusion(&x);
            let want = monolithic::diffusion(&x, &env, &agent, &hyper);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                assert_eq!(g.to_bits(), w.to_bits(), "diffusion entry {i}");
            }
        }
    }

    #[test]
    fn hyper_validation_rejects_nonpositive_rates() {
        assert!(OuaHyper::default().validate().is_ok());
        assert!(OuaHyper { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(OuaHyper { lambda: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn clamp_scan_detects_low_time_constants() {
        let layout = LearningLayout { dim_env: 2, dim_env_noise: 1, neurons: 2, n_params: 14 };
        let mut x = vec![0.0; layout.dim()];
        x[layout.theta()][..2].copy_from_slice(&[1.0, 1.0]);
        let mut traj = Trajectory { times: vec![0.0], states: vec![x.clone()] };
        assert!(!tau_clamp_active(&traj, &layout, 0.05));
        x[layout.theta()][1] = 0.01;
        traj.states.push(x);
        traj.times.push(0.1);
        assert!(tau_clamp_active(&traj, &layout, 0.05));
    }
}
