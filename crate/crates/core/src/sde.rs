//! Stochastic differential equations over flat state vectors.
//!
//! A system is a drift/diffusion pair evaluated in place on `&[f64]` state
//! slices. Integration is fixed-step (Euler-Maruyama or a drift-Heun
//! corrector), driven by keyed Gaussian noise streams so that every
//! trajectory is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

/// Errors surfaced by solvers and system constructors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    /// A state component left the finite range. Integration aborts rather
    /// than clamping so that blow-ups stay visible to callers.
    #[error("non-finite state at t = {t}: component {index} = {value}")]
    NonFiniteState { t: f64, index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

/// Hierarchical RNG key: a master seed plus a stream index.
///
/// Streams with the same key produce identical increment sequences; distinct
/// stream ids never share generator state, so parallel evaluations can each
/// own a stream without coordination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedKey {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedKey {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of integers into a single stream id.
///
/// Used to derive per-task streams from structured indices such as
/// (generation, rollout) without ever reusing a generator.
pub fn derive_stream(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0xA076_1D64_78BD_642F, |acc, &p| splitmix64(acc ^ p))
}

/// Source of Gaussian noise increments for one integration.
///
/// Single-owner by design: every concurrent integration constructs its own
/// stream from a distinct [`SeedKey`].
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
}

impl NoiseStream {
    pub fn new(key: SeedKey, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key.master_seed);
        rng.set_stream(key.stream_id);
        Self { rng, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fills `out` with independent N(0, dt) increments, one per channel.
    pub fn fill_increments(&mut self, dt: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let scale = dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v = scale * z;
        }
    }

    pub fn draw_increments(&mut self, dt: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.fill_increments(dt, &mut out);
        out
    }
}

type DynFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type OpenFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A closed SDE: drift and diffusion as functions of the full state.
///
/// `drift` writes a length-`dim_state` vector; `diffusion` writes a
/// row-major `dim_state x dim_noise` matrix.
pub struct SystemDynamics {
    dim_state: usize,
    dim_noise: usize,
    drift: DynFn,
    diffusion: DynFn,
}

impl std::fmt::Debug for SystemDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemDynamics")
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .finish_non_exhaustive()
    }
}

impl SystemDynamics {
    pub fn new(
        dim_state: usize,
        dim_noise: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_state,
            dim_noise,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
        }
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim_state);
        debug_assert_eq!(out.len(), self.dim_state);
        (self.drift)(x, out);
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_state * self.dim_noise);
        (self.diffusion)(x, out);
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift_into(x, &mut out);
        out
    }

    /// Row-major `dim_state x dim_noise` diffusion matrix at `x`.
    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise];
        self.diffusion_into(x, &mut out);
        out
    }
}

/// An input-driven subsystem: dynamics depend on its own state plus an
/// exogenous input vector (an observation for agents, a control for
/// environments). [`couple`] closes two of these into a [`SystemDynamics`].
pub struct OpenDynamics {
    dim_state: usize,
    dim_input: usize,
    dim_noise: usize,
    drift: OpenFn,
    diffusion: OpenFn,
}

impl OpenDynamics {
    pub fn new(
        dim_state: usize,
        dim_input: usize,
        dim_noise: usize,
        drift: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_state,
            dim_input,
            dim_noise,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
        }
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_input(&self) -> usize {
        self.dim_input
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }
}

/// A fixed-dimension map between state blocks (an observation or readout).
pub struct StateMap {
    dim_in: usize,
    dim_out: usize,
    f: DynFn,
}

impl StateMap {
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { dim_in, dim_out, f: Box::new(f) }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim_in);
        debug_assert_eq!(out.len(), self.dim_out);
        (self.f)(x, out);
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out];
        self.apply_into(x, &mut out);
        out
    }
}

/// Closes the loop between an agent and an environment.
///
/// The joint state is the agent block followed by the environment block, and
/// noise channels stack in the same order. Both subsystem drifts are
/// evaluated against the same instantaneous joint state: the agent receives
/// `observe(environment block)` and the environment receives
/// `control(agent block)`.
pub fn couple(
    agent: OpenDynamics,
    env: OpenDynamics,
    observe: StateMap,
    control: StateMap,
) -> Result<SystemDynamics, SdeError> {
    if observe.dim_in() != env.dim_state() || observe.dim_out() != agent.dim_input() {
        return Err(SdeError::DimensionMismatch(format!(
            "observation map is {}->{} but environment state is {} and agent input is {}",
            observe.dim_in(),
            observe.dim_out(),
            env.dim_state(),
            agent.dim_input()
        )));
    }
    if control.dim_in() != agent.dim_state() || control.dim_out() != env.dim_input() {
        return Err(SdeError::DimensionMismatch(format!(
            "control map is {}->{} but agent state is {} and environment input is {}",
            control.dim_in(),
            control.dim_out(),
            agent.dim_state(),
            env.dim_input()
        )));
    }

    let dim_agent = agent.dim_state();
    let dim_env = env.dim_state();
    let noise_agent = agent.dim_noise();
    let noise_env = env.dim_noise();
    let dim_state = dim_agent + dim_env;
    let dim_noise = noise_agent + noise_env;

    struct Parts {
        agent: OpenDynamics,
        env: OpenDynamics,
        observe: StateMap,
        control: StateMap,
    }
    let parts = Arc::new(Parts { agent, env, observe, control });

    let drift_parts = Arc::clone(&parts);
    let drift = move |x: &[f64], out: &mut [f64]| {
        let (z, s) = x.split_at(dim_agent);
        let (out_z, out_s) = out.split_at_mut(dim_agent);
        let y = drift_parts.observe.apply(s);
        let u = drift_parts.control.apply(z);
        (drift_parts.agent.drift)(z, &y, out_z);
        (drift_parts.env.drift)(s, &u, out_s);
    };

    let diff_parts = parts;
    let diffusion = move |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        let (z, s) = x.split_at(dim_agent);
        let y = diff_parts.observe.apply(s);
        let u = diff_parts.control.apply(z);
        if noise_agent > 0 {
            let mut block = vec![0.0; dim_agent * noise_agent];
            (diff_parts.agent.diffusion)(z, &y, &mut block);
            for i in 0..dim_agent {
                let row = &mut out[i * dim_noise..i * dim_noise + noise_agent];
                row.copy_from_slice(&block[i * noise_agent..(i + 1) * noise_agent]);
            }
        }
        if noise_env > 0 {
            let mut block = vec![0.0; dim_env * noise_env];
            (diff_parts.env.diffusion)(s, &u, &mut block);
            for i in 0..dim_env {
                let row_start = (dim_agent + i) * dim_noise + noise_agent;
                out[row_start..row_start + noise_env]
                    .copy_from_slice(&block[i * noise_env..(i + 1) * noise_env]);
            }
        }
    };

    Ok(SystemDynamics::new(dim_state, dim_noise, drift, diffusion))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    EulerMaruyama,
    HeunStochastic,
}

/// Fixed-step solver configuration. `record_stride` keeps every k-th step
/// (plus the initial state), which thins long runs without touching the
/// noise sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::HeunStochastic,
            dt: 0.1,
            t_end: 1000.0,
            record_stride: 1,
        }
    }
}

impl SolverConfig {
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.dt > 0.0) {
            return Err(SdeError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) {
            return Err(SdeError::InvalidConfig(format!(
                "t_end must be at least dt, got t_end = {} with dt = {}",
                self.t_end, self.dt
            )));
        }
        if self.record_stride == 0 {
            return Err(SdeError::InvalidConfig("record_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// A recorded path: strictly increasing times and one state per time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds the initial state")
    }

    /// CSV export: header `t,x0,x1,...`, one row per recorded step, every
    /// value at 17 significant digits so the file round-trips losslessly.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "t")?;
        for i in 0..self.dim() {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for (t, state) in self.times.iter().zip(&self.states) {
            write!(w, "{}", fmt_full(*t))?;
            for v in state {
                write!(w, ",{}", fmt_full(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// 17 significant digits: enough to reconstruct any f64 exactly.
pub fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

fn first_non_finite(x: &[f64]) -> Option<(usize, f64)> {
    x.iter().enumerate().find(|(_, v)| !v.is_finite()).map(|(i, v)| (i, *v))
}

/// Scratch buffers reused across steps of one integration.
struct Stepper<'a> {
    system: &'a SystemDynamics,
    drift_a: Vec<f64>,
    drift_b: Vec<f64>,
    diff: Vec<f64>,
    noise_term: Vec<f64>,
    predictor: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(system: &'a SystemDynamics) -> Self {
        let d = system.dim_state();
        let n = system.dim_noise();
        Self {
            system,
            drift_a: vec![0.0; d],
            drift_b: vec![0.0; d],
            diff: vec![0.0; d * n],
            noise_term: vec![0.0; d],
            predictor: vec![0.0; d],
        }
    }

    fn noise_term(&mut self, x: &[f64], dw: &[f64]) {
        let d = self.system.dim_state();
        let n = self.system.dim_noise();
        if n == 0 {
            self.noise_term.fill(0.0);
            return;
        }
        self.system.diffusion_into(x, &mut self.diff);
        for i in 0..d {
            let mut acc = 0.0;
            for (j, w) in dw.iter().enumerate() {
                acc += self.diff[i * n + j] * w;
            }
            self.noise_term[i] = acc;
        }
    }

    fn step(&mut self, method: SolverMethod, x: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        self.system.drift_into(x, &mut self.drift_a);
        self.noise_term(x, dw);
        match method {
            SolverMethod::EulerMaruyama => {
                for i in 0..x.len() {
                    out[i] = x[i] + self.drift_a[i] * dt + self.noise_term[i];
                }
            }
            SolverMethod::HeunStochastic => {
                // Drift-Heun with Euler diffusion: the predictor takes a full
                // Euler step, the corrector averages drift at both ends.
                for i in 0..x.len() {
                    self.predictor[i] = x[i] + self.drift_a[i] * dt + self.noise_term[i];
                }
                self.system.drift_into(&self.predictor, &mut self.drift_b);
                for i in 0..x.len() {
                    out[i] = x[i] + 0.5 * (self.drift_a[i] + self.drift_b[i]) * dt + self.noise_term[i];
                }
            }
        }
    }
}

fn single_step(
    method: SolverMethod,
    system: &SystemDynamics,
    x: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>, SdeError> {
    assert_eq!(x.len(), system.dim_state(), "state length must match dim_state");
    assert_eq!(dw.len(), system.dim_noise(), "noise length must match dim_noise");
    let mut stepper = Stepper::new(system);
    let mut out = vec![0.0; x.len()];
    stepper.step(method, x, dt, dw, &mut out);
    if let Some((index, value)) = first_non_finite(&out) {
        // Time is relative to the start of the step.
        return Err(SdeError::NonFiniteState { t: dt, index, value });
    }
    Ok(out)
}

/// One explicit Euler-Maruyama step: `x + drift(x) dt + diffusion(x) dW`.
pub fn step_euler_maruyama(
    system: &SystemDynamics,
    x: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>, SdeError> {
    single_step(SolverMethod::EulerMaruyama, system, x, dt, dw)
}

/// One drift-Heun step with Euler diffusion. Second order in dt on the
/// deterministic part; intended for additive or weakly state-dependent
/// diffusion.
pub fn step_heun(
    system: &SystemDynamics,
    x: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>, SdeError> {
    single_step(SolverMethod::HeunStochastic, system, x, dt, dw)
}

/// Integrates and keeps whatever was recorded before a failure, alongside
/// the failure itself. [`integrate`] is the strict variant.
pub fn integrate_partial(
    system: &SystemDynamics,
    x0: &[f64],
    config: &SolverConfig,
    mut noise: NoiseStream,
) -> (Trajectory, Option<SdeError>) {
    if let Err(e) = config.validate() {
        return (Trajectory { times: vec![], states: vec![] }, Some(e));
    }
    if x0.len() != system.dim_state() {
        return (
            Trajectory { times: vec![], states: vec![] },
            Some(SdeError::DimensionMismatch(format!(
                "initial state has length {} but the system has dimension {}",
                x0.len(),
                system.dim_state()
            ))),
        );
    }
    if noise.dim() != system.dim_noise() {
        return (
            Trajectory { times: vec![], states: vec![] },
            Some(SdeError::DimensionMismatch(format!(
                "noise stream has {} channels but the system has {}",
                noise.dim(),
                system.dim_noise()
            ))),
        );
    }
    if let Some((index, value)) = first_non_finite(x0) {
        return (
            Trajectory { times: vec![], states: vec![] },
            Some(SdeError::NonFiniteState { t: 0.0, index, value }),
        );
    }

    let n_steps = config.n_steps();
    let recorded = n_steps / config.record_stride + 1;
    let mut times = Vec::with_capacity(recorded);
    let mut states = Vec::with_capacity(recorded);
    times.push(0.0);
    states.push(x0.to_vec());

    let mut stepper = Stepper::new(system);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut dw = vec![0.0; system.dim_noise()];
    for step in 1..=n_steps {
        noise.fill_increments(config.dt, &mut dw);
        stepper.step(config.method, &x, config.dt, &dw, &mut next);
        if let Some((index, value)) = first_non_finite(&next) {
            let err = SdeError::NonFiniteState { t: step as f64 * config.dt, index, value };
            return (Trajectory { times, states }, Some(err));
        }
        std::mem::swap(&mut x, &mut next);
        if step % config.record_stride == 0 {
            times.push(step as f64 * config.dt);
            states.push(x.clone());
        }
    }
    (Trajectory { times, states }, None)
}

/// Runs `floor(t_end/dt)` fixed steps from `x0`, recording every
/// `record_stride`-th state. Deterministic in all arguments including the
/// noise stream's key.
pub fn integrate(
    system: &SystemDynamics,
    x0: &[f64],
    config: &SolverConfig,
    noise: NoiseStream,
) -> Result<Trajectory, SdeError> {
    let (trajectory, err) = integrate_partial(system, x0, config, noise);
    match err {
        Some(e) => Err(e),
        None => Ok(trajectory),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_system(dim: usize) -> SystemDynamics {
        SystemDynamics::new(dim, 0, |_, out| out.fill(0.0), |_, _| {})
    }

    fn decay_system() -> SystemDynamics {
        // dx = -x dt
        SystemDynamics::new(1, 0, |x, out| out[0] = -x[0], |_, _| {})
    }

    fn sdi_drift_system(gamma: f64, u: f64) -> SystemDynamics {
        SystemDynamics::new(
            2,
            0,
            move |s, out| {
                out[0] = s[1];
                out[1] = -gamma * s[1] + u;
            },
            |_, _| {},
        )
    }

    #[test]
    fn zero_dynamics_is_identity_for_both_steppers() {
        let sys = zero_system(2);
        let x = [1.0, 2.0];
        assert_eq!(step_euler_maruyama(&sys, &x, 0.1, &[]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(step_heun(&sys, &x, 0.1, &[]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn euler_step_matches_hand_computed_sdi_drift() {
        let sys = sdi_drift_system(0.5, 0.0);
        let next = step_euler_maruyama(&sys, &[1.0, 2.0], 0.1, &[]).unwrap();
        assert!((next[0] - 1.2).abs() < 1e-15);
        assert!((next[1] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn euler_step_linear_decay() {
        let sys = decay_system();
        let next = step_euler_maruyama(&sys, &[1.0], 0.1, &[]).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn heun_step_linear_decay() {
        // predictor 0.9, corrector 1 + 0.5*(-1 - 0.9)*0.1 = 0.905
        let sys = decay_system();
        let next = step_heun(&sys, &[1.0], 0.1, &[]).unwrap();
        assert!((next[0] - 0.905).abs() < 1e-15);
    }

    fn global_decay_error(method: SolverMethod, dt: f64) -> f64 {
        let sys = decay_system();
        let config = SolverConfig { method, dt, t_end: 1.0, record_stride: 1 };
        let noise = NoiseStream::new(SeedKey::new(0, 0), 0);
        let traj = integrate(&sys, &[1.0], &config, noise).unwrap();
        (traj.final_state()[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn euler_is_first_order_and_heun_second_order_on_decay() {
        for (method, order) in [
            (SolverMethod::EulerMaruyama, 1.0),
            (SolverMethod::HeunStochastic, 2.0),
        ] {
            let e1 = global_decay_error(method, 0.01);
            let e2 = global_decay_error(method, 0.005);
            let slope = (e1 / e2).log2();
            assert!(
                (slope - order).abs() < 0.1 * order,
                "{method:?}: slope {slope} vs expected order {order}"
            );
        }
    }

    #[test]
    fn integrate_reaches_ou_mean() {
        // d theta = lambda (0.5 - theta) dt, analytic solution 0.5 (1 - e^{-lambda t})
        let sys = SystemDynamics::new(1, 0, |x, out| out[0] = 2.0 * (0.5 - x[0]), |_, _| {});
        let config = SolverConfig { t_end: 10.0, ..Default::default() };
        let traj = integrate(&sys, &[0.0], &config, NoiseStream::new(SeedKey::new(1, 0), 0)).unwrap();
        assert!((traj.final_state()[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn shortest_run_records_two_points() {
        let sys = zero_system(1);
        let config = SolverConfig { dt: 0.1, t_end: 0.1, ..Default::default() };
        let traj = integrate(&sys, &[0.0], &config, NoiseStream::new(SeedKey::new(0, 0), 0)).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.states[0], vec![0.0]);
    }

    #[test]
    fn ou_stationary_variance_matches_analytic_value() {
        // d theta = lambda (mu - theta) dt + sigma dW with variance sigma^2 / (2 lambda)
        let (lambda, sigma) = (2.0, 0.1);
        let sys = SystemDynamics::new(
            1,
            1,
            move |x, out| out[0] = lambda * (0.0 - x[0]),
            move |_, out| out[0] = sigma,
        );
        let config = SolverConfig {
            method: SolverMethod::EulerMaruyama,
            dt: 0.05,
            t_end: 50_000.0,
            record_stride: 10,
        };
        let traj = integrate(&sys, &[0.0], &config, NoiseStream::new(SeedKey::new(7, 0), 1)).unwrap();
        let burn = traj.len() / 10;
        let samples: Vec<f64> = traj.states[burn..].iter().map(|s| s[0]).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples.len() as f64;
        let expected = sigma * sigma / (2.0 * lambda);
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn noise_increments_have_zero_mean_and_variance_dt() {
        let dt = 0.1;
        let n = 100_000;
        let mut stream = NoiseStream::new(SeedKey::new(42, 9), 2);
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut dw = [0.0f64; 2];
        for _ in 0..n {
            stream.fill_increments(dt, &mut dw);
            for c in 0..2 {
                sums[c] += dw[c];
                sq[c] += dw[c] * dw[c];
            }
        }
        for c in 0..2 {
            let mean = sums[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "channel {c} mean {mean}");
            assert!((var - dt).abs() < 0.05 * dt, "channel {c} variance {var}");
        }
    }

    #[test]
    fn identical_seed_keys_give_identical_streams() {
        let mut a = NoiseStream::new(SeedKey::new(3, 4), 3);
        let mut b = NoiseStream::new(SeedKey::new(3, 4), 3);
        for _ in 0..100 {
            assert_eq!(a.draw_increments(0.1), b.draw_increments(0.1));
        }
        let mut c = NoiseStream::new(SeedKey::new(3, 5), 3);
        assert_ne!(NoiseStream::new(SeedKey::new(3, 4), 3).draw_increments(0.1), c.draw_increments(0.1));
    }

    #[test]
    fn integrate_is_reproducible_bitwise() {
        let sys = SystemDynamics::new(
            1,
            1,
            |x, out| out[0] = -x[0],
            |_, out| out[0] = 0.3,
        );
        let config = SolverConfig { t_end: 5.0, ..Default::default() };
        let a = integrate(&sys, &[1.0], &config, NoiseStream::new(SeedKey::new(11, 2), 1)).unwrap();
        let b = integrate(&sys, &[1.0], &config, NoiseStream::new(SeedKey::new(11, 2), 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_reports_first_failing_step() {
        // Cubic growth reaches infinity quickly from a large start.
        let sys = SystemDynamics::new(1, 0, |x, out| out[0] = x[0] * x[0] * x[0], |_, _| {});
        let config = SolverConfig { dt: 1.0, t_end: 100.0, ..Default::default() };
        let err = integrate(&sys, &[1e200], &config, NoiseStream::new(SeedKey::new(0, 0), 0))
            .unwrap_err();
        match err {
            SdeError::NonFiniteState { t, index, .. } => {
                assert_eq!(index, 0);
                assert!(t > 0.0 && t <= 3.0, "failing time {t}");
            }
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }

    #[test]
    fn integrate_partial_keeps_prefix_on_blow_up() {
        let sys = SystemDynamics::new(1, 0, |x, out| out[0] = x[0] * x[0] * x[0], |_, _| {});
        let config = SolverConfig { dt: 1.0, t_end: 100.0, ..Default::default() };
        let (traj, err) =
            integrate_partial(&sys, &[1e200], &config, NoiseStream::new(SeedKey::new(0, 0), 0));
        assert!(err.is_some());
        assert!(!traj.is_empty());
        assert!(traj.states.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn record_stride_thins_output() {
        let sys = zero_system(1);
        let config = SolverConfig { dt: 0.1, t_end: 1.0, record_stride: 2, ..Default::default() };
        let traj = integrate(&sys, &[0.0], &config, NoiseStream::new(SeedKey::new(0, 0), 0)).unwrap();
        assert_eq!(traj.len(), 6);
        assert!((traj.times[1] - 0.2).abs() < 1e-12);
    }

    fn zero_agent(k: usize, dim_obs: usize) -> OpenDynamics {
        OpenDynamics::new(k, dim_obs, 0, |_, _, out| out.fill(0.0), |_, _, _| {})
    }

    fn sdi_open(gamma: f64, epsilon: f64) -> OpenDynamics {
        OpenDynamics::new(
            2,
            1,
            1,
            move |s, u, out| {
                out[0] = s[1];
                out[1] = -gamma * s[1] + u[0];
            },
            move |_, _, out| {
                out[0] = 0.0;
                out[1] = epsilon;
            },
        )
    }

    #[test]
    fn couple_stacks_dimensions() {
        for k in [1usize, 2, 3] {
            let joint = couple(
                zero_agent(k, 2),
                sdi_open(0.5, 0.1),
                StateMap::new(2, 2, |s, out| out.copy_from_slice(s)),
                StateMap::new(k, 1, |_, out| out[0] = 0.0),
            )
            .unwrap();
            assert_eq!(joint.dim_state(), 2 + k);
            assert_eq!(joint.dim_noise(), 1);
        }
    }

    #[test]
    fn couple_rejects_inconsistent_maps() {
        let err = couple(
            zero_agent(2, 2),
            sdi_open(0.5, 0.1),
            StateMap::new(2, 3, |_, out| out.fill(0.0)),
            StateMap::new(2, 1, |_, out| out[0] = 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, SdeError::DimensionMismatch(_)));
    }

    #[test]
    fn coupled_integration_is_deterministic() {
        let build = || {
            couple(
                zero_agent(2, 2),
                sdi_open(0.5, 0.1),
                StateMap::new(2, 2, |s, out| out.copy_from_slice(s)),
                StateMap::new(2, 1, |_, out| out[0] = 0.0),
            )
            .unwrap()
        };
        let config = SolverConfig { t_end: 10.0, ..Default::default() };
        let x0 = [0.0, 0.0, 2.0, 0.0];
        let a = integrate(&build(), &x0, &config, NoiseStream::new(SeedKey::new(5, 1), 1)).unwrap();
        let b = integrate(&build(), &x0, &config, NoiseStream::new(SeedKey::new(5, 1), 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_precision_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 2.0_f64.sqrt(), -1.15, 0.30000000000000004, 1e-17] {
            let parsed: f64 = fmt_full(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "value {v}");
        }
    }

    #[test]
    fn derive_stream_separates_indices() {
        let a = derive_stream(&[1, 2, 3]);
        let b = derive_stream(&[1, 2, 4]);
        let c = derive_stream(&[1, 2, 3]);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }
}
