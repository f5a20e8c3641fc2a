//! Experiment configuration: one JSON document with per-command sections.
//!
//! Every field has a default; the defaults are the benchmark constants used
//! throughout the library. Unknown keys anywhere in the document are
//! rejected. A run's `manifest.json` is this same structure with everything
//! resolved, so feeding a manifest back through `--config` reproduces the
//! run exactly.

use crate::CliError;
use dynlab_core::ctrnn::CtrnnDims;
use dynlab_core::dgp::GpConfig;
use dynlab_core::environments::{RewardWeights, SdiEnv, SdiParams};
use dynlab_core::oua::{AgentConfig, OuaHyper};
use dynlab_core::sde::{SolverConfig, SolverMethod};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub gamma: f64,
    pub epsilon: f64,
    pub s0: [f64; 2],
    pub w_pos: f64,
    pub w_ctrl: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let params = SdiParams::default();
        let weights = RewardWeights::default();
        Self {
            gamma: params.gamma,
            epsilon: params.epsilon,
            s0: params.s0,
            w_pos: weights.w_pos,
            w_ctrl: weights.w_ctrl,
        }
    }
}

impl EnvSection {
    pub fn build(&self) -> SdiEnv {
        SdiEnv::new(
            SdiParams { gamma: self.gamma, epsilon: self.epsilon, s0: self.s0 },
            RewardWeights { w_pos: self.w_pos, w_ctrl: self.w_ctrl },
        )
    }

    fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("environment.gamma", self.gamma),
            ("environment.epsilon", self.epsilon),
            ("environment.w_pos", self.w_pos),
            ("environment.w_ctrl", self.w_ctrl),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub neurons: usize,
    pub kappa: f64,
    pub tau_floor: f64,
    pub freeze_tau: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            neurons: a.dims.neurons,
            kappa: a.kappa,
            tau_floor: a.tau_floor,
            freeze_tau: a.freeze_tau,
        }
    }
}

impl AgentSection {
    /// Observation and control widths come from the environment.
    pub fn build(&self, dim_obs: usize, dim_ctrl: usize) -> AgentConfig {
        AgentConfig {
            dims: CtrnnDims::new(self.neurons, dim_obs, dim_ctrl),
            kappa: self.kappa,
            tau_floor: self.tau_floor,
            freeze_tau: self.freeze_tau,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.neurons == 0 {
            return Err("agent.neurons must be at least 1".into());
        }
        if !(self.kappa >= 0.0) {
            return Err(format!("agent.kappa must be non-negative, got {}", self.kappa));
        }
        if !(self.tau_floor > 0.0) {
            return Err(format!("agent.tau_floor must be positive, got {}", self.tau_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: SolverMethod,
    pub dt: f64,
    /// Horizon; when omitted the command default applies (1000 for
    /// simulate/learn, 50 for evolve and eval-expr).
    pub t_end: Option<f64>,
    pub record_stride: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self { method: s.method, dt: s.dt, t_end: None, record_stride: s.record_stride }
    }
}

impl SolverSection {
    pub fn resolve(&self, default_t_end: f64) -> SolverConfig {
        SolverConfig {
            method: self.method,
            dt: self.dt,
            t_end: self.t_end.unwrap_or(default_t_end),
            record_stride: self.record_stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnSection {
    pub discount_rate: f64,
}

impl Default for ReturnSection {
    fn default() -> Self {
        Self { discount_rate: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    /// Paired seeds to run; seeds are master_seed, master_seed+1, ...
    pub n_seeds: usize,
}

impl Default for LearnSection {
    fn default() -> Self {
        Self { n_seeds: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Matched rollouts per individual when scoring stored expressions.
    pub n_rollouts: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_rollouts: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Filled in by manifests for the record; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub environment: EnvSection,
    pub agent: AgentSection,
    pub oua: OuaHyper,
    pub solver: SolverSection,
    #[serde(rename = "return")]
    pub return_: ReturnSection,
    pub learn: LearnSection,
    pub gp: GpConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!("invalid config {}: {e}", p.display()))
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let issues = [
            self.environment.validate(),
            self.agent.validate(),
            self.oua.validate().map_err(|e| e.to_string()),
            self.solver.resolve(1.0).validate().map_err(|e| e.to_string()),
            self.gp.validate(),
            (self.learn.n_seeds >= 1)
                .then_some(())
                .ok_or_else(|| "learn.n_seeds must be at least 1".to_string()),
            (self.eval.n_rollouts >= 1)
                .then_some(())
                .ok_or_else(|| "eval.n_rollouts must be at least 1".to_string()),
        ];
        for issue in issues {
            issue.map_err(CliError::Config)?;
        }
        Ok(())
    }

    /// Output directory resolution: the --out flag wins, then the config
    /// value, then `$DYNLAB_OUT/<command>-s<seed>`, then
    /// `runs/<command>-s<seed>`.
    pub fn resolve_output_dir(&self, cli_out: Option<&Path>, command: &str) -> PathBuf {
        if let Some(out) = cli_out {
            return out.to_path_buf();
        }
        if let Some(out) = &self.output_dir {
            return out.clone();
        }
        let root = std::env::var_os("DYNLAB_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{command}-s{}", self.master_seed))
    }
}
