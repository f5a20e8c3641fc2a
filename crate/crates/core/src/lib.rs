//! Simulation and optimization of coupled agent-environment stochastic
//! dynamics.
//!
//! The crate is organized around a small stack of layers:
//!
//! * [`sde`] — stochastic differential equations over flat state vectors,
//!   fixed-step solvers, and reproducible keyed noise streams.
//! * [`environments`] — the stochastic double-integrator benchmark behind a
//!   general environment interface.
//! * [`ctrnn`] — a stochastic continuous-time recurrent network agent with a
//!   saturating readout.
//! * [`oua`] — Ornstein-Uhlenbeck adaptation: online learning expressed as
//!   additional SDE state, so adaptation happens purely by forward
//!   integration.
//! * [`dgp`] — genetic programming over the symbolic state equations of an
//!   agent, with island populations and simulation-based fitness.
//! * [`experiments`] — rollouts, returns, and paired comparisons between
//!   learning, evolved, and baseline agents.

pub mod ctrnn;
pub mod dgp;
pub mod environments;
pub mod experiments;
pub mod oua;
pub mod sde;
