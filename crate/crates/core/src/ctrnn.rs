//! Stochastic continuous-time recurrent network agent.
//!
//! Activations relax toward a sigmoid-mixed recurrent drive plus the current
//! observation, each neuron with its own time constant, and the control is a
//! saturating linear readout of the activations. Parameters flatten to a
//! single vector so that online adaptation can treat them as extra SDE state.

use crate::sde::{OpenDynamics, SdeError};
use serde::{Deserialize, Serialize};

/// Network shape: neurons `k`, observation inputs `m`, control outputs `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtrnnDims {
    pub neurons: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl CtrnnDims {
    pub fn new(neurons: usize, inputs: usize, outputs: usize) -> Self {
        Self { neurons, inputs, outputs }
    }

    /// Flattened learnable parameter count:
    /// time constants, biases, recurrent, input, and readout weights.
    pub fn param_count(&self) -> usize {
        let k = self.neurons;
        k + k + k * k + k * self.inputs + self.outputs * k
    }
}

impl Default for CtrnnDims {
    fn default() -> Self {
        Self { neurons: 2, inputs: 2, outputs: 1 }
    }
}

/// Learnable parameters. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrnnParams {
    pub tau: Vec<f64>,
    pub bias: Vec<f64>,
    /// k x k recurrent weights.
    pub recurrent: Vec<f64>,
    /// k x m input weights.
    pub input: Vec<f64>,
    /// c x k readout weights.
    pub readout: Vec<f64>,
}

impl CtrnnParams {
    pub fn dims(&self) -> CtrnnDims {
        let k = self.tau.len();
        CtrnnDims::new(k, if k == 0 { 0 } else { self.input.len() / k }, if k == 0 { 0 } else { self.readout.len() / k })
    }
}

/// Zero initialization except unit time constants; the paired initial
/// activation vector is all zeros, so the readout starts identically zero.
pub fn init_params(dims: CtrnnDims) -> CtrnnParams {
    let k = dims.neurons;
    CtrnnParams {
        tau: vec![1.0; k],
        bias: vec![0.0; k],
        recurrent: vec![0.0; k * k],
        input: vec![0.0; k * dims.inputs],
        readout: vec![0.0; dims.outputs * k],
    }
}

/// Initial activations: zeros.
pub fn initial_state(dims: CtrnnDims) -> Vec<f64> {
    vec![0.0; dims.neurons]
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn drift_with(
    tau: &[f64],
    bias: &[f64],
    recurrent: &[f64],
    input: &[f64],
    alpha: &[f64],
    y: &[f64],
    tau_floor: f64,
    out: &mut [f64],
) {
    let k = alpha.len();
    let m = y.len();
    for i in 0..k {
        let mut acc = -alpha[i];
        for j in 0..k {
            acc += recurrent[i * k + j] * logistic(alpha[j] + bias[j]);
        }
        for j in 0..m {
            acc += input[i * m + j] * y[j];
        }
        out[i] = acc / tau[i].max(tau_floor);
    }
}

/// Activation drift: relaxation plus sigmoid recurrence plus observation
/// drive, scaled per neuron by the inverse time constant.
pub fn drift(alpha: &[f64], y: &[f64], p: &CtrnnParams, out: &mut [f64]) {
    drift_with(&p.tau, &p.bias, &p.recurrent, &p.input, alpha, y, 0.0, out);
}

/// Same drift evaluated directly on a flattened parameter vector.
///
/// Time constants are clamped below at `tau_floor` so that parameter noise
/// cannot push them through zero.
pub fn drift_from_flat(
    theta: &[f64],
    dims: CtrnnDims,
    tau_floor: f64,
    alpha: &[f64],
    y: &[f64],
    out: &mut [f64],
) {
    let k = dims.neurons;
    let m = dims.inputs;
    let tau = &theta[0..k];
    let bias = &theta[k..2 * k];
    let recurrent = &theta[2 * k..2 * k + k * k];
    let input = &theta[2 * k + k * k..2 * k + k * k + k * m];
    drift_with(tau, bias, recurrent, input, alpha, y, tau_floor, out);
}

/// Diffusion is an independent Brownian channel per neuron: kappa on the
/// diagonal of a k x k matrix.
pub fn diffusion(kappa: f64, k: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..k {
        out[i * k + i] = kappa;
    }
}

fn readout_with(weights: &[f64], alpha: &[f64], out: &mut [f64]) {
    let k = alpha.len();
    for (ci, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..k {
            acc += weights[ci * k + j] * alpha[j];
        }
        *o = acc.tanh();
    }
}

/// Saturating control readout; every component lies strictly inside (-1, 1).
pub fn readout(alpha: &[f64], p: &CtrnnParams, out: &mut [f64]) {
    readout_with(&p.readout, alpha, out);
}

/// Readout evaluated directly on a flattened parameter vector.
pub fn readout_from_flat(theta: &[f64], dims: CtrnnDims, alpha: &[f64], out: &mut [f64]) {
    let k = dims.neurons;
    let start = 2 * k + k * k + k * dims.inputs;
    readout_with(&theta[start..start + dims.outputs * k], alpha, out);
}

/// Flattening order: tau, bias, recurrent (row-major), input (row-major),
/// readout (row-major).
pub fn flatten(p: &CtrnnParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.dims().param_count());
    out.extend_from_slice(&p.tau);
    out.extend_from_slice(&p.bias);
    out.extend_from_slice(&p.recurrent);
    out.extend_from_slice(&p.input);
    out.extend_from_slice(&p.readout);
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64], dims: CtrnnDims) -> Result<CtrnnParams, SdeError> {
    if v.len() != dims.param_count() {
        return Err(SdeError::DimensionMismatch(format!(
            "flat parameter vector has length {} but dims {:?} require {}",
            v.len(),
            dims,
            dims.param_count()
        )));
    }
    let k = dims.neurons;
    let m = dims.inputs;
    let c = dims.outputs;
    let mut at = 0;
    let mut take = |n: usize| {
        let s = v[at..at + n].to_vec();
        at += n;
        s
    };
    Ok(CtrnnParams {
        tau: take(k),
        bias: take(k),
        recurrent: take(k * k),
        input: take(k * m),
        readout: take(c * k),
    })
}

/// The network as an input-driven block for [`crate::sde::couple`]: state is
/// the activation vector, input is the observation.
pub fn open_dynamics(params: &CtrnnParams, kappa: f64) -> OpenDynamics {
    let dims = params.dims();
    let k = dims.neurons;
    let drift_params = params.clone();
    OpenDynamics::new(
        k,
        dims.inputs,
        k,
        move |alpha, y, out| drift(alpha, y, &drift_params, out),
        move |_, _, out| diffusion(kappa, k, out),
    )
}
