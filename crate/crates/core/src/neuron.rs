//! Leaky integrate-and-fire dynamics and the smoothed firing function.
//!
//! A hidden neuron integrates `u_pre = tau * u_prev + x`, fires a binary
//! spike when `u_pre` reaches the threshold (ties fire), and hard-resets the
//! membrane to zero on firing. The firing step is not differentiable, so
//! training substitutes the derivative of [`surrogate_phi`] on the backward
//! pass while the forward pass keeps the hard step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Membrane constants shared by every neuron in a spiking layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    /// Leak factor applied to the surviving membrane each timestep, in (0, 1).
    pub tau: f64,
    /// Firing threshold, strictly positive.
    pub v_th: f64,
}

impl NeuronParams {
    pub fn new(tau: f64, v_th: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Param(format!(
                "leak factor tau must lie in (0, 1), got {tau}"
            )));
        }
        if !(v_th > 0.0) {
            return Err(Error::Param(format!(
                "threshold v_th must be positive, got {v_th}"
            )));
        }
        Ok(NeuronParams { tau, v_th })
    }
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            tau: 0.25,
            v_th: 0.5,
        }
    }
}

/// One timestep of LIF dynamics for a whole layer.
#[derive(Debug, Clone)]
pub struct LifStepResult {
    /// Pre-reset membrane potential `tau * u_prev + x`.
    pub u_pre: Tensor,
    /// Binary spike outputs, exactly 0.0 or 1.0.
    pub spikes: Tensor,
    /// Post-reset membrane carried to the next timestep.
    pub u_post: Tensor,
}

/// Advances a spiking layer by one timestep.
///
/// A membrane exactly at threshold fires. Firing resets the membrane to zero;
/// otherwise the pre-reset value is carried forward unchanged.
pub fn lif_step(u_prev: &Tensor, x: &Tensor, params: &NeuronParams) -> Result<LifStepResult> {
    let u_pre = u_prev.zip_map(x, |u, xi| params.tau * u + xi)?;
    let spikes = u_pre.map(|u| if u >= params.v_th { 1.0 } else { 0.0 });
    let u_post = u_pre.zip_map(&spikes, |u, s| u * (1.0 - s))?;
    Ok(LifStepResult {
        u_pre,
        spikes,
        u_post,
    })
}

/// One timestep of the relaxed dynamics used only for gradient diagnostics.
///
/// The hard step is replaced by [`surrogate_phi`] so the whole forward map is
/// differentiable and finite differences of the loss are well-defined. Never
/// used for training or reported metrics.
pub fn lif_step_relaxed(u_prev: &Tensor, x: &Tensor, params: &NeuronParams) -> Result<LifStepResult> {
    let u_pre = u_prev.zip_map(x, |u, xi| params.tau * u + xi)?;
    let spikes = u_pre.map(surrogate_phi);
    let u_post = u_pre.zip_map(&spikes, |u, s| u * (1.0 - s))?;
    Ok(LifStepResult {
        u_pre,
        spikes,
        u_post,
    })
}

/// One timestep of the non-spiking output head: accumulate without leak,
/// firing, or reset. The final accumulated value serves as the logits.
pub fn output_accumulate(u_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
    u_prev.add(x)
}

/// Smoothed firing function: 0 below 0, 1 above 1, and a scaled/shifted
/// `tanh(3(u - 1/2))` ramp on `[0, 1]` that passes through (0,0), (1/2,1/2),
/// and (1,1).
pub fn surrogate_phi(u: f64) -> f64 {
    if u < 0.0 {
        0.0
    } else if u > 1.0 {
        1.0
    } else {
        let scale = 1.0 / (2.0 * (1.5_f64).tanh());
        scale * (3.0 * (u - 0.5)).tanh() + 0.5
    }
}

/// Derivative of [`surrogate_phi`]: zero outside `[0, 1]`, bell-shaped inside
/// with its peak at `u = 1/2`. Training substitutes this for the firing
/// step's derivative.
pub fn surrogate_grad(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        let t = (3.0 * (u - 0.5)).tanh();
        (3.0 / (2.0 * (1.5_f64).tanh())) * (1.0 - t * t)
    }
}
