//! Threshold-dependent batch normalization over time-stacked activations.
//!
//! Statistics are taken per channel jointly over the timestep, batch, and
//! spatial axes of a `[T, B, C, H, W]` tensor, so the same normalizer sees
//! every timestep of a sequence at once. The normalized signal is scaled to
//! variance `(alpha * v_th)^2` before the learned affine map, which places
//! pre-activations on a scale matched to the firing threshold.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TdBNLayer {
    /// Learned per-channel scale, initialized to 1.
    pub gamma: Vec<f64>,
    /// Learned per-channel shift, initialized to 0.
    pub beta: Vec<f64>,
    /// Extra scale on the normalized signal, default 1.
    pub alpha: f64,
    /// Firing threshold of the downstream spiking layer.
    pub v_th: f64,
    /// Variance floor keeping the division well-defined.
    pub eps: f64,
    /// Weight on the previous running estimate in the EMA update, in (0, 1).
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl TdBNLayer {
    pub fn new(channels: usize, alpha: f64, v_th: f64, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Param("channel count must be nonzero".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Param(format!("alpha must be positive, got {alpha}")));
        }
        if !(v_th > 0.0) {
            return Err(Error::Param(format!("v_th must be positive, got {v_th}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!("eps must be positive, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Param(format!(
                "momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(TdBNLayer {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            alpha,
            v_th,
            eps,
            momentum,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values cached by a training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct TdBNCache {
    training: bool,
    shape: Vec<usize>,
    /// Normalized values (x - mean) / sqrt(var + eps), full tensor size.
    x_hat: Vec<f64>,
    /// Per-channel 1 / sqrt(var + eps).
    inv_sigma: Vec<f64>,
}

fn check_input(layer: &TdBNLayer, x: &Tensor) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "expected a [T, B, C, H, W] tensor, got shape {shape:?}"
        )));
    }
    if shape[2] != layer.channels() {
        return Err(Error::Shape(format!(
            "input has {} channels but the layer normalizes {}",
            shape[2],
            layer.channels()
        )));
    }
    Ok(())
}

/// Iterates the flat ranges holding channel `c`: one contiguous `H*W` run per
/// `(t, b)` pair.
fn channel_runs<'a>(
    shape: &'a [usize],
    c: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
    let (t_dim, b_dim, c_dim, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let hw = h * w;
    (0..t_dim * b_dim).map(move |tb| {
        let start = (tb * c_dim + c) * hw;
        start..start + hw
    })
}

/// Normalizes a time-stacked activation tensor.
///
/// In training mode the batch statistics are used, the running estimates are
/// updated by EMA, and the returned cache supports [`tdbn_backward`]. In
/// inference mode the stored running statistics are applied as a fixed affine
/// map and the cache cannot be used for a backward pass.
pub fn tdbn_forward(
    layer: &mut TdBNLayer,
    x: &Tensor,
    training: bool,
) -> Result<(Tensor, TdBNCache)> {
    if !training {
        let y = tdbn_infer(layer, x)?;
        return Ok((
            y,
            TdBNCache {
                training: false,
                shape: x.shape().to_vec(),
                x_hat: Vec::new(),
                inv_sigma: Vec::new(),
            },
        ));
    }
    check_input(layer, x)?;
    let shape = x.shape().to_vec();
    let channels = layer.channels();
    let per_channel = x.len() / channels;
    let a = layer.alpha * layer.v_th;

    let mut y = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_sigma = vec![0.0; channels];
    // Indexed loop: `c` addresses four parallel per-channel arrays at once.
    #[allow(clippy::needless_range_loop)]
    for c in 0..channels {
        let mut sum = 0.0;
        for run in channel_runs(&shape, c) {
            for &v in &x.data()[run] {
                sum += v;
            }
        }
        let mean = sum / per_channel as f64;
        let mut sq = 0.0;
        for run in channel_runs(&shape, c) {
            for &v in &x.data()[run] {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / per_channel as f64;
        let inv = 1.0 / (var + layer.eps).sqrt();
        inv_sigma[c] = inv;
        let (g, b) = (layer.gamma[c], layer.beta[c]);
        for run in channel_runs(&shape, c) {
            for i in run {
                let h = (x.data()[i] - mean) * inv;
                x_hat[i] = h;
                y[i] = g * (a * h) + b;
            }
        }
        let m = layer.momentum;
        layer.running_mean[c] = m * layer.running_mean[c] + (1.0 - m) * mean;
        layer.running_var[c] = m * layer.running_var[c] + (1.0 - m) * var;
    }
    Ok((
        Tensor::from_vec(&shape, y)?,
        TdBNCache {
            training: true,
            shape,
            x_hat,
            inv_sigma,
        },
    ))
}

/// Inference-mode normalization: a deterministic affine map built from the
/// running statistics. Does not touch layer state.
pub fn tdbn_infer(layer: &TdBNLayer, x: &Tensor) -> Result<Tensor> {
    check_input(layer, x)?;
    let shape = x.shape().to_vec();
    let a = layer.alpha * layer.v_th;
    let mut y = vec![0.0; x.len()];
    for c in 0..layer.channels() {
        let inv = 1.0 / (layer.running_var[c] + layer.eps).sqrt();
        let mean = layer.running_mean[c];
        let (g, b) = (layer.gamma[c], layer.beta[c]);
        for run in channel_runs(&shape, c) {
            for i in run {
                y[i] = g * (a * (x.data()[i] - mean) * inv) + b;
            }
        }
    }
    Tensor::from_vec(&shape, y)
}

/// Gradients of a training-mode forward pass.
///
/// Returns `(dx, dgamma, dbeta)`. The batch mean and variance are treated as
/// functions of the input, so the input gradient includes the two correction
/// terms that recentre and rescale the raw upstream gradient.
pub fn tdbn_backward(
    layer: &TdBNLayer,
    cache: &TdBNCache,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if !cache.training {
        return Err(Error::Usage(
            "backward requires a cache from a training-mode forward pass".into(),
        ));
    }
    if dy.shape() != &cache.shape[..] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match cached input shape {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    check_input(layer, dy)?;
    let channels = layer.channels();
    let per_channel = dy.len() / channels;
    let a = layer.alpha * layer.v_th;

    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let g = layer.gamma[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for run in channel_runs(&cache.shape, c) {
            for i in run {
                let d = dy.data()[i];
                sum_dy += d;
                sum_dy_xhat += d * cache.x_hat[i];
            }
        }
        dbeta[c] = sum_dy;
        dgamma[c] = a * sum_dy_xhat;
        let mean_dxhat = g * a * sum_dy / per_channel as f64;
        let mean_dxhat_xhat = g * a * sum_dy_xhat / per_channel as f64;
        let inv = cache.inv_sigma[c];
        for run in channel_runs(&cache.shape, c) {
            for i in run {
                let dxhat = dy.data()[i] * g * a;
                dx[i] = inv * (dxhat - mean_dxhat - cache.x_hat[i] * mean_dxhat_xhat);
            }
        }
    }
    Ok((Tensor::from_vec(&cache.shape, dx)?, dgamma, dbeta))
}
