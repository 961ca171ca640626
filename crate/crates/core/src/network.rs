//! Layered spiking networks over time-stacked activations.
//!
//! Every layer maps a `[T, B, ...]` tensor to another `[T, B, ...]` tensor.
//! Stateless layers (dense, conv, pooling, normalization) treat the leading
//! two axes as one batch axis; the spiking layer scans timesteps sequentially
//! because its membrane state couples them; the output head accumulates its
//! input over time and emits the final sums as logits.
//!
//! The backward pass retraces the stack in reverse. At spiking layers it
//! walks time backwards, substituting the smoothed firing derivative for the
//! hard step and carrying membrane credit across timesteps through the leak.
//! The reset gate is treated as a constant during differentiation. Scheduled
//! quantization-penalty gradients are injected directly at each recorded
//! membrane node.

use crate::error::{Error, Result};
use crate::loss::MembraneTape;
use crate::neuron::{lif_step, lif_step_relaxed, surrogate_grad, NeuronParams};
use crate::normalization::{tdbn_backward, tdbn_forward, tdbn_infer, TdBNCache, TdBNLayer};
use crate::rng::SeededRng;
use crate::tensor::{gauss, Tensor};

/// Forward nonlinearity of spiking layers.
///
/// `Spiking` is the real model: a hard threshold emitting binary spikes.
/// `Relaxed` replaces the step with the smoothed firing function so the whole
/// network becomes differentiable; it exists only to make end-to-end finite
/// difference checks well-defined and is never used for training runs or
/// reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    Spiking,
    Relaxed,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        /// `[out, in]` weight matrix.
        weight: Tensor,
        /// `[out]` bias.
        bias: Tensor,
    },
    Conv2d {
        /// `[out_ch, in_ch, kh, kw]` kernels. No bias: a normalizer follows.
        kernels: Tensor,
        stride: usize,
        padding: usize,
    },
    TdBN(TdBNLayer),
    SpikingActivation(NeuronParams),
    AvgPool {
        /// Non-overlapping square window edge.
        window: usize,
    },
    Flatten,
    /// Leak-free, reset-free accumulator; its final sum is the logits.
    OutputHead,
}

/// Per-layer values saved by a training forward pass for the backward pass.
enum LayerCache {
    Dense {
        /// Input flattened to `[T*B, in]`.
        input: Tensor,
    },
    Conv2d {
        input: Tensor,
    },
    TdBN {
        cache: TdBNCache,
        /// Input was `[T, B, F]` and passed through as `[T, B, F, 1, 1]`.
        reshaped: bool,
        out_shape: Vec<usize>,
    },
    Spiking {
        u_pre: Vec<Tensor>,
        spikes: Vec<Tensor>,
    },
    AvgPool {
        in_shape: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    OutputHead {
        in_shape: Vec<usize>,
    },
}

/// Result of a training-mode forward pass, ready for [`Network::backward`].
pub struct ForwardPass {
    pub logits: Tensor,
    pub tape: MembraneTape,
    mode: ActivationMode,
    caches: Vec<LayerCache>,
}

/// Gradients for one layer, mirroring its parameter tensors.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { dweight: Tensor, dbias: Tensor },
    Conv2d { dkernels: Tensor },
    TdBN { dgamma: Vec<f64>, dbeta: Vec<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

/// Scheduled quantization-penalty gradients to inject at membrane nodes:
/// one tensor per tape record, already ordered like the tape, plus the
/// schedule weight to scale them by.
pub struct RmpInjection<'a> {
    pub grads: &'a [Tensor],
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub timesteps: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Param("timestep count must be at least 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::Param("network must have at least one layer".into()));
        }
        let head_positions: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::OutputHead))
            .map(|(i, _)| i)
            .collect();
        if head_positions != [layers.len() - 1] {
            return Err(Error::Param(
                "network must end in exactly one output head".into(),
            ));
        }
        Ok(Network { layers, timesteps })
    }

    /// Checks layer compatibility against a per-sample input shape and class
    /// count, returning the per-sample shape after each layer.
    pub fn check_shapes(&self, sample_shape: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = sample_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                Layer::Dense { weight, .. } => {
                    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                    if shape.len() != 1 || shape[0] != cols {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense expects [{cols}] features, got {shape:?}"
                        )));
                    }
                    vec![rows]
                }
                Layer::Conv2d {
                    kernels,
                    stride,
                    padding,
                } => {
                    let ks = kernels.shape();
                    let (cout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects [C, H, W] input, got {shape:?}"
                        )));
                    };
                    if c != cin {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects {cin} input channels, got {c}"
                        )));
                    }
                    let ho = conv_out(h, kh, *stride, *padding).ok_or_else(|| {
                        Error::Shape(format!("layer {i}: conv window exceeds padded height {h}"))
                    })?;
                    let wo = conv_out(w, kw, *stride, *padding).ok_or_else(|| {
                        Error::Shape(format!("layer {i}: conv window exceeds padded width {w}"))
                    })?;
                    vec![cout, ho, wo]
                }
                Layer::TdBN(bn) => {
                    let channels = match shape[..] {
                        [f] => f,
                        [c, _, _] => c,
                        _ => {
                            return Err(Error::Shape(format!(
                                "layer {i}: normalization expects [F] or [C, H, W], got {shape:?}"
                            )))
                        }
                    };
                    if channels != bn.channels() {
                        return Err(Error::Shape(format!(
                            "layer {i}: normalizer has {} channels, input has {channels}",
                            bn.channels()
                        )));
                    }
                    shape
                }
                Layer::SpikingActivation(_) => shape,
                Layer::AvgPool { window } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Shape(format!(
                            "layer {i}: pooling expects [C, H, W], got {shape:?}"
                        )));
                    };
                    if *window == 0 || h % window != 0 || w % window != 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: window {window} does not tile {h}x{w}"
                        )));
                    }
                    vec![c, h / window, w / window]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::OutputHead => {
                    if shape != [class_count] {
                        return Err(Error::Shape(format!(
                            "output head sees {shape:?}, expected [{class_count}] logits"
                        )));
                    }
                    shape
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Training-mode forward pass with direct input encoding: the sample
    /// tensor `x` of shape `[B, ...]` is presented unchanged at every
    /// timestep. Updates normalizer running statistics. With `record` the
    /// returned pass carries the membrane tape.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        record: bool,
        mode: ActivationMode,
    ) -> Result<ForwardPass> {
        let timesteps = self.timesteps;
        let mut act = encode_direct(x, timesteps)?;
        let mut tape = MembraneTape::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (next, cache) =
                layer_forward(layer, i, &act, true, mode, record.then_some(&mut tape))?;
            caches.push(cache);
            act = next;
        }
        Ok(ForwardPass {
            logits: act,
            tape,
            mode,
            caches,
        })
    }

    /// Inference-mode forward pass: normalizers apply their running
    /// statistics and no layer state is touched. Returns the logits and the
    /// (possibly empty) membrane tape.
    pub fn forward_infer(&self, x: &Tensor, record: bool) -> Result<(Tensor, MembraneTape)> {
        let timesteps = self.timesteps;
        let mut act = encode_direct(x, timesteps)?;
        let mut tape = MembraneTape::new();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer_infer(layer, i, &act, record.then_some(&mut tape))?;
        }
        Ok((act, tape))
    }

    /// Backpropagation through time over a recorded training pass.
    ///
    /// `dlogits` is the loss gradient at the output head. `rmp` optionally
    /// injects quantization-penalty gradients (ordered like the tape) at
    /// every membrane node, scaled by the schedule weight.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: &Tensor,
        rmp: Option<RmpInjection<'_>>,
    ) -> Result<Gradients> {
        let timesteps = self.timesteps;
        if let Some(inj) = &rmp {
            let spiking: usize = self
                .layers
                .iter()
                .filter(|l| matches!(l, Layer::SpikingActivation(_)))
                .count();
            if inj.grads.len() != spiking * timesteps {
                return Err(Error::Shape(format!(
                    "{} membrane gradients for {} spiking layers over {} timesteps",
                    inj.grads.len(),
                    spiking,
                    timesteps
                )));
            }
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        grads.resize_with(self.layers.len(), || LayerGrads::None);

        // Record ranges in the tape are laid out layer-major: each spiking
        // layer owns `timesteps` consecutive records.
        let mut record_base: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut seen_spiking = 0usize;
        for layer in &self.layers {
            record_base.push(seen_spiking * timesteps);
            if matches!(layer, Layer::SpikingActivation(_)) {
                seen_spiking += 1;
            }
        }

        let mut d = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let (dx, layer_grads) = layer_backward(
                &self.layers[i],
                &pass.caches[i],
                &d,
                pass.mode,
                timesteps,
                rmp.as_ref().map(|inj| (inj, record_base[i])),
            )?;
            grads[i] = layer_grads;
            d = dx;
        }
        Ok(Gradients { layers: grads })
    }

    /// Standard small architecture on flat features:
    /// dense to 128, normalize, spike, dense to the class logits, accumulate.
    pub fn mlp_s(
        features: usize,
        classes: usize,
        bp: &BuildParams,
        rng: &mut SeededRng,
    ) -> Result<Network> {
        let layers = vec![
            dense_init(features, 128, rng)?,
            Layer::TdBN(TdBNLayer::new(
                128,
                bp.alpha,
                bp.neuron.v_th,
                bp.bn_eps,
                bp.bn_momentum,
            )?),
            Layer::SpikingActivation(bp.neuron),
            dense_init(128, classes, rng)?,
            Layer::OutputHead,
        ];
        Network::new(layers, bp.timesteps)
    }

    /// Standard small architecture on image planes: two conv/normalize/spike/
    /// pool stages (16 then 32 channels), flatten, dense to logits, accumulate.
    pub fn cnn_s(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        bp: &BuildParams,
        rng: &mut SeededRng,
    ) -> Result<Network> {
        // Two pool-by-2 stages; 3x3 stride 1 padding 1 preserves dims.
        if !height.is_multiple_of(4) || !width.is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "cnn-s needs spatial dims divisible by 4, got {height}x{width}"
            )));
        }
        let flat = 32 * (height / 4) * (width / 4);
        let layers = vec![
            conv_init(channels, 16, 3, 1, 1, rng)?,
            Layer::TdBN(TdBNLayer::new(
                16,
                bp.alpha,
                bp.neuron.v_th,
                bp.bn_eps,
                bp.bn_momentum,
            )?),
            Layer::SpikingActivation(bp.neuron),
            Layer::AvgPool { window: 2 },
            conv_init(16, 32, 3, 1, 1, rng)?,
            Layer::TdBN(TdBNLayer::new(
                32,
                bp.alpha,
                bp.neuron.v_th,
                bp.bn_eps,
                bp.bn_momentum,
            )?),
            Layer::SpikingActivation(bp.neuron),
            Layer::AvgPool { window: 2 },
            Layer::Flatten,
            dense_init(flat, classes, rng)?,
            Layer::OutputHead,
        ];
        Network::new(layers, bp.timesteps)
    }

    /// Builds a named architecture against a per-sample input shape. Image
    /// samples fed to `mlp-s` are flattened by a leading flatten layer.
    pub fn build(
        arch: &str,
        sample_shape: &[usize],
        classes: usize,
        bp: &BuildParams,
        rng: &mut SeededRng,
    ) -> Result<Network> {
        let net = match arch {
            "mlp-s" => {
                let features: usize = sample_shape.iter().product();
                let mut net = Network::mlp_s(features, classes, bp, rng)?;
                if sample_shape.len() > 1 {
                    net.layers.insert(0, Layer::Flatten);
                }
                net
            }
            "cnn-s" => {
                let [c, h, w] = sample_shape[..] else {
                    return Err(Error::Shape(format!(
                        "cnn-s needs [C, H, W] samples, got {sample_shape:?}"
                    )));
                };
                Network::cnn_s(c, h, w, classes, bp, rng)?
            }
            other => {
                return Err(Error::Param(format!(
                    "unknown architecture \"{other}\" (expected mlp-s or cnn-s)"
                )))
            }
        };
        net.check_shapes(sample_shape, classes)?;
        Ok(net)
    }
}

/// Architecture-independent construction constants.
#[derive(Debug, Clone, Copy)]
pub struct BuildParams {
    pub neuron: NeuronParams,
    pub alpha: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub timesteps: usize,
}

/// Dense layer with fan-in-scaled normal weights and zero biases.
fn dense_init(fin: usize, fout: usize, rng: &mut SeededRng) -> Result<Layer> {
    let std = (2.0 / fin as f64).sqrt();
    Ok(Layer::Dense {
        weight: gauss(rng, &[fout, fin], 0.0, std)?,
        bias: Tensor::zeros(&[fout])?,
    })
}

/// Conv layer with fan-in-scaled normal kernels.
fn conv_init(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut SeededRng,
) -> Result<Layer> {
    let fan_in = cin * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    Ok(Layer::Conv2d {
        kernels: gauss(rng, &[cout, cin, k, k], 0.0, std)?,
        stride,
        padding,
    })
}

fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Repeats a `[B, ...]` sample tensor at every timestep: `[T, B, ...]`.
fn encode_direct(x: &Tensor, timesteps: usize) -> Result<Tensor> {
    if x.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "input must be [B, ...] with at least one feature axis, got {:?}",
            x.shape()
        )));
    }
    let mut shape = Vec::with_capacity(x.shape().len() + 1);
    shape.push(timesteps);
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(x.len() * timesteps);
    for _ in 0..timesteps {
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Splits `[T, B, ...]` into its `T` per-timestep tensors `[B, ...]`.
fn split_time(x: &Tensor) -> Result<Vec<Tensor>> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!(
            "expected [T, B, ...] activations, got {shape:?}"
        )));
    }
    let t_count = shape[0];
    let per = x.len() / t_count;
    let per_shape = &shape[1..];
    (0..t_count)
        .map(|t| Tensor::from_vec(per_shape, x.data()[t * per..(t + 1) * per].to_vec()))
        .collect()
}

/// Stacks `T` per-timestep tensors `[B, ...]` back into `[T, B, ...]`.
fn stack_time(slices: &[Tensor]) -> Result<Tensor> {
    let per_shape = slices[0].shape();
    let mut shape = Vec::with_capacity(per_shape.len() + 1);
    shape.push(slices.len());
    shape.extend_from_slice(per_shape);
    let mut data = Vec::with_capacity(slices[0].len() * slices.len());
    for s in slices {
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Merges the `[T, B, ...]` leading axes for a stateless layer: `[T*B, rest]`.
fn merge_tb(x: &Tensor, feature_rank: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != feature_rank + 2 {
        return Err(Error::Shape(format!(
            "expected [T, B] plus {feature_rank} feature axes, got {shape:?}"
        )));
    }
    let mut merged = vec![shape[0] * shape[1]];
    merged.extend_from_slice(&shape[2..]);
    x.reshape(&merged)
}

fn layer_forward(
    layer: &mut Layer,
    index: usize,
    x: &Tensor,
    training: bool,
    mode: ActivationMode,
    tape: Option<&mut MembraneTape>,
) -> Result<(Tensor, LayerCache)> {
    match layer {
        Layer::Dense { weight, bias } => {
            let (t, b) = (x.shape()[0], x.shape()[1]);
            let x2 = merge_tb(x, 1)?;
            let y2 = dense_forward(&x2, weight, bias)?;
            let y = y2.reshape(&[t, b, weight.shape()[0]])?;
            Ok((y, LayerCache::Dense { input: x2 }))
        }
        Layer::Conv2d {
            kernels,
            stride,
            padding,
        } => {
            let y = conv_forward(x, kernels, *stride, *padding)?;
            Ok((y, LayerCache::Conv2d { input: x.clone() }))
        }
        Layer::TdBN(bn) => {
            let (x5, reshaped) = to_bn_shape(x)?;
            let (y5, cache) = tdbn_forward(bn, &x5, training)?;
            let y = if reshaped { y5.reshape(x.shape())? } else { y5 };
            Ok((
                y.clone(),
                LayerCache::TdBN {
                    cache,
                    reshaped,
                    out_shape: y.shape().to_vec(),
                },
            ))
        }
        Layer::SpikingActivation(params) => spiking_forward(*params, index, x, mode, tape),
        Layer::AvgPool { window } => {
            let y = avgpool_forward(x, *window)?;
            Ok((
                y,
                LayerCache::AvgPool {
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
        Layer::Flatten => {
            let shape = x.shape();
            let (t, b) = (shape[0], shape[1]);
            let features: usize = shape[2..].iter().product();
            Ok((
                x.reshape(&[t, b, features])?,
                LayerCache::Flatten {
                    in_shape: shape.to_vec(),
                },
            ))
        }
        Layer::OutputHead => {
            let y = head_forward(x)?;
            Ok((
                y,
                LayerCache::OutputHead {
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
    }
}

/// Stateless inference traversal of one layer (no caches, no stat updates).
fn layer_infer(
    layer: &Layer,
    index: usize,
    x: &Tensor,
    tape: Option<&mut MembraneTape>,
) -> Result<Tensor> {
    match layer {
        Layer::Dense { weight, bias } => {
            let (t, b) = (x.shape()[0], x.shape()[1]);
            let x2 = merge_tb(x, 1)?;
            let y2 = dense_forward(&x2, weight, bias)?;
            y2.reshape(&[t, b, weight.shape()[0]])
        }
        Layer::Conv2d {
            kernels,
            stride,
            padding,
        } => conv_forward(x, kernels, *stride, *padding),
        Layer::TdBN(bn) => {
            let (x5, reshaped) = to_bn_shape(x)?;
            let y5 = tdbn_infer(bn, &x5)?;
            if reshaped {
                y5.reshape(x.shape())
            } else {
                Ok(y5)
            }
        }
        Layer::SpikingActivation(params) => {
            let (y, _) = spiking_forward(*params, index, x, ActivationMode::Spiking, tape)?;
            Ok(y)
        }
        Layer::AvgPool { window } => avgpool_forward(x, *window),
        Layer::Flatten => {
            let shape = x.shape();
            let features: usize = shape[2..].iter().product();
            x.reshape(&[shape[0], shape[1], features])
        }
        Layer::OutputHead => head_forward(x),
    }
}

fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    dy: &Tensor,
    mode: ActivationMode,
    timesteps: usize,
    rmp: Option<(&RmpInjection<'_>, usize)>,
) -> Result<(Tensor, LayerGrads)> {
    match (layer, cache) {
        (Layer::Dense { weight, .. }, LayerCache::Dense { input }) => {
            let shape = dy.shape().to_vec();
            let dy2 = merge_tb(dy, 1)?;
            let dweight = dy2.matmul_tn(input)?;
            let mut dbias = Tensor::zeros(&[weight.shape()[0]])?;
            let out_f = weight.shape()[0];
            for row in dy2.data().chunks(out_f) {
                for (acc, &v) in dbias.data_mut().iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let dx2 = dy2.matmul(weight)?;
            let mut in_shape = vec![shape[0], shape[1]];
            in_shape.push(weight.shape()[1]);
            Ok((
                dx2.reshape(&in_shape)?,
                LayerGrads::Dense { dweight, dbias },
            ))
        }
        (
            Layer::Conv2d {
                kernels,
                stride,
                padding,
            },
            LayerCache::Conv2d { input },
        ) => {
            let (dx, dkernels) = conv_backward(input, kernels, *stride, *padding, dy)?;
            Ok((dx, LayerGrads::Conv2d { dkernels }))
        }
        (Layer::TdBN(bn), LayerCache::TdBN { cache, reshaped, out_shape }) => {
            if dy.shape() != &out_shape[..] {
                return Err(Error::Shape(format!(
                    "normalizer upstream gradient {:?} does not match output {:?}",
                    dy.shape(),
                    out_shape
                )));
            }
            let dy5 = if *reshaped {
                let s = dy.shape();
                dy.reshape(&[s[0], s[1], s[2], 1, 1])?
            } else {
                dy.clone()
            };
            let (dx5, dgamma, dbeta) = tdbn_backward(bn, cache, &dy5)?;
            let dx = if *reshaped {
                dx5.reshape(&out_shape[..])?
            } else {
                dx5
            };
            Ok((dx, LayerGrads::TdBN { dgamma, dbeta }))
        }
        (Layer::SpikingActivation(params), LayerCache::Spiking { u_pre, spikes }) => {
            let dx = spiking_backward(*params, u_pre, spikes, dy, mode, timesteps, rmp)?;
            Ok((dx, LayerGrads::None))
        }
        (Layer::AvgPool { window }, LayerCache::AvgPool { in_shape }) => {
            Ok((avgpool_backward(dy, *window, in_shape)?, LayerGrads::None))
        }
        (Layer::Flatten, LayerCache::Flatten { in_shape }) => {
            Ok((dy.reshape(in_shape)?, LayerGrads::None))
        }
        (Layer::OutputHead, LayerCache::OutputHead { in_shape }) => {
            // The head sums over time, so the logits gradient flows to every
            // timestep unchanged.
            let per: usize = in_shape[1..].iter().product();
            if dy.len() != per {
                return Err(Error::Shape(format!(
                    "logit gradient has {} elements, head input timestep has {per}",
                    dy.len()
                )));
            }
            let mut data = Vec::with_capacity(in_shape.iter().product());
            for _ in 0..in_shape[0] {
                data.extend_from_slice(dy.data());
            }
            Ok((Tensor::from_vec(in_shape, data)?, LayerGrads::None))
        }
        _ => Err(Error::Usage(
            "layer cache does not match layer; backward called with a stale pass".into(),
        )),
    }
}

fn dense_forward(x2: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut y2 = x2.matmul_nt(weight)?;
    let out_f = weight.shape()[0];
    for row in y2.data_mut().chunks_mut(out_f) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y2)
}

fn head_forward(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "output head expects [T, B, classes], got {shape:?}"
        )));
    }
    let (t_count, b, classes) = (shape[0], shape[1], shape[2]);
    let per = b * classes;
    let mut logits = vec![0.0; per];
    for t in 0..t_count {
        for (acc, &v) in logits.iter_mut().zip(&x.data()[t * per..(t + 1) * per]) {
            *acc += v;
        }
    }
    Tensor::from_vec(&[b, classes], logits)
}

fn to_bn_shape(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.shape() {
        [t, b, f] => Ok((x.reshape(&[*t, *b, *f, 1, 1])?, true)),
        [_, _, _, _, _] => Ok((x.clone(), false)),
        other => Err(Error::Shape(format!(
            "normalization expects [T, B, F] or [T, B, C, H, W], got {other:?}"
        ))),
    }
}

fn spiking_forward(
    params: NeuronParams,
    index: usize,
    x: &Tensor,
    mode: ActivationMode,
    mut tape: Option<&mut MembraneTape>,
) -> Result<(Tensor, LayerCache)> {
    let steps = split_time(x)?;
    // Membrane state starts at zero for every forward pass.
    let mut u = Tensor::zeros_like(&steps[0]);
    let mut u_pre_list = Vec::with_capacity(steps.len());
    let mut spikes_list = Vec::with_capacity(steps.len());
    let mut outputs = Vec::with_capacity(steps.len());
    for (t, x_t) in steps.iter().enumerate() {
        let step = match mode {
            ActivationMode::Spiking => lif_step(&u, x_t, &params)?,
            ActivationMode::Relaxed => lif_step_relaxed(&u, x_t, &params)?,
        };
        if mode == ActivationMode::Spiking {
            debug_assert!(
                step.spikes.data().iter().all(|&s| s == 0.0 || s == 1.0),
                "spiking layer emitted a non-binary value"
            );
        }
        if let Some(tape) = tape.as_deref_mut() {
            tape.push(index, t, step.u_pre.clone());
        }
        u = step.u_post;
        u_pre_list.push(step.u_pre);
        outputs.push(step.spikes.clone());
        spikes_list.push(step.spikes);
    }
    Ok((
        stack_time(&outputs)?,
        LayerCache::Spiking {
            u_pre: u_pre_list,
            spikes: spikes_list,
        },
    ))
}

fn spiking_backward(
    params: NeuronParams,
    u_pre: &[Tensor],
    spikes: &[Tensor],
    dy: &Tensor,
    mode: ActivationMode,
    timesteps: usize,
    rmp: Option<(&RmpInjection<'_>, usize)>,
) -> Result<Tensor> {
    let d_steps = split_time(dy)?;
    if d_steps.len() != timesteps || u_pre.len() != timesteps {
        return Err(Error::Shape(format!(
            "spiking backward saw {} gradient steps for {} cached timesteps",
            d_steps.len(),
            u_pre.len()
        )));
    }
    let mut dx_steps: Vec<Tensor> = vec![Tensor::zeros_like(&d_steps[0]); timesteps];
    // Gradient flowing into the post-reset membrane from timestep t+1.
    let mut du_post = Tensor::zeros_like(&d_steps[0]);
    for t in (0..timesteps).rev() {
        let n = d_steps[t].len();
        let mut du_pre = vec![0.0; n];
        let do_t = d_steps[t].data();
        let u_t = u_pre[t].data();
        let o_t = spikes[t].data();
        let inj = rmp
            .as_ref()
            .map(|(inj, base)| (&inj.grads[base + t], inj.lambda));
        for i in 0..n {
            let sg = surrogate_grad(u_t[i]);
            // Spike path: hard step differentiated as the smoothed function.
            let mut g = do_t[i] * sg;
            // Membrane carry path through the reset product u * (1 - o).
            g += match mode {
                // Reset gate held constant.
                ActivationMode::Spiking => du_post.data()[i] * (1.0 - o_t[i]),
                // Fully differentiable relaxed dynamics: the gate itself
                // depends on the membrane.
                ActivationMode::Relaxed => {
                    du_post.data()[i] * ((1.0 - o_t[i]) - u_t[i] * sg)
                }
            };
            if let Some((g_rmp, lambda)) = &inj {
                g += lambda * g_rmp.data()[i];
            }
            du_pre[i] = g;
        }
        let du_pre = Tensor::from_vec(d_steps[t].shape(), du_pre)?;
        // Input receives the membrane gradient directly; the previous
        // timestep receives it through the leak.
        du_post = du_pre.scale(params.tau);
        dx_steps[t] = du_pre;
    }
    stack_time(&dx_steps)
}

fn conv_forward(x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::Shape(format!(
            "conv expects [T, B, C, H, W], got {xs:?}"
        )));
    }
    let (t, b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let ks = kernels.shape();
    let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if cin != kcin {
        return Err(Error::Shape(format!(
            "conv kernels expect {kcin} input channels, activations have {cin}"
        )));
    }
    let ho = conv_out(h, kh, stride, padding)
        .ok_or_else(|| Error::Shape(format!("conv window {kh} exceeds padded height {h}")))?;
    let wo = conv_out(w, kw, stride, padding)
        .ok_or_else(|| Error::Shape(format!("conv window {kw} exceeds padded width {w}")))?;

    let n = t * b;
    let mut out = vec![0.0; n * cout * ho * wo];
    let xd = x.data();
    let kd = kernels.data();
    for img in 0..n {
        let x_base = img * cin * h * w;
        let y_base = img * cout * ho * wo;
        for co in 0..cout {
            let k_base = co * cin * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        let xc = x_base + ci * h * w;
                        let kc = k_base + ci * kh * kw;
                        for i in 0..kh {
                            let hy = (oh * stride + i) as isize - padding as isize;
                            if hy < 0 || hy >= h as isize {
                                continue;
                            }
                            let row = xc + hy as usize * w;
                            let krow = kc + i * kw;
                            for j in 0..kw {
                                let wx = (ow * stride + j) as isize - padding as isize;
                                if wx < 0 || wx >= w as isize {
                                    continue;
                                }
                                acc += xd[row + wx as usize] * kd[krow + j];
                            }
                        }
                    }
                    out[y_base + co * ho * wo + oh * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[t, b, cout, ho, wo], out)
}

fn conv_backward(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let xs = x.shape();
    let (t, b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let ks = kernels.shape();
    let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let ys = dy.shape();
    let (ho, wo) = (ys[3], ys[4]);

    let n = t * b;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernels.len()];
    let xd = x.data();
    let kd = kernels.data();
    let dyd = dy.data();
    for img in 0..n {
        let x_base = img * cin * h * w;
        let y_base = img * cout * ho * wo;
        for co in 0..cout {
            let k_base = co * cin * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dyd[y_base + co * ho * wo + oh * wo + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let xc = x_base + ci * h * w;
                        let kc = k_base + ci * kh * kw;
                        for i in 0..kh {
                            let hy = (oh * stride + i) as isize - padding as isize;
                            if hy < 0 || hy >= h as isize {
                                continue;
                            }
                            let row = xc + hy as usize * w;
                            let krow = kc + i * kw;
                            for j in 0..kw {
                                let wx = (ow * stride + j) as isize - padding as isize;
                                if wx < 0 || wx >= w as isize {
                                    continue;
                                }
                                dk[krow + j] += g * xd[row + wx as usize];
                                dx[row + wx as usize] += g * kd[krow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[t, b, cin, h, w], dx)?,
        Tensor::from_vec(&[cout, cin, kh, kw], dk)?,
    ))
}

fn avgpool_forward(x: &Tensor, window: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::Shape(format!(
            "pooling expects [T, B, C, H, W], got {xs:?}"
        )));
    }
    let (t, b, c, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "pool window {window} does not tile {h}x{w}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; t * b * c * ho * wo];
    let xd = x.data();
    for plane in 0..t * b * c {
        let x_base = plane * h * w;
        let y_base = plane * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for i in 0..window {
                    let row = x_base + (oh * window + i) * w + ow * window;
                    for j in 0..window {
                        acc += xd[row + j];
                    }
                }
                out[y_base + oh * wo + ow] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[t, b, c, ho, wo], out)
}

fn avgpool_backward(dy: &Tensor, window: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (h, w) = (in_shape[3], in_shape[4]);
    let (ho, wo) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let planes: usize = in_shape[..3].iter().product();
    let mut dx = vec![0.0; in_shape.iter().product()];
    let dyd = dy.data();
    for plane in 0..planes {
        let y_base = plane * ho * wo;
        let x_base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dyd[y_base + oh * wo + ow] * inv;
                for i in 0..window {
                    let row = x_base + (oh * window + i) * w + ow * window;
                    for j in 0..window {
                        dx[row + j] += g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx)
}

/// Momentum buffers and schedule constants for plain SGD.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub base_lr: f64,
    pub momentum: f64,
    pub total_epochs: usize,
    /// One velocity buffer per parameter tensor, in canonical layer order.
    pub velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(net: &Network, base_lr: f64, momentum: f64, total_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::Param(format!(
                "base learning rate must be positive, got {base_lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::Param("total_epochs must be at least 1".into()));
        }
        let mut velocity = Vec::new();
        for layer in &net.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    velocity.push(vec![0.0; weight.len()]);
                    velocity.push(vec![0.0; bias.len()]);
                }
                Layer::Conv2d { kernels, .. } => velocity.push(vec![0.0; kernels.len()]),
                Layer::TdBN(bn) => {
                    velocity.push(vec![0.0; bn.gamma.len()]);
                    velocity.push(vec![0.0; bn.beta.len()]);
                }
                _ => {}
            }
        }
        Ok(OptimState {
            base_lr,
            momentum,
            total_epochs,
            velocity,
        })
    }
}

/// Cosine-decayed learning rate: full at epoch 0, half at the midpoint, zero
/// at epoch `total`.
pub fn learning_rate(base_lr: f64, epoch: usize, total: usize) -> f64 {
    base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

/// One SGD-with-momentum update: `v = mu v + g`, `w = w - eta(n) v`.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    opt: &mut OptimState,
    epoch: usize,
) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            net.layers.len()
        )));
    }
    if epoch > opt.total_epochs {
        return Err(Error::Param(format!(
            "epoch {epoch} is outside the schedule range [0, {}]",
            opt.total_epochs
        )));
    }
    let eta = learning_rate(opt.base_lr, epoch, opt.total_epochs);
    let mu = opt.momentum;
    let mut slot = 0usize;
    let mut apply = |param: &mut [f64], grad: &[f64], velocity: &mut Vec<Vec<f64>>| -> Result<()> {
        let v = velocity.get_mut(slot).ok_or_else(|| {
            Error::Usage("optimizer state does not match the network".into())
        })?;
        if v.len() != param.len() || grad.len() != param.len() {
            return Err(Error::Shape(
                "gradient or velocity size does not match its parameter".into(),
            ));
        }
        for i in 0..param.len() {
            v[i] = mu * v[i] + grad[i];
            param[i] -= eta * v[i];
        }
        slot += 1;
        Ok(())
    };
    for (layer, lg) in net.layers.iter_mut().zip(&grads.layers) {
        match (layer, lg) {
            (Layer::Dense { weight, bias }, LayerGrads::Dense { dweight, dbias }) => {
                apply(weight.data_mut(), dweight.data(), &mut opt.velocity)?;
                apply(bias.data_mut(), dbias.data(), &mut opt.velocity)?;
            }
            (Layer::Conv2d { kernels, .. }, LayerGrads::Conv2d { dkernels }) => {
                apply(kernels.data_mut(), dkernels.data(), &mut opt.velocity)?;
            }
            (Layer::TdBN(bn), LayerGrads::TdBN { dgamma, dbeta }) => {
                apply(&mut bn.gamma, dgamma, &mut opt.velocity)?;
                apply(&mut bn.beta, dbeta, &mut opt.velocity)?;
            }
            (Layer::SpikingActivation(_), LayerGrads::None)
            | (Layer::AvgPool { .. }, LayerGrads::None)
            | (Layer::Flatten, LayerGrads::None)
            | (Layer::OutputHead, LayerGrads::None) => {}
            _ => {
                return Err(Error::Usage(
                    "gradient entry does not match its layer".into(),
                ))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform;

    fn identity_dense(n: usize) -> Layer {
        let mut w = Tensor::zeros(&[n, n]).unwrap();
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Layer::Dense {
            weight: w,
            bias: Tensor::zeros(&[n]).unwrap(),
        }
    }

    #[test]
    fn head_accumulates_identity_dense_over_time() {
        let net = Network::new(vec![identity_dense(2), Layer::OutputHead], 2).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let (logits, tape) = net.forward_infer(&x, true).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
        assert_eq!(logits.data(), &[2.0, 4.0]);
        assert!(tape.records.is_empty(), "no spiking layer, no records");
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let net = Network::new(vec![identity_dense(3), Layer::OutputHead], 4).unwrap();
        let x = Tensor::zeros(&[2, 3]).unwrap();
        let (logits, _) = net.forward_infer(&x, false).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_requires_trailing_unique_head() {
        assert!(Network::new(vec![identity_dense(2)], 2).is_err());
        assert!(Network::new(vec![Layer::OutputHead, identity_dense(2)], 2).is_err());
        assert!(
            Network::new(vec![Layer::OutputHead, Layer::OutputHead], 2).is_err()
        );
    }

    #[test]
    fn tape_covers_each_spiking_layer_at_every_timestep() {
        let mut rng = SeededRng::new(3);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 3,
        };
        let mut net = Network::mlp_s(5, 4, &bp, &mut rng).unwrap();
        let x = uniform(&mut rng, &[2, 5], -1.0, 1.0).unwrap();
        let pass = net.forward_train(&x, true, ActivationMode::Spiking).unwrap();
        assert_eq!(pass.tape.records.len(), 3);
        for (t, rec) in pass.tape.records.iter().enumerate() {
            assert_eq!(rec.layer_index, 2);
            assert_eq!(rec.timestep, t);
            assert_eq!(rec.u_pre.shape(), &[2, 128]);
        }
        // Recording off: same logits, empty tape.
        let mut net2 = net.clone();
        let pass2 = net2.forward_train(&x, false, ActivationMode::Spiking);
        assert!(pass2.unwrap().tape.records.is_empty());
    }

    #[test]
    fn spiking_outputs_are_binary() {
        let mut rng = SeededRng::new(4);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 4,
        };
        let mut net = Network::mlp_s(6, 3, &bp, &mut rng).unwrap();
        // Probe the spike outputs through a recording pass: u_pre that is at
        // or above threshold must coincide with unit spikes downstream.
        let x = uniform(&mut rng, &[3, 6], -2.0, 2.0).unwrap();
        let pass = net.forward_train(&x, true, ActivationMode::Spiking).unwrap();
        for rec in &pass.tape.records {
            for &u in rec.u_pre.data() {
                assert!(u.is_finite());
            }
        }
        pass.logits.assert_finite("logits").unwrap();
    }

    #[test]
    fn check_shapes_validates_mlp_and_rejects_mismatches() {
        let mut rng = SeededRng::new(5);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let net = Network::mlp_s(8, 4, &bp, &mut rng).unwrap();
        let shapes = net.check_shapes(&[8], 4).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![4]);
        assert!(net.check_shapes(&[9], 4).is_err());
        assert!(net.check_shapes(&[8], 5).is_err());
    }

    #[test]
    fn build_flattens_images_for_mlp() {
        let mut rng = SeededRng::new(6);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let net = Network::build("mlp-s", &[1, 4, 4], 3, &bp, &mut rng).unwrap();
        assert!(matches!(net.layers[0], Layer::Flatten));
        assert!(Network::build("nope", &[4], 3, &bp, &mut rng).is_err());
    }

    #[test]
    fn cnn_shapes_propagate() {
        let mut rng = SeededRng::new(7);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let net = Network::cnn_s(1, 8, 8, 5, &bp, &mut rng).unwrap();
        let shapes = net.check_shapes(&[1, 8, 8], 5).unwrap();
        assert_eq!(shapes[0], vec![16, 8, 8]);
        assert_eq!(shapes[3], vec![16, 4, 4]);
        assert_eq!(shapes[7], vec![32, 2, 2]);
        assert_eq!(shapes[8], vec![128]);
        assert_eq!(shapes.last().unwrap(), &vec![5]);
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        assert_eq!(learning_rate(0.01, 0, 400), 0.01);
        let mid = learning_rate(0.01, 200, 400);
        assert!((mid - 0.005).abs() < 1e-15);
        let end = learning_rate(0.01, 400, 400);
        assert!(end.abs() < 1e-17);
    }

    #[test]
    fn sgd_step_applies_momentum_and_schedule() {
        let mut net = Network::new(vec![identity_dense(2), Layer::OutputHead], 1).unwrap();
        let mut opt = OptimState::new(&net, 0.1, 0.9, 10).unwrap();
        let g = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let grads = Gradients {
            layers: vec![
                LayerGrads::Dense {
                    dweight: g.clone(),
                    dbias: Tensor::zeros(&[2]).unwrap(),
                },
                LayerGrads::None,
            ],
        };
        sgd_step(&mut net, &grads, &mut opt, 0).unwrap();
        let Layer::Dense { weight, .. } = &net.layers[0] else {
            unreachable!()
        };
        // eta(0) = 0.1; v = g; w = I - 0.1 I.
        assert!((weight.data()[0] - 0.9).abs() < 1e-15);
        // Second step: v = 0.9 * 1 + 1 = 1.9.
        sgd_step(&mut net, &grads, &mut opt, 0).unwrap();
        let Layer::Dense { weight, .. } = &net.layers[0] else {
            unreachable!()
        };
        assert!((weight.data()[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-12);
    }

    #[test]
    fn backward_with_zero_dlogits_and_no_injection_is_zero() {
        let mut rng = SeededRng::new(8);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let mut net = Network::mlp_s(4, 3, &bp, &mut rng).unwrap();
        let x = uniform(&mut rng, &[2, 4], -1.0, 1.0).unwrap();
        let pass = net.forward_train(&x, true, ActivationMode::Spiking).unwrap();
        let dlogits = Tensor::zeros(&[2, 3]).unwrap();
        let grads = net.backward(&pass, &dlogits, None).unwrap();
        for lg in &grads.layers {
            match lg {
                LayerGrads::Dense { dweight, dbias } => {
                    assert!(dweight.data().iter().all(|&v| v == 0.0));
                    assert!(dbias.data().iter().all(|&v| v == 0.0));
                }
                LayerGrads::TdBN { dgamma, dbeta } => {
                    assert!(dgamma.iter().all(|&v| v == 0.0));
                    assert!(dbeta.iter().all(|&v| v == 0.0));
                }
                LayerGrads::Conv2d { dkernels } => {
                    assert!(dkernels.data().iter().all(|&v| v == 0.0));
                }
                LayerGrads::None => {}
            }
        }
    }

    #[test]
    fn injection_scales_linearly_with_lambda() {
        let mut rng = SeededRng::new(9);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let mut net = Network::mlp_s(4, 3, &bp, &mut rng).unwrap();
        let x = uniform(&mut rng, &[2, 4], -1.0, 1.0).unwrap();
        let pass = net.forward_train(&x, true, ActivationMode::Spiking).unwrap();
        let rmp_grads = crate::loss::rmp_loss_grad(&pass.tape, 0.5, 2.0).unwrap();
        let dlogits = Tensor::zeros(&[2, 3]).unwrap();
        let g1 = net
            .backward(
                &pass,
                &dlogits,
                Some(RmpInjection {
                    grads: &rmp_grads,
                    lambda: 0.05,
                }),
            )
            .unwrap();
        let g2 = net
            .backward(
                &pass,
                &dlogits,
                Some(RmpInjection {
                    grads: &rmp_grads,
                    lambda: 0.10,
                }),
            )
            .unwrap();
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            if let (LayerGrads::Dense { dweight: w1, .. }, LayerGrads::Dense { dweight: w2, .. }) =
                (a, b)
            {
                for (x1, x2) in w1.data().iter().zip(w2.data()) {
                    assert!(
                        (2.0 * x1 - x2).abs() <= 1e-10 * x2.abs().max(1.0),
                        "doubling lambda must double the injected gradient: {x1} vs {x2}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_and_pool_agree_with_finite_differences() {
        // Relaxed end-to-end check of the conv stack alone: loss = sum(y^2)/2
        // over the conv output, gradients via conv_backward.
        let mut rng = SeededRng::new(10);
        let x = uniform(&mut rng, &[2, 2, 2, 4, 4], -1.0, 1.0).unwrap();
        let kernels = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5).unwrap();
        let y = conv_forward(&x, &kernels, 1, 1).unwrap();
        let (dx, dk) = conv_backward(&x, &kernels, 1, 1, &y).unwrap();
        let loss = |x: &Tensor, k: &Tensor| -> f64 {
            let y = conv_forward(x, k, 1, 1).unwrap();
            y.data().iter().map(|&v| v * v).sum::<f64>() / 2.0
        };
        let h = 1e-5;
        for i in (0..x.len()).step_by(17) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &kernels) - loss(&xm, &kernels)) / (2.0 * h);
            let rel = (dx.data()[i] - fd).abs() / (dx.data()[i].abs() + fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "dx[{i}]: {} vs {fd}", dx.data()[i]);
        }
        for i in (0..kernels.len()).step_by(5) {
            let mut kp = kernels.clone();
            kp.data_mut()[i] += h;
            let mut km = kernels.clone();
            km.data_mut()[i] -= h;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
            let rel = (dk.data()[i] - fd).abs() / (dk.data()[i].abs() + fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "dk[{i}]: {} vs {fd}", dk.data()[i]);
        }
        // Pooling: gradient of sum(pool(x)) spreads 1/window^2 to every cell.
        let p = avgpool_forward(&x, 2).unwrap();
        let ones = Tensor::new(p.shape(), 1.0).unwrap();
        let dxp = avgpool_backward(&ones, 2, x.shape()).unwrap();
        assert!(dxp.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn optimizer_velocity_layout_matches_parameters() {
        let mut rng = SeededRng::new(11);
        let bp = BuildParams {
            neuron: NeuronParams::default(),
            alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            timesteps: 2,
        };
        let net = Network::cnn_s(1, 4, 4, 3, &bp, &mut rng).unwrap();
        let opt = OptimState::new(&net, 0.01, 0.9, 10).unwrap();
        // conv(1) + bn(2) + conv(1) + bn(2) + dense(2) buffers.
        assert_eq!(opt.velocity.len(), 8);
    }
}
