//! Model state and the forward/backward executor.
//!
//! A [`Model`] couples a [`NetworkSpec`] with its parameter tensors. The
//! executor walks the layer graph in declaration order, keeping a tape of
//! activations when a backward pass will follow. Evaluation takes `&self`
//! and is safe to call concurrently; only train-mode passes (which fold
//! batch statistics into the batchnorm running stats) take `&mut self`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::batchnorm::{self, BnCtx};
use crate::dropconnect::{DcScaleMode, MaskSet};
use crate::error::{Error, Result};
use crate::layers::{self, ConvGeometry};
use crate::net::{LayerId, LayerKind, NetworkSpec, SourceRef};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv {
        /// [out_ch, in_ch / groups, k, k]
        weights: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Fc {
        /// [out_features, in_features]
        weights: Tensor,
        bias: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: BTreeMap<LayerId, LayerParams>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Replacement weights and output scales used when simulating deployment
/// (quantized or fault-degraded convolution kernels, host-side rescale).
#[derive(Default)]
pub struct EvalOverrides<'a> {
    /// Per-layer weights to use instead of the checkpoint values.
    pub weights: Option<&'a BTreeMap<LayerId, Tensor>>,
    /// Multiplicative correction applied to a conv layer's output.
    pub post_scale: Option<&'a BTreeMap<LayerId, f64>>,
}

enum TapeCtx {
    Conv {
        eff_weights: Tensor,
        /// d(effective)/d(raw) per weight; `None` means identity.
        weight_chain: Option<Tensor>,
    },
    Bn {
        ctx: BnCtx,
        input_scale: f64,
    },
    Relu,
    Pool {
        kernel: usize,
        stride: usize,
    },
    Fc,
    Residual,
    Loss {
        probs: Tensor,
    },
    /// Placeholder when the pass is not recorded or the layer was skipped.
    None,
}

struct TapeEntry {
    out: Tensor,
    ctx: TapeCtx,
}

/// Result of a recorded forward pass; feed to [`Model::backward`].
pub struct Forward {
    tape: Vec<TapeEntry>,
    input: Tensor,
    labels: Option<Vec<usize>>,
    pub logits: Tensor,
    pub loss: Option<f64>,
}

struct PassOptions<'a> {
    bn_train: bool,
    record: bool,
    dc: Option<&'a MaskSet>,
    weight_overrides: Option<&'a BTreeMap<LayerId, Tensor>>,
    post_scale: Option<&'a BTreeMap<LayerId, f64>>,
}

impl Model {
    /// Fresh parameters for `spec`, deterministically seeded. Convolution and
    /// classifier weights use Kaiming-style fan-in scaling.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Model> {
        spec.infer_shapes()?;
        let mut params = BTreeMap::new();
        for layer in &spec.layers {
            match layer.kind {
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    groups,
                    ..
                } => {
                    let fan_in = (in_ch / groups) * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let shape = [out_ch, in_ch / groups, kernel, kernel];
                    let mut rng = rng::stream(seed, &[0x696e_6974, layer.id as u64]);
                    let mut weights = Tensor::zeros(&shape);
                    for v in weights.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                    params.insert(layer.id, LayerParams::Conv { weights });
                }
                LayerKind::BatchNorm { channels } => {
                    params.insert(
                        layer.id,
                        LayerParams::BatchNorm {
                            gamma: Tensor::full(&[channels], 1.0),
                            beta: Tensor::zeros(&[channels]),
                            running_mean: Tensor::zeros(&[channels]),
                            running_var: Tensor::full(&[channels], 1.0),
                        },
                    );
                }
                LayerKind::Fc {
                    in_features,
                    out_features,
                } => {
                    let bound = 1.0 / (in_features as f64).sqrt();
                    let mut rng = rng::stream(seed, &[0x696e_6974, layer.id as u64]);
                    let mut weights = Tensor::zeros(&[out_features, in_features]);
                    for v in weights.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                    params.insert(
                        layer.id,
                        LayerParams::Fc {
                            weights,
                            bias: Tensor::zeros(&[out_features]),
                        },
                    );
                }
                LayerKind::Relu
                | LayerKind::AvgPool { .. }
                | LayerKind::ResidualAdd
                | LayerKind::SoftmaxXent { .. } => {}
            }
        }
        Ok(Model {
            spec,
            params,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        })
    }

    fn conv_geometry(kind: &LayerKind) -> ConvGeometry {
        match *kind {
            LayerKind::Conv2d {
                stride,
                padding,
                groups,
                ..
            } => ConvGeometry {
                stride,
                padding,
                groups,
            },
            _ => unreachable!("conv geometry of a non-conv layer"),
        }
    }

    fn layer_positions(&self) -> HashMap<LayerId, usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .map(|(pos, l)| (l.id, pos))
            .collect()
    }

    /// Core graph walk. Pure: batch statistics are returned, not applied.
    fn run(
        &self,
        input: &Tensor,
        labels: Option<&[usize]>,
        opts: &PassOptions,
    ) -> Result<(Vec<TapeEntry>, Option<f64>, Vec<(LayerId, batchnorm::BnBatchStats)>)> {
        if input.shape().len() != 4
            || input.shape()[1..] != [self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]]
        {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                detail: format!(
                    "batch shape {:?} does not match network input {:?}",
                    input.shape(),
                    self.spec.input_shape
                ),
            });
        }
        input.check_finite("network input")?;

        let pos_of = self.layer_positions();
        let mut tape: Vec<TapeEntry> = Vec::with_capacity(self.spec.layers.len());
        let mut loss = None;
        let mut bn_stats = Vec::new();

        for layer in &self.spec.layers {
            let src = |r: &SourceRef| -> &Tensor {
                match r {
                    SourceRef::Input => input,
                    SourceRef::Layer(id) => &tape[pos_of[id]].out,
                }
            };
            let wrap_id = |e: Error| match e {
                Error::ShapeMismatch { detail, .. } => Error::ShapeMismatch {
                    layer: format!("layer {} ({})", layer.id, layer.kind.name()),
                    detail,
                },
                other => other,
            };

            let (out, ctx) = match &layer.kind {
                LayerKind::Conv2d { .. } => {
                    let geom = Self::conv_geometry(&layer.kind);
                    let base = match opts.weight_overrides.and_then(|m| m.get(&layer.id)) {
                        Some(w) => w,
                        None => match self.params.get(&layer.id) {
                            Some(LayerParams::Conv { weights }) => weights,
                            _ => {
                                return Err(Error::InvalidSpec(format!(
                                    "missing conv parameters for layer {}",
                                    layer.id
                                )))
                            }
                        },
                    };
                    let mask = opts.dc.and_then(|dc| dc.masks.get(&layer.id));
                    let (eff_owned, chain) = match mask {
                        Some(mask) => {
                            let scale = match opts.dc.unwrap().scale_mode {
                                DcScaleMode::ConvOutput => opts.dc.unwrap().scale,
                                DcScaleMode::BnInput => 1.0,
                            };
                            if mask.values.shape() != base.shape() {
                                return Err(Error::InvalidConfig(format!(
                                    "mask shape {:?} does not match weights {:?} of layer {}",
                                    mask.values.shape(),
                                    base.shape(),
                                    layer.id
                                )));
                            }
                            let mut eff = base.clone();
                            eff.clear_grad();
                            let mut chain = mask.values.clone();
                            for (e, m) in eff.data_mut().iter_mut().zip(mask.values.data()) {
                                *e *= m * scale;
                            }
                            for c in chain.data_mut() {
                                *c *= scale;
                            }
                            (Some(eff), Some(chain))
                        }
                        None => (None, None),
                    };
                    let used = eff_owned.as_ref().unwrap_or(base);
                    let mut out =
                        layers::conv2d_forward(src(&layer.inputs[0]), used, &geom).map_err(wrap_id)?;
                    if let Some(scale) = opts.post_scale.and_then(|m| m.get(&layer.id)) {
                        for v in out.data_mut() {
                            *v *= scale;
                        }
                    }
                    let ctx = if opts.record {
                        TapeCtx::Conv {
                            eff_weights: eff_owned.unwrap_or_else(|| base.clone()),
                            weight_chain: chain,
                        }
                    } else {
                        TapeCtx::None
                    };
                    (out, ctx)
                }
                LayerKind::BatchNorm { .. } => {
                    let Some(LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::InvalidSpec(format!(
                            "missing batchnorm parameters for layer {}",
                            layer.id
                        )));
                    };
                    // Under BnInput scaling, the rescale of a masked conv is
                    // applied here rather than at the conv output.
                    let input_scale = match opts.dc {
                        Some(dc) if dc.scale_mode == DcScaleMode::BnInput => {
                            match layer.inputs[0] {
                                SourceRef::Layer(id) if dc.masks.contains_key(&id) => dc.scale,
                                _ => 1.0,
                            }
                        }
                        _ => 1.0,
                    };
                    let raw = src(&layer.inputs[0]);
                    let scaled_holder;
                    let bn_in = if input_scale != 1.0 {
                        let mut s = raw.clone();
                        s.clear_grad();
                        for v in s.data_mut() {
                            *v *= input_scale;
                        }
                        scaled_holder = s;
                        &scaled_holder
                    } else {
                        raw
                    };
                    if opts.bn_train {
                        let (out, ctx, stats) =
                            batchnorm::batchnorm_train(bn_in, gamma, beta, self.bn_eps)
                                .map_err(wrap_id)?;
                        bn_stats.push((layer.id, stats));
                        (out, if opts.record { TapeCtx::Bn { ctx, input_scale } } else { TapeCtx::None })
                    } else {
                        let (out, ctx) = batchnorm::batchnorm_eval(
                            bn_in,
                            gamma,
                            beta,
                            running_mean.data(),
                            running_var.data(),
                            self.bn_eps,
                        )
                        .map_err(wrap_id)?;
                        (out, if opts.record { TapeCtx::Bn { ctx, input_scale } } else { TapeCtx::None })
                    }
                }
                LayerKind::Relu => (
                    layers::relu_forward(src(&layer.inputs[0])),
                    if opts.record { TapeCtx::Relu } else { TapeCtx::None },
                ),
                LayerKind::AvgPool { kernel, stride } => (
                    layers::avgpool_forward(src(&layer.inputs[0]), *kernel, *stride)
                        .map_err(wrap_id)?,
                    if opts.record {
                        TapeCtx::Pool {
                            kernel: *kernel,
                            stride: *stride,
                        }
                    } else {
                        TapeCtx::None
                    },
                ),
                LayerKind::Fc { .. } => {
                    let Some(LayerParams::Fc { weights, bias }) = self.params.get(&layer.id) else {
                        return Err(Error::InvalidSpec(format!(
                            "missing fc parameters for layer {}",
                            layer.id
                        )));
                    };
                    (
                        layers::fc_forward(src(&layer.inputs[0]), weights, bias).map_err(wrap_id)?,
                        if opts.record { TapeCtx::Fc } else { TapeCtx::None },
                    )
                }
                LayerKind::ResidualAdd => (
                    layers::residual_add(src(&layer.inputs[0]), src(&layer.inputs[1]))
                        .map_err(wrap_id)?,
                    if opts.record { TapeCtx::Residual } else { TapeCtx::None },
                ),
                LayerKind::SoftmaxXent { .. } => match labels {
                    Some(labels) => {
                        let (l, probs) =
                            layers::softmax_xent_forward(src(&layer.inputs[0]), labels)
                                .map_err(wrap_id)?;
                        loss = Some(l);
                        (
                            Tensor::scalar(l),
                            if opts.record { TapeCtx::Loss { probs } } else { TapeCtx::None },
                        )
                    }
                    // Inference stops at the logits; the loss layer is inert.
                    None => (Tensor::scalar(0.0), TapeCtx::None),
                },
            };
            out.check_finite(&format!("layer {} ({}) output", layer.id, layer.kind.name()))?;
            tape.push(TapeEntry { out, ctx });
        }
        Ok((tape, loss, bn_stats))
    }

    fn logits_from_tape(&self, tape: &[TapeEntry]) -> Tensor {
        let pos_of = self.layer_positions();
        tape[pos_of[&self.spec.logits_layer()]].out.clone()
    }

    /// Eval-mode inference. Read-only on model state; returns logits [N, classes].
    pub fn forward_eval(&self, input: &Tensor, overrides: &EvalOverrides) -> Result<Tensor> {
        let opts = PassOptions {
            bn_train: false,
            record: false,
            dc: None,
            weight_overrides: overrides.weights,
            post_scale: overrides.post_scale,
        };
        let (tape, _, _) = self.run(input, None, &opts)?;
        Ok(self.logits_from_tape(&tape))
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, input: &Tensor, overrides: &EvalOverrides) -> Result<Vec<usize>> {
        Ok(layers::argmax_rows(&self.forward_eval(input, overrides)?))
    }

    /// Recorded train-mode pass: batchnorm uses batch statistics and running
    /// stats are updated in place. Pass the iteration's masks for drop-connect.
    pub fn forward_train(
        &mut self,
        input: &Tensor,
        labels: &[usize],
        dc: Option<&MaskSet>,
    ) -> Result<Forward> {
        let opts = PassOptions {
            bn_train: true,
            record: true,
            dc,
            weight_overrides: None,
            post_scale: None,
        };
        let (tape, loss, bn_stats) = self.run(input, Some(labels), &opts)?;
        self.apply_bn_stats(bn_stats);
        Ok(Forward {
            logits: self.logits_from_tape(&tape),
            tape,
            input: input.clone(),
            labels: Some(labels.to_vec()),
            loss,
        })
    }

    /// Unrecorded train-mode pass used for statistics recalibration: updates
    /// batchnorm running stats from a forward executed with the given masks,
    /// touching nothing else.
    pub fn forward_calibrate(&mut self, input: &Tensor, dc: Option<&MaskSet>) -> Result<()> {
        let opts = PassOptions {
            bn_train: true,
            record: false,
            dc,
            weight_overrides: None,
            post_scale: None,
        };
        let (_, _, bn_stats) = self.run(input, None, &opts)?;
        self.apply_bn_stats(bn_stats);
        Ok(())
    }

    fn apply_bn_stats(&mut self, stats: Vec<(LayerId, batchnorm::BnBatchStats)>) {
        for (id, s) in stats {
            if let Some(LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            }) = self.params.get_mut(&id)
            {
                batchnorm::ema_update(running_mean.data_mut(), &s.mean, self.bn_momentum);
                batchnorm::ema_update(running_var.data_mut(), &s.var, self.bn_momentum);
            }
        }
    }

    /// Backward from the recorded loss; accumulates into parameter `grad` slots.
    pub fn backward(&mut self, fwd: &Forward) -> Result<()> {
        if fwd.loss.is_none() {
            return Err(Error::InvalidConfig(
                "backward requires a recorded forward pass with labels and a loss layer".into(),
            ));
        }
        self.backward_impl(fwd, None)
    }

    /// Backward from an explicit gradient on the logits instead of the loss
    /// layer (used by tests and by nets without a loss layer).
    pub fn backward_from(&mut self, fwd: &Forward, logit_grad: &Tensor) -> Result<()> {
        self.backward_impl(fwd, Some(logit_grad))
    }

    fn backward_impl(&mut self, fwd: &Forward, explicit: Option<&Tensor>) -> Result<()> {
        if fwd.tape.iter().all(|t| matches!(t.ctx, TapeCtx::None)) {
            return Err(Error::InvalidConfig(
                "backward before a recorded forward pass".into(),
            ));
        }
        let pos_of = self.layer_positions();
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();

        let start = match explicit {
            Some(g) => {
                let pos = pos_of[&self.spec.logits_layer()];
                if g.shape() != fwd.tape[pos].out.shape() {
                    return Err(Error::ShapeMismatch {
                        layer: "backward seed".into(),
                        detail: format!(
                            "gradient {:?} vs logits {:?}",
                            g.shape(),
                            fwd.tape[pos].out.shape()
                        ),
                    });
                }
                grads[pos] = Some(g.clone());
                pos
            }
            None => {
                let pos = n - 1;
                grads[pos] = Some(Tensor::scalar(1.0));
                pos
            }
        };

        fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                None => *slot = Some(g),
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }

        for pos in (0..=start).rev() {
            let Some(gout) = grads[pos].take() else {
                continue;
            };
            let layer = &self.spec.layers[pos];
            let src_tensor = |r: &SourceRef| -> &Tensor {
                match r {
                    SourceRef::Input => &fwd.input,
                    SourceRef::Layer(id) => &fwd.tape[pos_of[id]].out,
                }
            };
            let src_slot = |grads: &mut Vec<Option<Tensor>>, r: &SourceRef, g: Tensor| {
                if let SourceRef::Layer(id) = r {
                    add_into(&mut grads[pos_of[id]], g);
                }
            };

            match (&fwd.tape[pos].ctx, &layer.kind) {
                (
                    TapeCtx::Conv {
                        eff_weights,
                        weight_chain,
                    },
                    LayerKind::Conv2d { .. },
                ) => {
                    let geom = Self::conv_geometry(&layer.kind);
                    let (gi, gw_eff) = layers::conv2d_backward(
                        src_tensor(&layer.inputs[0]),
                        eff_weights,
                        &gout,
                        &geom,
                    )?;
                    let Some(LayerParams::Conv { weights }) = self.params.get_mut(&layer.id)
                    else {
                        unreachable!("conv params exist for executed layer");
                    };
                    let wgrad = weights.grad_mut();
                    match weight_chain {
                        Some(chain) => {
                            for ((slot, &g), &c) in
                                wgrad.iter_mut().zip(gw_eff.data()).zip(chain.data())
                            {
                                *slot += g * c;
                            }
                        }
                        None => {
                            for (slot, &g) in wgrad.iter_mut().zip(gw_eff.data()) {
                                *slot += g;
                            }
                        }
                    }
                    src_slot(&mut grads, &layer.inputs[0], gi);
                }
                (TapeCtx::Bn { ctx, input_scale }, LayerKind::BatchNorm { .. }) => {
                    let in_shape = src_tensor(&layer.inputs[0]).shape().to_vec();
                    let Some(LayerParams::BatchNorm { gamma, beta, .. }) =
                        self.params.get(&layer.id)
                    else {
                        unreachable!("bn params exist for executed layer");
                    };
                    let (mut gi, ggamma, gbeta) =
                        batchnorm::batchnorm_backward(ctx, &in_shape, gamma, &gout);
                    let _ = beta;
                    if *input_scale != 1.0 {
                        for v in gi.data_mut() {
                            *v *= input_scale;
                        }
                    }
                    let Some(LayerParams::BatchNorm { gamma, beta, .. }) =
                        self.params.get_mut(&layer.id)
                    else {
                        unreachable!();
                    };
                    for (slot, &g) in gamma.grad_mut().iter_mut().zip(ggamma.data()) {
                        *slot += g;
                    }
                    for (slot, &g) in beta.grad_mut().iter_mut().zip(gbeta.data()) {
                        *slot += g;
                    }
                    src_slot(&mut grads, &layer.inputs[0], gi);
                }
                (TapeCtx::Relu, LayerKind::Relu) => {
                    let gi = layers::relu_backward(src_tensor(&layer.inputs[0]), &gout);
                    src_slot(&mut grads, &layer.inputs[0], gi);
                }
                (TapeCtx::Pool { kernel, stride }, LayerKind::AvgPool { .. }) => {
                    let shape = src_tensor(&layer.inputs[0]).shape().to_vec();
                    let gi = layers::avgpool_backward(&shape, *kernel, *stride, &gout);
                    src_slot(&mut grads, &layer.inputs[0], gi);
                }
                (TapeCtx::Fc, LayerKind::Fc { .. }) => {
                    let Some(LayerParams::Fc { weights, .. }) = self.params.get(&layer.id) else {
                        unreachable!("fc params exist for executed layer");
                    };
                    let (gi, gw, gb) =
                        layers::fc_backward(src_tensor(&layer.inputs[0]), weights, &gout);
                    let Some(LayerParams::Fc { weights, bias }) = self.params.get_mut(&layer.id)
                    else {
                        unreachable!();
                    };
                    for (slot, &g) in weights.grad_mut().iter_mut().zip(gw.data()) {
                        *slot += g;
                    }
                    for (slot, &g) in bias.grad_mut().iter_mut().zip(gb.data()) {
                        *slot += g;
                    }
                    src_slot(&mut grads, &layer.inputs[0], gi);
                }
                (TapeCtx::Residual, LayerKind::ResidualAdd) => {
                    src_slot(&mut grads, &layer.inputs[0], gout.clone());
                    src_slot(&mut grads, &layer.inputs[1], gout);
                }
                (TapeCtx::Loss { probs }, LayerKind::SoftmaxXent { .. }) => {
                    let labels = fwd.labels.as_ref().expect("loss recorded with labels");
                    let mut g = layers::softmax_xent_backward(probs, labels);
                    let upstream = gout.data()[0];
                    if upstream != 1.0 {
                        for v in g.data_mut() {
                            *v *= upstream;
                        }
                    }
                    src_slot(&mut grads, &layer.inputs[0], g);
                }
                (TapeCtx::None, _) => {
                    return Err(Error::InvalidConfig(
                        "backward before a recorded forward pass".into(),
                    ));
                }
                _ => unreachable!("tape context matches layer kind"),
            }
        }

        for (name, t) in self.named_tensors() {
            if let Some(g) = t.grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            match p {
                LayerParams::Conv { weights } => weights.zero_grad(),
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    gamma.zero_grad();
                    beta.zero_grad();
                }
                LayerParams::Fc { weights, bias } => {
                    weights.zero_grad();
                    bias.zero_grad();
                }
            }
        }
    }

    /// All tensors, running statistics included, in canonical name order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (id, p) in &self.params {
            match p {
                LayerParams::Conv { weights } => {
                    out.push((format!("layer{id}.weight"), weights));
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{id}.gamma"), gamma));
                    out.push((format!("layer{id}.beta"), beta));
                    out.push((format!("layer{id}.running_mean"), running_mean));
                    out.push((format!("layer{id}.running_var"), running_var));
                }
                LayerParams::Fc { weights, bias } => {
                    out.push((format!("layer{id}.weight"), weights));
                    out.push((format!("layer{id}.bias"), bias));
                }
            }
        }
        out
    }

    /// Trainable tensors only (no running statistics).
    pub fn trainable_tensors(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.contains("running_"))
            .collect()
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (id, p) in self.params.iter_mut() {
            match p {
                LayerParams::Conv { weights } => out.push((format!("layer{id}.weight"), weights)),
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("layer{id}.gamma"), gamma));
                    out.push((format!("layer{id}.beta"), beta));
                }
                LayerParams::Fc { weights, bias } => {
                    out.push((format!("layer{id}.weight"), weights));
                    out.push((format!("layer{id}.bias"), bias));
                }
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer_part, field) = name.split_once('.')?;
        let id: LayerId = layer_part.strip_prefix("layer")?.parse().ok()?;
        match (self.params.get_mut(&id)?, field) {
            (LayerParams::Conv { weights }, "weight") => Some(weights),
            (LayerParams::BatchNorm { gamma, .. }, "gamma") => Some(gamma),
            (LayerParams::BatchNorm { beta, .. }, "beta") => Some(beta),
            (LayerParams::BatchNorm { running_mean, .. }, "running_mean") => Some(running_mean),
            (LayerParams::BatchNorm { running_var, .. }, "running_var") => Some(running_var),
            (LayerParams::Fc { weights, .. }, "weight") => Some(weights),
            (LayerParams::Fc { bias, .. }, "bias") => Some(bias),
            _ => None,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Conv weight tensors by layer id (the crossbar-mappable kernels).
    pub fn conv_weights(&self) -> BTreeMap<LayerId, &Tensor> {
        self.params
            .iter()
            .filter_map(|(id, p)| match p {
                LayerParams::Conv { weights } => Some((*id, weights)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::desk_resnet;

    #[test]
    fn init_is_seed_deterministic() {
        let net = desk_resnet(&Default::default());
        let a = Model::init(net.clone(), 3).unwrap();
        let b = Model::init(net.clone(), 3).unwrap();
        let c = Model::init(net, 4).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        let wa: Vec<f64> = a.named_tensors()[0].1.data().to_vec();
        let wc: Vec<f64> = c.named_tensors()[0].1.data().to_vec();
        assert_ne!(wa, wc);
    }

    #[test]
    fn desk_net_is_under_100k_params() {
        let model = Model::init(desk_resnet(&Default::default()), 0).unwrap();
        assert!(model.param_count() <= 100_000, "{}", model.param_count());
        assert!(model.param_count() >= 10_000, "{}", model.param_count());
    }

    #[test]
    fn eval_is_pure_and_deterministic() {
        let model = Model::init(desk_resnet(&Default::default()), 1).unwrap();
        let before: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let input = Tensor::full(&[2, 1, 12, 12], 0.5);
        let a = model.forward_eval(&input, &EvalOverrides::default()).unwrap();
        let b = model.forward_eval(&input, &EvalOverrides::default()).unwrap();
        assert_eq!(a.data(), b.data());
        let after: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut model = Model::init(desk_resnet(&Default::default()), 1).unwrap();
        let input = Tensor::full(&[1, 1, 12, 12], 0.1);
        let fwd = model.forward_train(&input, &[0], None).unwrap();
        // sanity: with a recorded pass it works
        model.backward(&fwd).unwrap();
        // an eval pass has no tape to walk
        let logits = model.forward_eval(&input, &EvalOverrides::default()).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
    }

    #[test]
    fn train_updates_running_stats() {
        let mut model = Model::init(desk_resnet(&Default::default()), 1).unwrap();
        let rv_before = model.tensor_mut("layer1.running_var").unwrap().data().to_vec();
        let input = Tensor::full(&[4, 1, 12, 12], 0.3);
        model.forward_train(&input, &[0, 1, 2, 3], None).unwrap();
        let rv_after = model.tensor_mut("layer1.running_var").unwrap().data().to_vec();
        assert_ne!(rv_before, rv_after);
    }
}
