//! Drop-connect: per-iteration Bernoulli weight masking with expectation-
//! preserving rescale.
//!
//! The convolution of a masked layer computes
//! `O = scale * conv(I, W .* M)` with `scale = 1/(1-p)` and each mask entry
//! independently zero with probability `p`. Masks are regenerated from
//! (seed, draw id, layer id) every iteration, so a run is reproducible and
//! restartable without storing any mask.
//!
//! The drop rate `p` is the probability of *dropping* a weight. A literal
//! "mask ~ Bernoulli(p)" reading, where `p` is the keep probability, is
//! selectable via [`MaskConvention::KeepProb`]; its expectation-preserving
//! rescale is `1/p`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{LayerId, LayerKind, NetworkSpec};
use crate::rng;
use crate::tensor::Tensor;

/// Which layers participate in drop-connect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcPredicate {
    /// Convolutions with kernel size > 1 (1x1 convolutions are never masked).
    ConvExceptPointwise,
    /// Every convolution, including 1x1. Used by the fault-criticality
    /// comparison arm.
    AllConv,
}

impl Default for DcPredicate {
    fn default() -> Self {
        DcPredicate::ConvExceptPointwise
    }
}

impl DcPredicate {
    pub fn applies(&self, kind: &LayerKind) -> bool {
        match self {
            DcPredicate::ConvExceptPointwise => {
                matches!(kind, LayerKind::Conv2d { kernel, .. } if *kernel > 1)
            }
            DcPredicate::AllConv => kind.is_conv(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DcPredicate::ConvExceptPointwise => "conv-except-pointwise",
            DcPredicate::AllConv => "all-conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv-except-pointwise" => Ok(DcPredicate::ConvExceptPointwise),
            "all-conv" => Ok(DcPredicate::AllConv),
            other => Err(Error::InvalidConfig(format!("unknown predicate `{other}`"))),
        }
    }
}

/// How the printed Bernoulli parameter is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskConvention {
    /// `p` is the drop probability: entries are 0 with probability `p`,
    /// rescale is `1/(1-p)`.
    DropProb,
    /// `p` is the keep probability: entries are 1 with probability `p`,
    /// rescale is `1/p`.
    KeepProb,
}

impl Default for MaskConvention {
    fn default() -> Self {
        MaskConvention::DropProb
    }
}

/// Where the expectation-preserving rescale is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcScaleMode {
    /// Fold the rescale into the masked convolution output (default).
    ConvOutput,
    /// Leave the convolution unscaled and rescale the input of the batchnorm
    /// layer that consumes it.
    BnInput,
}

impl Default for DcScaleMode {
    fn default() -> Self {
        DcScaleMode::ConvOutput
    }
}

#[derive(Debug, Clone)]
pub struct DropConnectConfig {
    /// Drop probability in [0, 1).
    pub p: f64,
    pub predicate: DcPredicate,
    pub convention: MaskConvention,
    pub scale_mode: DcScaleMode,
    pub mask_seed: u64,
}

impl DropConnectConfig {
    pub fn new(p: f64, mask_seed: u64) -> Result<Self> {
        let cfg = DropConnectConfig {
            p,
            predicate: DcPredicate::default(),
            convention: MaskConvention::default(),
            scale_mode: DcScaleMode::default(),
            mask_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!(
                "drop-connect rate must be in [0, 1), got {}",
                self.p
            )));
        }
        if self.convention == MaskConvention::KeepProb && self.p == 0.0 {
            return Err(Error::InvalidConfig(
                "keep probability 0 drops every weight".into(),
            ));
        }
        Ok(())
    }

    /// Zero probability of a mask entry under the configured convention.
    pub fn drop_probability(&self) -> f64 {
        match self.convention {
            MaskConvention::DropProb => self.p,
            MaskConvention::KeepProb => 1.0 - self.p,
        }
    }

    /// Expectation-preserving output rescale.
    pub fn scale(&self) -> f64 {
        match self.convention {
            MaskConvention::DropProb => 1.0 / (1.0 - self.p),
            MaskConvention::KeepProb => 1.0 / self.p,
        }
    }

    /// Layers of `net` that are masked under the predicate.
    pub fn masked_layers(&self, net: &NetworkSpec) -> Vec<LayerId> {
        net.layers
            .iter()
            .filter(|l| self.predicate.applies(&l.kind))
            .map(|l| l.id)
            .collect()
    }
}

/// Binary mask over one layer's weights for one training iteration.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Tensor,
    pub draw_id: u64,
}

/// Sample a weight mask: each entry is independently 0 with probability
/// `drop_prob`, else 1. Deterministic in (seed, draw id, layer id).
pub fn sample_mask(
    shape: &[usize],
    drop_prob: f64,
    seed: u64,
    draw_id: u64,
    layer: LayerId,
) -> Mask {
    let mut rng = rng::stream(seed, &[0x6d61_736b, draw_id, layer as u64]);
    let mut values = Tensor::zeros(shape);
    for v in values.data_mut() {
        *v = if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
            0.0
        } else {
            1.0
        };
    }
    Mask {
        values,
        draw_id,
    }
}

/// Masked convolution with the expectation-preserving rescale:
/// `(1/(1-p)) * conv(input, weights .* mask)`.
pub fn apply_drop_connect(
    input: &Tensor,
    weights: &Tensor,
    mask: &Mask,
    p: f64,
    geom: &crate::layers::ConvGeometry,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "drop-connect rate must be in [0, 1), got {p}"
        )));
    }
    if mask.values.shape() != weights.shape() {
        return Err(Error::InvalidConfig(format!(
            "mask shape {:?} does not match weights {:?}",
            mask.values.shape(),
            weights.shape()
        )));
    }
    let scale = 1.0 / (1.0 - p);
    let mut masked = weights.clone();
    masked.clear_grad();
    for (w, m) in masked.data_mut().iter_mut().zip(mask.values.data()) {
        *w *= m;
    }
    let mut out = crate::layers::conv2d_forward(input, &masked, geom)?;
    for v in out.data_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// Masks for every applicable layer in one iteration, plus the rescale to
/// apply wherever the masked convolutions feed the network.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub masks: BTreeMap<LayerId, Mask>,
    pub scale: f64,
    pub scale_mode: DcScaleMode,
}

impl MaskSet {
    /// Draw fresh masks for iteration `draw_id` of a run.
    pub fn draw(cfg: &DropConnectConfig, net: &NetworkSpec, draw_id: u64) -> Result<MaskSet> {
        cfg.validate()?;
        let drop_prob = cfg.drop_probability();
        let mut masks = BTreeMap::new();
        for layer in &net.layers {
            if !cfg.predicate.applies(&layer.kind) {
                continue;
            }
            let LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                groups,
                ..
            } = layer.kind
            else {
                continue;
            };
            let shape = [out_ch, in_ch / groups, kernel, kernel];
            masks.insert(
                layer.id,
                sample_mask(&shape, drop_prob, cfg.mask_seed, draw_id, layer.id),
            );
        }
        Ok(MaskSet {
            masks,
            scale: cfg.scale(),
            scale_mode: cfg.scale_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::desk_resnet;

    #[test]
    fn p_zero_is_all_ones() {
        let mask = sample_mask(&[4, 4], 0.0, 1, 0, 0);
        assert!(mask.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_count_within_binomial_bound() {
        // p = 0.3 over 10,000 entries: 3000 +/- 3*sqrt(10000*0.3*0.7) ~ 3000 +/- 137
        let mask = sample_mask(&[100, 100], 0.3, 42, 0, 0);
        let zeros = mask.values.data().iter().filter(|&&v| v == 0.0).count() as f64;
        assert!((zeros - 3000.0).abs() <= 137.0, "zeros = {zeros}");
    }

    #[test]
    fn same_seed_and_draw_is_bit_identical() {
        let a = sample_mask(&[32, 16, 3, 3], 0.25, 9, 7, 3);
        let b = sample_mask(&[32, 16, 3, 3], 0.25, 9, 7, 3);
        assert_eq!(a.values.data(), b.values.data());
        let c = sample_mask(&[32, 16, 3, 3], 0.25, 9, 8, 3);
        assert_ne!(a.values.data(), c.values.data());
    }

    #[test]
    fn rate_one_is_rejected() {
        assert!(DropConnectConfig::new(1.0, 0).is_err());
        assert!(DropConnectConfig::new(0.999, 0).is_ok());
    }

    #[test]
    fn default_predicate_skips_pointwise_convs() {
        let net = desk_resnet(&Default::default());
        let cfg = DropConnectConfig::new(0.3, 0).unwrap();
        let masked = cfg.masked_layers(&net);
        for id in &masked {
            let kind = &net.layer(*id).unwrap().kind;
            assert!(kind.conv_kernel().unwrap() > 1);
        }
        // the two 1x1 shortcuts are excluded, every 3x3 conv is included
        let all_conv = net.layers.iter().filter(|l| l.kind.is_conv()).count();
        assert_eq!(masked.len(), all_conv - 2);

        let all = DropConnectConfig {
            predicate: DcPredicate::AllConv,
            ..cfg
        };
        assert_eq!(all.masked_layers(&net).len(), all_conv);
    }

    #[test]
    fn keep_convention_flips_drop_probability() {
        let cfg = DropConnectConfig {
            p: 0.8,
            predicate: DcPredicate::default(),
            convention: MaskConvention::KeepProb,
            scale_mode: DcScaleMode::default(),
            mask_seed: 0,
        };
        assert!((cfg.drop_probability() - 0.2).abs() < 1e-12);
        assert!((cfg.scale() - 1.25).abs() < 1e-12);
    }
}
