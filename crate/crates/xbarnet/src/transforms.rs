//! Structural countermeasures and the host/crossbar placement planner.
//!
//! - [`widen`]: multiply interior channel counts by `1 + p`.
//! - [`expand_shortcut`]: turn residual projection shortcuts from 1x1 into
//!   3x3 convolutions so drop-connect and crossbar placement apply to them.
//! - [`plan_placement`]: decide which convolutions execute on crossbars and
//!   which stay on the fault-free host.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{LayerParams, Model};
use crate::net::{LayerId, LayerKind, NetworkSpec, Shape, SourceRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Rram,
    Host,
}

/// Crossbar-or-host assignment for every convolution layer. Non-convolution
/// layers (batchnorm, activations, pooling, the classifier) always run on
/// the host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    assignments: BTreeMap<LayerId, Placement>,
}

impl PlacementPlan {
    pub fn placement(&self, id: LayerId) -> Placement {
        self.assignments.get(&id).copied().unwrap_or(Placement::Host)
    }

    pub fn rram_layers(&self) -> Vec<LayerId> {
        self.assignments
            .iter()
            .filter(|(_, p)| **p == Placement::Rram)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn host_conv_layers(&self) -> Vec<LayerId> {
        self.assignments
            .iter()
            .filter(|(_, p)| **p == Placement::Host)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("# placement plan v1\n");
        for (id, p) in &self.assignments {
            out.push_str(&format!(
                "layer {id} {}\n",
                match p {
                    Placement::Rram => "rram",
                    Placement::Host => "host",
                }
            ));
        }
        out
    }

    pub fn parse(content: &str, net: &NetworkSpec, file: &str) -> Result<PlacementPlan> {
        let mut assignments = BTreeMap::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = |detail: String| Error::Parse {
                file: file.to_string(),
                line: idx + 1,
                detail,
            };
            if parts.len() != 3 || parts[0] != "layer" {
                return Err(err("expected `layer <id> rram|host`".into()));
            }
            let id: LayerId = parts[1]
                .parse()
                .map_err(|_| err(format!("bad layer id `{}`", parts[1])))?;
            let placement = match parts[2] {
                "rram" => Placement::Rram,
                "host" => Placement::Host,
                other => return Err(err(format!("bad placement `{other}`"))),
            };
            let Some(layer) = net.layer(id) else {
                return Err(err(format!("unknown layer id {id}")));
            };
            if !layer.kind.is_conv() {
                return Err(err(format!("layer {id} is not a convolution")));
            }
            assignments.insert(id, placement);
        }
        // anything unlisted defaults to the default policy for that layer
        let mut plan = default_plan(net);
        plan.assignments.extend(assignments);
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// 1x1 convolutions on the host, everything else on crossbars.
    Default,
    /// Every convolution, 1x1 included, on crossbars.
    AllRram,
    /// Explicit per-layer assignments (unlisted convs follow Default).
    Custom(BTreeMap<LayerId, Placement>),
}

fn default_plan(net: &NetworkSpec) -> PlacementPlan {
    let mut assignments = BTreeMap::new();
    for layer in &net.layers {
        if let Some(k) = layer.kind.conv_kernel() {
            let placement = if k == 1 { Placement::Host } else { Placement::Rram };
            assignments.insert(layer.id, placement);
        }
    }
    PlacementPlan { assignments }
}

pub fn plan_placement(net: &NetworkSpec, policy: &PlacementPolicy) -> Result<PlacementPlan> {
    net.infer_shapes()?;
    match policy {
        PlacementPolicy::Default => Ok(default_plan(net)),
        PlacementPolicy::AllRram => {
            let mut assignments = BTreeMap::new();
            for layer in &net.layers {
                if layer.kind.is_conv() {
                    assignments.insert(layer.id, Placement::Rram);
                }
            }
            Ok(PlacementPlan { assignments })
        }
        PlacementPolicy::Custom(map) => {
            let mut plan = default_plan(net);
            for (id, p) in map {
                let Some(layer) = net.layer(*id) else {
                    return Err(Error::InvalidConfig(format!(
                        "custom plan references unknown layer {id}"
                    )));
                };
                if !layer.kind.is_conv() {
                    return Err(Error::InvalidConfig(format!(
                        "custom plan places non-conv layer {id}"
                    )));
                }
                plan.assignments.insert(*id, *p);
            }
            Ok(plan)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WidenConfig {
    /// Fractional channel increase `p`; the multiplier is `1 + p`.
    pub increase: f64,
}

fn widen_count(c: usize, multiplier: f64) -> usize {
    // round half away from zero; counts are positive
    ((c as f64 * multiplier) + 0.5).floor().max(1.0) as usize
}

/// Scale every interior channel count by `1 + p`. Network input channels and
/// the classifier output never change; spatial geometry is untouched, so
/// widened residual branches stay consistent by construction (a rounding
/// mismatch at a join is repaired to the branch maximum and reported).
pub fn widen(net: &NetworkSpec, cfg: &WidenConfig) -> Result<(NetworkSpec, Vec<String>)> {
    if cfg.increase < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "width increase must be non-negative, got {}",
            cfg.increase
        )));
    }
    let multiplier = 1.0 + cfg.increase;
    let shapes = net.infer_shapes()?;
    let pos_of: HashMap<LayerId, usize> = net
        .layers
        .iter()
        .enumerate()
        .map(|(pos, l)| (l.id, pos))
        .collect();
    let logits_id = net.logits_layer();

    // New per-layer output channel counts, in topological order.
    let mut new_channels: Vec<usize> = Vec::with_capacity(net.layers.len());
    let mut warnings = Vec::new();
    let channels_of = |r: &SourceRef, new_channels: &[usize]| -> usize {
        match r {
            SourceRef::Input => net.input_shape[0],
            SourceRef::Layer(id) => new_channels[pos_of[id]],
        }
    };

    for (pos, layer) in net.layers.iter().enumerate() {
        let c = match &layer.kind {
            LayerKind::Conv2d { out_ch, .. } => widen_count(*out_ch, multiplier),
            LayerKind::Fc { out_features, .. } => {
                if layer.id == logits_id {
                    *out_features
                } else {
                    widen_count(*out_features, multiplier)
                }
            }
            LayerKind::ResidualAdd => {
                let a = channels_of(&layer.inputs[0], &new_channels);
                let b = channels_of(&layer.inputs[1], &new_channels);
                if a != b {
                    warnings.push(format!(
                        "residual join {} branches widened to {a} vs {b}; using {}",
                        layer.id,
                        a.max(b)
                    ));
                }
                a.max(b)
            }
            _ => channels_of(&layer.inputs[0], &new_channels),
        };
        let _ = pos;
        new_channels.push(c);
    }

    // Repair pass: force both branches of a mismatched join up to the max.
    for (pos, layer) in net.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::ResidualAdd) {
            continue;
        }
        let target = new_channels[pos];
        for r in &layer.inputs {
            if let SourceRef::Layer(id) = r {
                let mut at = pos_of[id];
                // walk back through channel-preserving layers to the producer
                loop {
                    let l = &net.layers[at];
                    match l.kind {
                        LayerKind::Conv2d { .. } | LayerKind::Fc { .. } => {
                            new_channels[at] = target;
                            break;
                        }
                        LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::AvgPool { .. } => {
                            new_channels[at] = target;
                            match l.inputs[0] {
                                SourceRef::Layer(id) => at = pos_of[&id],
                                SourceRef::Input => break,
                            }
                        }
                        _ => break,
                    }
                }
            }
        }
    }

    // Rewrite layer hyperparameters against the new channel map.
    let mut layers = Vec::with_capacity(net.layers.len());
    for (pos, layer) in net.layers.iter().enumerate() {
        let in_ch = channels_of(&layer.inputs[0], &new_channels);
        let kind = match &layer.kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                groups,
                in_ch: old_in,
                ..
            } => {
                let new_out = new_channels[pos];
                let new_groups = if *groups == 1 {
                    1
                } else if *groups == *old_in {
                    in_ch // depthwise follows its channel count
                } else {
                    return Err(Error::InvalidConfig(format!(
                        "layer {}: widening grouped convolutions with 1 < groups < in_ch is not supported",
                        layer.id
                    )));
                };
                LayerKind::Conv2d {
                    in_ch,
                    out_ch: new_out,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    groups: new_groups,
                }
            }
            LayerKind::BatchNorm { .. } => LayerKind::BatchNorm { channels: in_ch },
            LayerKind::Fc { .. } => {
                // spatial extent is unchanged by widening
                let spatial = match shapes[pos_of[&match layer.inputs[0] {
                    SourceRef::Layer(id) => id,
                    SourceRef::Input => unreachable!("fc reading raw input"),
                }]] {
                    Shape::Chw(c, h, w) => {
                        let _ = c;
                        h * w
                    }
                    Shape::Flat(_) => 1,
                    Shape::Scalar => 1,
                };
                LayerKind::Fc {
                    in_features: in_ch * spatial,
                    out_features: new_channels[pos],
                }
            }
            other => other.clone(),
        };
        layers.push(crate::net::LayerSpec {
            id: layer.id,
            kind,
            inputs: layer.inputs.clone(),
        });
    }

    let widened = NetworkSpec {
        input_shape: net.input_shape,
        layers,
    };
    widened.infer_shapes()?;
    Ok((widened, warnings))
}

/// Transitive predecessors of a layer, including itself.
fn ancestors(net: &NetworkSpec, pos_of: &HashMap<LayerId, usize>, id: LayerId) -> BTreeSet<LayerId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![id];
    while let Some(cur) = stack.pop() {
        if !seen.insert(cur) {
            continue;
        }
        for r in &net.layers[pos_of[&cur]].inputs {
            if let SourceRef::Layer(p) = r {
                stack.push(*p);
            }
        }
    }
    seen
}

/// 1x1 convolutions acting as residual projection shortcuts: the exclusive
/// chain of one residual branch, from the join back to the fork, is exactly
/// `conv1x1` or `conv1x1 -> batchnorm`. Pointwise convolutions on a main
/// branch (as in inverted residual blocks) do not match.
pub fn shortcut_conv_ids(net: &NetworkSpec) -> Vec<LayerId> {
    let pos_of: HashMap<LayerId, usize> = net
        .layers
        .iter()
        .enumerate()
        .map(|(pos, l)| (l.id, pos))
        .collect();
    let mut found = BTreeSet::new();
    for layer in &net.layers {
        if !matches!(layer.kind, LayerKind::ResidualAdd) {
            continue;
        }
        let branch_ids: Vec<Option<LayerId>> = layer
            .inputs
            .iter()
            .map(|r| match r {
                SourceRef::Layer(id) => Some(*id),
                SourceRef::Input => None,
            })
            .collect();
        for (side, other) in [(0usize, 1usize), (1, 0)] {
            let Some(start) = branch_ids[side] else { continue };
            let other_anc = match branch_ids[other] {
                Some(o) => ancestors(net, &pos_of, o),
                None => BTreeSet::new(),
            };
            // walk the exclusive chain of this branch
            let mut chain = Vec::new();
            let mut cur = start;
            loop {
                if other_anc.contains(&cur) {
                    break; // reached the fork
                }
                let l = &net.layers[pos_of[&cur]];
                chain.push(l);
                if l.inputs.len() != 1 {
                    chain.clear();
                    break;
                }
                match l.inputs[0] {
                    SourceRef::Layer(id) => cur = id,
                    SourceRef::Input => break,
                }
            }
            let conv = match chain.len() {
                1 => &chain[0].kind,
                2 if matches!(chain[0].kind, LayerKind::BatchNorm { .. }) => &chain[1].kind,
                _ => continue,
            };
            if conv.conv_kernel() == Some(1) {
                found.insert(match chain.len() {
                    1 => chain[0].id,
                    _ => chain[1].id,
                });
            }
        }
    }
    found.into_iter().collect()
}

/// Replace each residual shortcut 1x1 convolution with a 3x3 one (padding 1,
/// stride and channels unchanged). The expanded layers fall under the default
/// drop-connect predicate and the default crossbar placement. Returns the new
/// spec, the ids that changed, and warnings.
pub fn expand_shortcut(net: &NetworkSpec) -> Result<(NetworkSpec, Vec<LayerId>, Vec<String>)> {
    net.infer_shapes()?;
    let targets = shortcut_conv_ids(net);
    if targets.is_empty() {
        return Ok((
            net.clone(),
            Vec::new(),
            vec!["no 1x1 shortcut convolutions found; network unchanged".to_string()],
        ));
    }
    let mut out = net.clone();
    for layer in &mut out.layers {
        if !targets.contains(&layer.id) {
            continue;
        }
        let LayerKind::Conv2d {
            in_ch,
            out_ch,
            stride,
            groups,
            ..
        } = layer.kind
        else {
            unreachable!("shortcut ids are convs");
        };
        layer.kind = LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            padding: 1,
            groups,
        };
    }
    out.infer_shapes()?;
    Ok((out, targets, Vec::new()))
}

/// Transplant parameters from a model onto its shortcut-expanded spec with
/// center-tap initialization: each expanded 3x3 kernel is zero except the
/// center tap, which carries the old 1x1 weight. The resulting model computes
/// exactly the same function.
pub fn center_tap_transplant(
    old: &Model,
    expanded_spec: &NetworkSpec,
    expanded_ids: &[LayerId],
) -> Result<Model> {
    let mut fresh = Model::init(expanded_spec.clone(), 0)?;
    fresh.bn_eps = old.bn_eps;
    fresh.bn_momentum = old.bn_momentum;
    for (id, params) in &old.params {
        let expanded = expanded_ids.contains(id);
        match (params, fresh.params.get_mut(id)) {
            (LayerParams::Conv { weights }, Some(LayerParams::Conv { weights: slot })) => {
                if expanded {
                    let [m, c, _, _] = *weights.shape() else {
                        return Err(Error::InvalidSpec(format!(
                            "layer {id} weights are not 4-d"
                        )));
                    };
                    let mut embedded = crate::tensor::Tensor::zeros(&[m, c, 3, 3]);
                    for mi in 0..m {
                        for ci in 0..c {
                            let v = weights.at4(mi, ci, 0, 0);
                            let idx = embedded.index4(mi, ci, 1, 1);
                            embedded.data_mut()[idx] = v;
                        }
                    }
                    *slot = embedded;
                } else {
                    *slot = weights.clone();
                }
            }
            (p, Some(slot)) => *slot = p.clone(),
            (_, None) => {
                return Err(Error::InvalidSpec(format!(
                    "layer {id} missing from expanded spec"
                )))
            }
        }
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{desk_resnet, mobilenet_v2_style, resnet20, vgg13};

    #[test]
    fn widen_rounds_half_away_from_zero() {
        assert_eq!(widen_count(16, 1.2), 19); // 19.2
        assert_eq!(widen_count(16, 1.6), 26); // 25.6
        assert_eq!(widen_count(32, 1.6), 51); // 51.2
        assert_eq!(widen_count(64, 1.6), 102); // 102.4
        assert_eq!(widen_count(10, 1.25), 13); // 12.5 rounds away from zero
    }

    #[test]
    fn widen_zero_is_identity() {
        let net = desk_resnet(&Default::default());
        let (widened, warnings) = widen(&net, &WidenConfig { increase: 0.0 }).unwrap();
        assert_eq!(widened, net);
        assert!(warnings.is_empty());
    }

    #[test]
    fn widen_preserves_input_and_classes() {
        let net = resnet20(10);
        let (w, _) = widen(&net, &WidenConfig { increase: 0.6 }).unwrap();
        assert_eq!(w.input_shape, [3, 32, 32]);
        // stem keeps 3 input channels; classifier keeps 10 outputs
        let stem = &w.layers[0];
        assert!(matches!(stem.kind, LayerKind::Conv2d { in_ch: 3, out_ch: 26, .. }));
        let fc = w
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Fc { .. }))
            .unwrap();
        assert!(matches!(fc.kind, LayerKind::Fc { out_features: 10, .. }));
        // stage widths 16/32/64 become 26/51/102
        let out_counts: BTreeSet<usize> = w
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv2d { out_ch, kernel: 3, .. } => Some(out_ch),
                _ => None,
            })
            .collect();
        assert!(out_counts.contains(&26));
        assert!(out_counts.contains(&51));
        assert!(out_counts.contains(&102));
    }

    #[test]
    fn widen_makes_every_interior_layer_strictly_wider() {
        let net = desk_resnet(&Default::default());
        let (w, _) = widen(&net, &WidenConfig { increase: 0.2 }).unwrap();
        for (old, new) in net.layers.iter().zip(&w.layers) {
            if let (
                LayerKind::Conv2d { out_ch: a, .. },
                LayerKind::Conv2d { out_ch: b, .. },
            ) = (&old.kind, &new.kind)
            {
                assert!(b > a, "layer {} did not widen", old.id);
            }
        }
    }

    #[test]
    fn widen_handles_depthwise_groups() {
        let net = mobilenet_v2_style(10);
        let (w, _) = widen(&net, &WidenConfig { increase: 0.2 }).unwrap();
        for layer in &w.layers {
            if let LayerKind::Conv2d { in_ch, groups, .. } = layer.kind {
                if groups > 1 {
                    assert_eq!(groups, in_ch, "depthwise conv {} lost its grouping", layer.id);
                }
            }
        }
        w.infer_shapes().unwrap();
    }

    #[test]
    fn shortcut_detection_matches_resnet_not_mobilenet() {
        let resnet = desk_resnet(&Default::default());
        let shortcuts = shortcut_conv_ids(&resnet);
        assert_eq!(shortcuts.len(), 2);
        for id in &shortcuts {
            assert_eq!(resnet.layer(*id).unwrap().kind.conv_kernel(), Some(1));
        }

        // MobileNet pointwise convs sit on the main branch; none are shortcuts.
        let mobile = mobilenet_v2_style(10);
        assert!(shortcut_conv_ids(&mobile).is_empty());
    }

    #[test]
    fn expand_shortcut_grows_kernels_nine_fold() {
        let net = resnet20(10);
        let before: usize = net
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel: 1, groups, .. } => {
                    Some(out_ch * (in_ch / groups))
                }
                _ => None,
            })
            .sum();
        let (expanded, ids, warnings) = expand_shortcut(&net).unwrap();
        assert_eq!(ids.len(), 2);
        assert!(warnings.is_empty());
        assert!(expanded.pointwise_conv_ids().is_empty());
        let after: usize = ids
            .iter()
            .map(|id| match expanded.layer(*id).unwrap().kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, padding, groups, .. } => {
                    assert_eq!(kernel, 3);
                    assert_eq!(padding, 1);
                    out_ch * (in_ch / groups) * 9
                }
                _ => panic!(),
            })
            .sum();
        assert_eq!(after, before * 9);
    }

    #[test]
    fn expand_without_shortcuts_is_noop_with_warning() {
        let net = vgg13(10);
        let (out, ids, warnings) = expand_shortcut(&net).unwrap();
        assert_eq!(out, net);
        assert!(ids.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn default_plan_hosts_pointwise_and_mobilenet_pointwise() {
        let net = desk_resnet(&Default::default());
        let plan = plan_placement(&net, &PlacementPolicy::Default).unwrap();
        for id in net.pointwise_conv_ids() {
            assert_eq!(plan.placement(id), Placement::Host);
        }
        for layer in &net.layers {
            if layer.kind.conv_kernel().map(|k| k > 1).unwrap_or(false) {
                assert_eq!(plan.placement(layer.id), Placement::Rram);
            }
        }

        let mobile = mobilenet_v2_style(10);
        let plan = plan_placement(&mobile, &PlacementPolicy::Default).unwrap();
        for id in mobile.pointwise_conv_ids() {
            assert_eq!(plan.placement(id), Placement::Host);
        }
    }

    #[test]
    fn all_rram_places_every_conv() {
        let net = desk_resnet(&Default::default());
        let plan = plan_placement(&net, &PlacementPolicy::AllRram).unwrap();
        assert!(plan.host_conv_layers().is_empty());
        let convs = net.layers.iter().filter(|l| l.kind.is_conv()).count();
        assert_eq!(plan.rram_layers().len(), convs);
    }

    #[test]
    fn default_and_all_rram_agree_without_pointwise_convs() {
        let net = vgg13(10);
        let a = plan_placement(&net, &PlacementPolicy::Default).unwrap();
        let b = plan_placement(&net, &PlacementPolicy::AllRram).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn custom_plan_rejects_unknown_and_nonconv_layers() {
        let net = desk_resnet(&Default::default());
        let mut bad = BTreeMap::new();
        bad.insert(999usize, Placement::Rram);
        assert!(plan_placement(&net, &PlacementPolicy::Custom(bad)).is_err());

        let bn_id = net
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .unwrap()
            .id;
        let mut bad = BTreeMap::new();
        bad.insert(bn_id, Placement::Rram);
        assert!(plan_placement(&net, &PlacementPolicy::Custom(bad)).is_err());
    }

    #[test]
    fn plan_round_trips_through_text() {
        let net = desk_resnet(&Default::default());
        let plan = plan_placement(&net, &PlacementPolicy::AllRram).unwrap();
        let text = plan.serialize();
        let parsed = PlacementPlan::parse(&text, &net, "plan").unwrap();
        assert_eq!(parsed, plan);
    }

    #[test]
    fn expanded_shortcuts_become_rram_placeable_and_maskable() {
        let net = desk_resnet(&Default::default());
        let (expanded, ids, _) = expand_shortcut(&net).unwrap();
        let plan = plan_placement(&expanded, &PlacementPolicy::Default).unwrap();
        let dc = crate::dropconnect::DropConnectConfig::new(0.3, 0).unwrap();
        let masked = dc.masked_layers(&expanded);
        for id in &ids {
            assert_eq!(plan.placement(*id), Placement::Rram);
            assert!(masked.contains(id));
        }
    }
}
