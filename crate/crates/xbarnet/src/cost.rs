//! Analytical latency/energy model for crossbar-placed work.
//!
//! Both outputs are proportional to the total multiply-accumulate count of
//! crossbar-placed convolutions, with constants calibrated on a reference
//! accelerator measurement. Host-placed layers cost nothing by default. The
//! energy column keeps the units of the calibration table it reproduces and
//! is treated as a latency-proportional proxy, not reinterpreted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::{conv_out_extent, LayerId, LayerKind, NetworkSpec, Shape, SourceRef};
use crate::transforms::{Placement, PlacementPlan};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CostModelParams {
    /// Crossbar MACs per second.
    pub throughput: f64,
    /// Crossbar MACs per energy unit.
    pub energy_efficiency: f64,
    /// Inference samples per estimate; folded into calibration.
    pub workload: f64,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.throughput <= 0.0 || self.energy_efficiency <= 0.0 || self.workload <= 0.0 {
            return Err(Error::InvalidConfig(
                "cost model constants must be calibrated or given explicitly (all positive)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OpCount {
    /// MACs per crossbar-placed layer.
    pub per_layer: BTreeMap<LayerId, u64>,
    pub total: u64,
}

/// Multiply-accumulate counts for crossbar-placed convolutions:
/// `m * (n/groups) * k^2 * H_out * W_out`. Host-placed layers contribute 0.
pub fn count_ops(net: &NetworkSpec, plan: &PlacementPlan) -> Result<OpCount> {
    let shapes = net.infer_shapes()?;
    let pos_of: std::collections::HashMap<LayerId, usize> = net
        .layers
        .iter()
        .enumerate()
        .map(|(pos, l)| (l.id, pos))
        .collect();
    let mut per_layer = BTreeMap::new();
    let mut total = 0u64;
    for layer in &net.layers {
        let LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
        } = layer.kind
        else {
            continue;
        };
        if plan.placement(layer.id) != Placement::Rram {
            continue;
        }
        let (h, w) = match layer.inputs[0] {
            SourceRef::Input => (net.input_shape[1], net.input_shape[2]),
            SourceRef::Layer(id) => match shapes[pos_of[&id]] {
                Shape::Chw(_, h, w) => (h, w),
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "conv layer {} fed by non-spatial shape {other:?}",
                        layer.id
                    )))
                }
            },
        };
        let h_out = conv_out_extent(h, kernel, stride, padding);
        let w_out = conv_out_extent(w, kernel, stride, padding);
        let macs =
            (out_ch * (in_ch / groups) * kernel * kernel * h_out * w_out) as u64;
        per_layer.insert(layer.id, macs);
        total += macs;
    }
    Ok(OpCount { per_layer, total })
}

/// (latency seconds, energy in calibration units) for running `workload`
/// inference samples of `net` under `plan`.
pub fn estimate(
    net: &NetworkSpec,
    plan: &PlacementPlan,
    params: &CostModelParams,
) -> Result<(f64, f64)> {
    params.validate()?;
    let ops = count_ops(net, plan)?;
    let work = ops.total as f64 * params.workload;
    Ok((work / params.throughput, work / params.energy_efficiency))
}

/// Fit the constants so that `estimate` reproduces the anchor measurement
/// exactly on (`net`, `plan`).
pub fn calibrate(
    net: &NetworkSpec,
    plan: &PlacementPlan,
    anchor_latency: f64,
    anchor_energy: f64,
    workload: f64,
) -> Result<CostModelParams> {
    if anchor_latency <= 0.0 || anchor_energy <= 0.0 {
        return Err(Error::InvalidConfig(
            "anchor latency and energy must be positive".into(),
        ));
    }
    let ops = count_ops(net, plan)?;
    if ops.total == 0 {
        return Err(Error::InvalidConfig(
            "anchor network has no crossbar-placed operations".into(),
        ));
    }
    let work = ops.total as f64 * workload;
    let params = CostModelParams {
        throughput: work / anchor_latency,
        energy_efficiency: work / anchor_energy,
        workload,
    };
    params.validate()?;
    Ok(params)
}

/// Per-layer cost table rows: (layer id, kind, placement, macs, latency, energy).
pub fn cost_table(
    net: &NetworkSpec,
    plan: &PlacementPlan,
    params: &CostModelParams,
) -> Result<Vec<(LayerId, String, String, u64, f64, f64)>> {
    params.validate()?;
    let ops = count_ops(net, plan)?;
    let mut rows = Vec::new();
    for layer in &net.layers {
        if !layer.kind.is_conv() {
            continue;
        }
        let macs = ops.per_layer.get(&layer.id).copied().unwrap_or(0);
        let work = macs as f64 * params.workload;
        rows.push((
            layer.id,
            layer.kind.name().to_string(),
            match plan.placement(layer.id) {
                Placement::Rram => "rram".to_string(),
                Placement::Host => "host".to_string(),
            },
            macs,
            work / params.throughput,
            work / params.energy_efficiency,
        ));
    }
    Ok(rows)
}
