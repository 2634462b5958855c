//! Inference on faulty crossbars and the Monte-Carlo reliability loop.
//!
//! Crossbar-placed layers compute with weights read back from the (possibly
//! faulty) cells; host-placed layers use the exact checkpoint weights. An
//! optional host-side rescale of `1/(1 - p')` after each crossbar layer
//! matches the activation statistics the recalibration pass calibrated for.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{EvalOverrides, Model};
use crate::net::LayerId;
use crate::quant;
use crate::tensor::Tensor;
use crate::transforms::{Placement, PlacementPlan};

use super::{inject_sa1, CrossbarSystem, FaultInjection, FaultMap};

/// Dequantized weight tensors as read from the crossbars under `faults`.
pub fn faulty_conv_weights(
    system: &CrossbarSystem,
    faults: Option<&FaultMap>,
) -> Result<BTreeMap<LayerId, Tensor>> {
    if let Some(f) = faults {
        if f.tiles != system.tiles.len() || f.geometry != system.geometry {
            return Err(Error::FaultMap(format!(
                "map covers {} tiles of {}x{}, system has {} tiles of {}x{}",
                f.tiles,
                f.geometry.rows,
                f.geometry.cols,
                system.tiles.len(),
                system.geometry.rows,
                system.geometry.cols
            )));
        }
    }
    Ok(system
        .mappings
        .iter()
        .map(|m| (m.layer, system.read_layer(m, faults)))
        .collect())
}

/// Host-side reference for deployment: quantize-dequantize the crossbar-placed
/// weights without going through cell storage.
pub fn quantized_conv_weights(model: &Model, plan: &PlacementPlan) -> BTreeMap<LayerId, Tensor> {
    model
        .conv_weights()
        .into_iter()
        .filter(|(id, _)| plan.placement(*id) == Placement::Rram)
        .map(|(id, w)| (id, quant::dequantize_tensor(&quant::quantize_tensor(w))))
        .collect()
}

/// `1/(1 - p')` output correction for every crossbar-mapped layer.
pub fn scale_corrections(system: &CrossbarSystem, p_prime: f64) -> BTreeMap<LayerId, f64> {
    let scale = 1.0 / (1.0 - p_prime);
    system.mappings.iter().map(|m| (m.layer, scale)).collect()
}

/// Predictions of `model` deployed on `system` under `faults`.
pub fn faulty_predict(
    model: &Model,
    system: &CrossbarSystem,
    faults: Option<&FaultMap>,
    scale_correction: Option<f64>,
    input: &Tensor,
) -> Result<Vec<usize>> {
    let weights = faulty_conv_weights(system, faults)?;
    let scales = scale_correction.map(|p| scale_corrections(system, p));
    let overrides = EvalOverrides {
        weights: Some(&weights),
        post_scale: scales.as_ref(),
    };
    model.predict(input, &overrides)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
    pub per_crossbar: Vec<f64>,
}

impl MonteCarloResult {
    fn from_accuracies(per_crossbar: Vec<f64>) -> MonteCarloResult {
        let n = per_crossbar.len();
        let mean = per_crossbar.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            let ss: f64 = per_crossbar.iter().map(|a| (a - mean) * (a - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = per_crossbar.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = per_crossbar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MonteCarloResult {
            mean,
            stddev,
            min,
            max,
            per_crossbar,
        }
    }
}

/// Accuracy of one deployment instance (one fault map) over a dataset.
pub fn deployment_accuracy(
    model: &Model,
    system: &CrossbarSystem,
    faults: Option<&FaultMap>,
    scale_correction: Option<f64>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let weights = faulty_conv_weights(system, faults)?;
    let scales = scale_correction.map(|p| scale_corrections(system, p));
    let overrides = EvalOverrides {
        weights: Some(&weights),
        post_scale: scales.as_ref(),
    };
    let mut correct = 0usize;
    for range in data.batch_ranges(batch_size) {
        let indices: Vec<usize> = range.collect();
        let (batch, labels) = data.batch(&indices);
        let pred = model.predict(&batch, &overrides)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Evaluate `n_crossbars` independently seeded fault maps (seeds
/// `base_seed .. base_seed + n`) in parallel. Aggregation is performed in
/// crossbar-index order, so the result is independent of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_eval(
    model: &Model,
    system: &CrossbarSystem,
    data: &Dataset,
    fault_rate: f64,
    n_crossbars: usize,
    base_seed: u64,
    injection: FaultInjection,
    scale_correction: Option<f64>,
    batch_size: usize,
) -> Result<MonteCarloResult> {
    if n_crossbars == 0 {
        return Err(Error::InvalidConfig("need at least one crossbar".into()));
    }
    let accuracies: Result<Vec<f64>> = (0..n_crossbars)
        .into_par_iter()
        .map(|i| {
            let faults = inject_sa1(system, fault_rate, base_seed + i as u64, injection)?;
            deployment_accuracy(
                model,
                system,
                Some(&faults),
                scale_correction,
                data,
                batch_size,
            )
        })
        .collect();
    Ok(MonteCarloResult::from_accuracies(accuracies?))
}
