//! Statistics recalibration: one frozen-weight pass per target fault rate.
//!
//! Batchnorm running statistics learned at drop rate `p` during training do
//! not match the activation distribution seen at deployment fault rate `p'`.
//! This pass re-runs train-mode forward passes with masks drawn at `p'` and
//! the matching rescale, updating only the running statistics. One snapshot
//! is produced per `p'`, so every deployment rate gets its own calibrated
//! model instead of one model calibrated to whichever rate ran last.

use crate::data::Dataset;
use crate::dropconnect::{DcPredicate, DcScaleMode, DropConnectConfig, MaskConvention, MaskSet};
use crate::error::{Error, Result};
use crate::model::Model;

/// Default inference-time rate grid.
pub const DEFAULT_P_PRIMES: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

#[derive(Debug, Clone)]
pub struct RecalibrationConfig {
    /// Inference-time scaling factors (expected stuck-at-one fault rates).
    pub p_primes: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Which layers are masked; should match the deployment placement.
    pub predicate: DcPredicate,
    pub mask_seed: u64,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        RecalibrationConfig {
            p_primes: DEFAULT_P_PRIMES.to_vec(),
            epochs: 1,
            batch_size: 32,
            predicate: DcPredicate::default(),
            mask_seed: 0x7576,
        }
    }
}

/// A recalibrated copy of the model for each `p'`, weights untouched.
pub fn update_var(
    model: &Model,
    data: &Dataset,
    cfg: &RecalibrationConfig,
) -> Result<Vec<(f64, Model)>> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("recalibration dataset is empty".into()));
    }
    let mut out = Vec::with_capacity(cfg.p_primes.len());
    for &p_prime in &cfg.p_primes {
        if !(0.0..1.0).contains(&p_prime) {
            return Err(Error::InvalidConfig(format!(
                "p' must be in [0, 1), got {p_prime}"
            )));
        }
        let mut snapshot = model.clone();
        let dc = DropConnectConfig {
            p: p_prime,
            predicate: cfg.predicate,
            convention: MaskConvention::DropProb,
            scale_mode: DcScaleMode::ConvOutput,
            mask_seed: cfg.mask_seed,
        };
        let mut draw_id: u64 = 0;
        for _ in 0..cfg.epochs.max(1) {
            for range in data.batch_ranges(cfg.batch_size) {
                let indices: Vec<usize> = range.collect();
                let (batch, _) = data.batch(&indices);
                let masks = MaskSet::draw(&dc, &snapshot.spec, draw_id)?;
                snapshot.forward_calibrate(&batch, Some(&masks))?;
                draw_id += 1;
            }
        }
        out.push((p_prime, snapshot));
    }
    Ok(out)
}

/// The snapshot whose `p'` is closest to the requested fault rate.
pub fn nearest_snapshot(snapshots: &[(f64, Model)], fault_rate: f64) -> Option<&(f64, Model)> {
    snapshots.iter().min_by(|a, b| {
        (a.0 - fault_rate)
            .abs()
            .partial_cmp(&(b.0 - fault_rate).abs())
            .unwrap()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::weight_hash;
    use crate::data::{synthetic_pair, SyntheticConfig};
    use crate::net::{desk_resnet, DeskNetConfig};

    fn small_model_and_data() -> (Model, Dataset) {
        let cfg = SyntheticConfig {
            classes: 4,
            train: 64,
            ..Default::default()
        };
        let (train, _) = synthetic_pair(&cfg);
        let net = desk_resnet(&DeskNetConfig {
            classes: 4,
            widths: [4, 8, 8],
            ..Default::default()
        });
        (Model::init(net, 11).unwrap(), train)
    }

    #[test]
    fn weights_are_frozen_for_every_p_prime() {
        let (model, data) = small_model_and_data();
        let before = weight_hash(&model);
        let snapshots = update_var(&model, &data, &RecalibrationConfig::default()).unwrap();
        assert_eq!(snapshots.len(), 4);
        for (p, snap) in &snapshots {
            assert_eq!(weight_hash(snap), before, "weights moved at p' = {p}");
        }
        // the source model itself is untouched
        assert_eq!(weight_hash(&model), before);
    }

    #[test]
    fn running_stats_move_for_positive_p_prime() {
        let (model, data) = small_model_and_data();
        let original = model
            .named_tensors()
            .iter()
            .find(|(n, _)| n.ends_with("running_var"))
            .map(|(_, t)| t.data().to_vec())
            .unwrap();
        let snapshots = update_var(&model, &data, &RecalibrationConfig::default()).unwrap();
        for (p, snap) in &snapshots {
            let rv = snap
                .named_tensors()
                .iter()
                .find(|(n, _)| n.ends_with("running_var"))
                .map(|(_, t)| t.data().to_vec())
                .unwrap();
            if *p > 0.0 {
                assert_ne!(rv, original, "running stats unchanged at p' = {p}");
            }
        }
    }

    #[test]
    fn default_grid_is_zero_to_thirty_percent() {
        assert_eq!(DEFAULT_P_PRIMES, [0.0, 0.1, 0.2, 0.3]);
        assert_eq!(
            RecalibrationConfig::default().p_primes,
            vec![0.0, 0.1, 0.2, 0.3]
        );
    }

    #[test]
    fn nearest_snapshot_selection() {
        let (model, data) = small_model_and_data();
        let snaps = update_var(&model, &data, &RecalibrationConfig::default()).unwrap();
        assert_eq!(nearest_snapshot(&snaps, 0.22).unwrap().0, 0.2);
        assert_eq!(nearest_snapshot(&snaps, 0.0).unwrap().0, 0.0);
        assert_eq!(nearest_snapshot(&snaps, 0.9).unwrap().0, 0.3);
    }

    #[test]
    fn rejects_out_of_range_p_prime() {
        let (model, data) = small_model_and_data();
        let cfg = RecalibrationConfig {
            p_primes: vec![1.0],
            ..Default::default()
        };
        assert!(update_var(&model, &data, &cfg).is_err());
    }
}
