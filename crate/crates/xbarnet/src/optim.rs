//! SGD with classical momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Per-tensor velocity buffers, keyed by canonical tensor name.
#[derive(Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update: `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
    /// With momentum 0 this is exactly `w - lr * g`.
    pub fn step(&mut self, model: &mut Model, cfg: &SgdConfig) -> Result<()> {
        if cfg.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        for (name, tensor) in model.trainable_tensors_mut() {
            let n = tensor.len();
            let Some(grad) = tensor.grad() else {
                continue;
            };
            let grad = grad.to_vec();
            let velocity = self.velocity.entry(name).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i] + cfg.weight_decay * data[i];
                velocity[i] = cfg.momentum * velocity[i] + g;
                data[i] -= cfg.lr * velocity[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::net::{LayerKind, LayerSpec, NetworkSpec, SourceRef};
    use crate::tensor::Tensor;

    fn one_fc_model() -> Model {
        let net = NetworkSpec {
            input_shape: [1, 1, 2],
            layers: vec![LayerSpec {
                id: 0,
                kind: LayerKind::Fc {
                    in_features: 2,
                    out_features: 1,
                },
                inputs: vec![SourceRef::Input],
            }],
        };
        Model::init(net, 0).unwrap()
    }

    fn set_grad(model: &mut Model, g: &[f64]) {
        let t = model.tensor_mut("layer0.weight").unwrap();
        t.grad_mut().copy_from_slice(g);
    }

    #[test]
    fn plain_sgd_is_w_minus_lr_g() {
        let mut model = one_fc_model();
        let w0 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        set_grad(&mut model, &[0.5, -0.25]);
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        state.step(&mut model, &cfg).unwrap();
        let w1 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        assert_eq!(w1[0], w0[0] - 0.1 * 0.5);
        assert_eq!(w1[1], w0[1] - 0.1 * -0.25);
    }

    #[test]
    fn zero_grad_leaves_weights_unchanged() {
        let mut model = one_fc_model();
        let w0 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        set_grad(&mut model, &[0.0, 0.0]);
        let mut state = SgdState::new();
        state.step(&mut model, &SgdConfig::default()).unwrap();
        let w1 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        assert_eq!(w0, w1);
    }

    #[test]
    fn momentum_matches_two_step_recurrence() {
        // v1 = g1, w1 = w0 - lr*v1; v2 = mu*v1 + g2, w2 = w1 - lr*v2
        let mut model = one_fc_model();
        let w0 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        let (g1, g2) = (0.8, -0.3);
        let (lr, mu) = (0.05, 0.9);
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr,
            momentum: mu,
            weight_decay: 0.0,
        };
        set_grad(&mut model, &[g1, g1]);
        state.step(&mut model, &cfg).unwrap();
        set_grad(&mut model, &[g2, g2]);
        state.step(&mut model, &cfg).unwrap();
        let expected = {
            let v1 = g1;
            let w1 = w0[0] - lr * v1;
            let v2 = mu * v1 + g2;
            w1 - lr * v2
        };
        let w2 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        assert!((w2[0] - expected).abs() < 1e-15);
        assert!((w2[1] - (expected - w0[0] + w0[1])).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut model = one_fc_model();
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(state.step(&mut model, &cfg).is_err());
    }

    #[test]
    fn missing_grad_is_a_noop() {
        let mut model = one_fc_model();
        let w0 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        let mut state = SgdState::new();
        state.step(&mut model, &SgdConfig::default()).unwrap();
        let w1 = model.tensor_mut("layer0.weight").unwrap().data().to_vec();
        assert_eq!(w0, w1);
    }
}
