//! Batch normalization with explicit train/eval statistics handling.
//!
//! Train mode normalizes with biased batch statistics and folds them into the
//! running mean/variance via an exponential moving average. Eval mode reads
//! the running statistics and never mutates anything.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel layout of a normalized tensor: [N, C, plane] with plane = H*W
/// for spatial inputs and 1 for flat ones.
fn layout(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape() {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        other => Err(Error::ShapeMismatch {
            layer: "batchnorm".into(),
            detail: format!("expected [N,C,H,W] or [N,C], got {other:?}"),
        }),
    }
}

/// Backward context captured by a forward pass.
pub struct BnCtx {
    /// Normalized values before the affine transform, shaped like the input.
    xhat: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used by the forward pass.
    inv_std: Vec<f64>,
    /// Elements per channel in the normalization set.
    count: usize,
    /// True when batch statistics were used (train mode).
    batch_stats: bool,
}

fn check_channels(channels: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::ShapeMismatch {
            layer: "batchnorm".into(),
            detail: format!(
                "gamma/beta of {}/{} elements for {channels} channels",
                gamma.len(),
                beta.len()
            ),
        });
    }
    Ok(())
}

/// Per-channel batch statistics produced by a train-mode forward pass.
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Fold batch statistics into running ones:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn ema_update(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Train-mode forward: normalize with biased batch statistics. The caller
/// applies [`ema_update`] with the returned stats; keeping that step separate
/// leaves this function pure.
pub fn batchnorm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnCtx, BnBatchStats)> {
    let (n_batch, channels, plane) = layout(input)?;
    check_channels(channels, gamma, beta)?;
    let count = n_batch * plane;
    let idata = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = vec![0.0; idata.len()];
    let mut inv_std = vec![0.0; channels];
    let mut means = vec![0.0; channels];
    let mut vars = vec![0.0; channels];

    for c in 0..channels {
        let mut sum = 0.0;
        let mut sq_sum = 0.0;
        for n in 0..n_batch {
            let base = (n * channels + c) * plane;
            for k in 0..plane {
                let x = idata[base + k];
                sum += x;
                sq_sum += x * x;
            }
        }
        let mean = sum / count as f64;
        // Biased variance, floored at zero against rounding.
        let var = (sq_sum / count as f64 - mean * mean).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[c] = istd;
        means[c] = mean;
        vars[c] = var;

        let g = gamma.data()[c];
        let b = beta.data()[c];
        let odata = out.data_mut();
        for n in 0..n_batch {
            let base = (n * channels + c) * plane;
            for k in 0..plane {
                let xh = (idata[base + k] - mean) * istd;
                xhat[base + k] = xh;
                odata[base + k] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnCtx {
            xhat,
            inv_std,
            count,
            batch_stats: true,
        },
        BnBatchStats {
            mean: means,
            var: vars,
        },
    ))
}

/// Train-mode forward with the running-statistics update applied in place.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_update(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BnCtx)> {
    let (out, ctx, stats) = batchnorm_train(input, gamma, beta, eps)?;
    ema_update(running_mean, &stats.mean, momentum);
    ema_update(running_var, &stats.var, momentum);
    Ok((out, ctx))
}

/// Eval-mode forward: normalize with running statistics; pure.
pub fn batchnorm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor, BnCtx)> {
    let (n_batch, channels, plane) = layout(input)?;
    check_channels(channels, gamma, beta)?;
    let idata = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = vec![0.0; idata.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let istd = 1.0 / (running_var[c].max(0.0) + eps).sqrt();
        inv_std[c] = istd;
        let mean = running_mean[c];
        let g = gamma.data()[c];
        let b = beta.data()[c];
        let odata = out.data_mut();
        for n in 0..n_batch {
            let base = (n * channels + c) * plane;
            for k in 0..plane {
                let xh = (idata[base + k] - mean) * istd;
                xhat[base + k] = xh;
                odata[base + k] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnCtx {
            xhat,
            inv_std,
            count: n_batch * plane,
            batch_stats: false,
        },
    ))
}

/// Backward through either mode. Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    ctx: &BnCtx,
    input_shape: &[usize],
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n_batch, channels, plane) = match input_shape {
        [n, c, h, w] => (*n, *c, h * w),
        [n, c] => (*n, *c, 1usize),
        _ => unreachable!("ctx was built from a validated shape"),
    };
    let mut grad_in = Tensor::zeros(input_shape);
    let mut grad_gamma = Tensor::zeros(&[channels]);
    let mut grad_beta = Tensor::zeros(&[channels]);
    let go = grad_out.data();

    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..n_batch {
            let base = (n * channels + c) * plane;
            for k in 0..plane {
                let dy = go[base + k];
                sum_dy += dy;
                sum_dy_xhat += dy * ctx.xhat[base + k];
            }
        }
        grad_gamma.data_mut()[c] = sum_dy_xhat;
        grad_beta.data_mut()[c] = sum_dy;

        let g = gamma.data()[c];
        let istd = ctx.inv_std[c];
        let gi = grad_in.data_mut();
        if ctx.batch_stats {
            let inv_count = 1.0 / ctx.count as f64;
            for n in 0..n_batch {
                let base = (n * channels + c) * plane;
                for k in 0..plane {
                    let dy = go[base + k];
                    let xh = ctx.xhat[base + k];
                    gi[base + k] =
                        g * istd * (dy - sum_dy * inv_count - xh * sum_dy_xhat * inv_count);
                }
            }
        } else {
            // Running statistics are constants; the map is a pure affine scale.
            for n in 0..n_batch {
                let base = (n * channels + c) * plane;
                for k in 0..plane {
                    gi[base + k] = g * istd * go[base + k];
                }
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_identity_normalization() {
        // running mean 0, var 1, gamma 1, beta 0: output equals input up to eps
        let input = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (out, _) =
            batchnorm_eval(&input, &gamma, &beta, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_normalizes_to_zero_mean_unit_var() {
        let mut vals = Vec::new();
        for i in 0..64 {
            vals.push((i as f64) * 0.37 - 5.0);
        }
        let input = Tensor::from_vec(&[4, 1, 4, 4], vals).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (out, _) =
            batchnorm_train_update(&input, &gamma, &beta, &mut rm, &mut rv, 1e-6, 0.1).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        // running stats moved toward batch stats
        assert!(rm[0] != 0.0 && rv[0] != 1.0);
    }

    #[test]
    fn eval_calls_are_pure_and_repeatable() {
        let input = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::full(&[2], 1.5);
        let beta = Tensor::full(&[2], -0.5);
        let rm = vec![0.25, 0.5];
        let rv = vec![2.0, 3.0];
        let (a, _) = batchnorm_eval(&input, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        let (b, _) = batchnorm_eval(&input, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(rm, vec![0.25, 0.5]);
        assert_eq!(rv, vec![2.0, 3.0]);
    }

    #[test]
    fn zero_variance_is_clamped_not_divided() {
        let input = Tensor::full(&[4, 2], 3.0);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let (out, _) =
            batchnorm_train_update(&input, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}
