//! Per-layer forward and backward math.
//!
//! All functions take batched tensors ([N, C, H, W] for spatial layers,
//! [N, F] for flat ones) and are plain deterministic loops over row-major
//! slices. Zero weights contribute nothing and are skipped, which also makes
//! masked or fault-zeroed kernels cheap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn shape_err(layer: &str, detail: String) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        detail,
    }
}

pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Valid output index range along one spatial axis for a fixed kernel tap,
/// such that `i*stride + tap - padding` lands inside `[0, input_extent)`.
fn tap_range(
    out_extent: usize,
    input_extent: usize,
    stride: usize,
    padding: usize,
    tap: usize,
) -> (usize, usize) {
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    let hi = if input_extent + padding > tap {
        (((input_extent + padding - tap - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Direct convolution (cross-correlation): for each output channel m,
/// `O[n,m,i,j] = sum over c,ki,kj of I[n,c,i*s+ki-p, j*s+kj-p] * W[m,c,ki,kj]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (s, p, g) = (geom.stride, geom.padding, geom.groups);
    let ishape = input.shape();
    let wshape = weights.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected 4-d input/weights, got {ishape:?} / {wshape:?}"),
        ));
    }
    let (n_batch, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (m_out, c_per_group, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if k != k2 {
        return Err(shape_err("conv2d", format!("kernel must be square, got {k}x{k2}")));
    }
    if g == 0 || c_in % g != 0 || m_out % g != 0 || c_in / g != c_per_group {
        return Err(shape_err(
            "conv2d",
            format!("weights {wshape:?} incompatible with {c_in} input channels in {g} group(s)"),
        ));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(shape_err(
            "conv2d",
            format!("kernel {k} exceeds padded input {h}x{w} (pad {p})"),
        ));
    }
    let h_out = (h + 2 * p - k) / s + 1;
    let w_out = (w + 2 * p - k) / s + 1;
    let m_per_group = m_out / g;

    let mut out = Tensor::zeros(&[n_batch, m_out, h_out, w_out]);
    let idata = input.data();
    let wdata = weights.data();
    let odata = out.data_mut();

    for n in 0..n_batch {
        for grp in 0..g {
            for m_loc in 0..m_per_group {
                let m = grp * m_per_group + m_loc;
                let o_base = (n * m_out + m) * h_out * w_out;
                for c_loc in 0..c_per_group {
                    let c = grp * c_per_group + c_loc;
                    let i_base = (n * c_in + c) * h * w;
                    let w_base = (m * c_per_group + c_loc) * k * k;
                    for ki in 0..k {
                        let (ilo, ihi) = tap_range(h_out, h, s, p, ki);
                        for kj in 0..k {
                            let wv = wdata[w_base + ki * k + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let (jlo, jhi) = tap_range(w_out, w, s, p, kj);
                            for i in ilo..ihi {
                                let in_row = i_base + (i * s + ki - p) * w;
                                let out_row = o_base + i * w_out;
                                for j in jlo..jhi {
                                    odata[out_row + j] += wv * idata[in_row + j * s + kj - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to input and weights.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let (s, p, g) = (geom.stride, geom.padding, geom.groups);
    let ishape = input.shape();
    let wshape = weights.shape();
    let oshape = grad_out.shape();
    let (n_batch, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (m_out, c_per_group, k) = (wshape[0], wshape[1], wshape[2]);
    let (h_out, w_out) = (oshape[2], oshape[3]);
    if oshape[0] != n_batch || oshape[1] != m_out {
        return Err(shape_err(
            "conv2d",
            format!("upstream gradient {oshape:?} does not match output of {wshape:?}"),
        ));
    }
    let m_per_group = m_out / g;

    let mut grad_in = Tensor::zeros(ishape);
    let mut grad_w = Tensor::zeros(wshape);
    let idata = input.data();
    let wdata = weights.data();
    let godata = grad_out.data();
    let gidata = grad_in.data_mut();
    let gwdata = grad_w.data_mut();

    for n in 0..n_batch {
        for grp in 0..g {
            for m_loc in 0..m_per_group {
                let m = grp * m_per_group + m_loc;
                let o_base = (n * m_out + m) * h_out * w_out;
                for c_loc in 0..c_per_group {
                    let c = grp * c_per_group + c_loc;
                    let i_base = (n * c_in + c) * h * w;
                    let w_base = (m * c_per_group + c_loc) * k * k;
                    for ki in 0..k {
                        let (ilo, ihi) = tap_range(h_out, h, s, p, ki);
                        for kj in 0..k {
                            let (jlo, jhi) = tap_range(w_out, w, s, p, kj);
                            let wv = wdata[w_base + ki * k + kj];
                            let mut acc = 0.0;
                            for i in ilo..ihi {
                                let in_row = i_base + (i * s + ki - p) * w;
                                let out_row = o_base + i * w_out;
                                for j in jlo..jhi {
                                    let go = godata[out_row + j];
                                    acc += go * idata[in_row + j * s + kj - p];
                                    if wv != 0.0 {
                                        gidata[in_row + j * s + kj - p] += wv * go;
                                    }
                                }
                            }
                            gwdata[w_base + ki * k + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad_in = Tensor::zeros(input.shape());
    let gi = grad_in.data_mut();
    for (idx, (&x, &go)) in input.data().iter().zip(grad_out.data()).enumerate() {
        if x > 0.0 {
            gi[idx] = go;
        }
    }
    grad_in
}

pub fn avgpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let ishape = input.shape();
    let (n_batch, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    if kernel > h || kernel > w {
        return Err(shape_err(
            "avgpool",
            format!("pool kernel {kernel} exceeds input {h}x{w}"),
        ));
    }
    let h_out = (h - kernel) / stride + 1;
    let w_out = (w - kernel) / stride + 1;
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = Tensor::zeros(&[n_batch, c, h_out, w_out]);
    let idata = input.data();
    let odata = out.data_mut();
    for nc in 0..n_batch * c {
        let i_base = nc * h * w;
        let o_base = nc * h_out * w_out;
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = 0.0;
                for ki in 0..kernel {
                    let row = i_base + (i * stride + ki) * w + j * stride;
                    for kj in 0..kernel {
                        acc += idata[row + kj];
                    }
                }
                odata[o_base + i * w_out + j] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let oshape = grad_out.shape();
    let (h_out, w_out) = (oshape[2], oshape[3]);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    let go = grad_out.data();
    for nc in 0..input_shape[0] * input_shape[1] {
        let i_base = nc * h * w;
        let o_base = nc * h_out * w_out;
        for i in 0..h_out {
            for j in 0..w_out {
                let g = go[o_base + i * w_out + j] * inv;
                for ki in 0..kernel {
                    let row = i_base + (i * stride + ki) * w + j * stride;
                    for kj in 0..kernel {
                        gi[row + kj] += g;
                    }
                }
            }
        }
    }
    grad_in
}

/// Fully connected: `O[n,o] = sum_i I[n,i] * W[o,i] + b[o]`. The input may be
/// any shape with `numel / batch == in_features`; it is read as flattened.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_batch = input.shape()[0];
    let in_features = input.len() / n_batch;
    let (out_features, w_in) = (weights.shape()[0], weights.shape()[1]);
    if w_in != in_features || bias.len() != out_features {
        return Err(shape_err(
            "fc",
            format!(
                "weights {:?} / bias {:?} incompatible with {in_features} input features",
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(&[n_batch, out_features]);
    let idata = input.data();
    let wdata = weights.data();
    let bdata = bias.data();
    let odata = out.data_mut();
    for n in 0..n_batch {
        let irow = &idata[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            let wrow = &wdata[o * in_features..(o + 1) * in_features];
            let mut acc = bdata[o];
            for i in 0..in_features {
                acc += irow[i] * wrow[i];
            }
            odata[n * out_features + o] = acc;
        }
    }
    Ok(out)
}

/// Returns (grad_input flattened to the original input shape, grad_weights, grad_bias).
pub fn fc_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n_batch = input.shape()[0];
    let in_features = input.len() / n_batch;
    let out_features = weights.shape()[0];
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[out_features]);
    let idata = input.data();
    let wdata = weights.data();
    let godata = grad_out.data();
    {
        let gi = grad_in.data_mut();
        let gw = grad_w.data_mut();
        let gb = grad_b.data_mut();
        for n in 0..n_batch {
            let irow = &idata[n * in_features..(n + 1) * in_features];
            let girow = &mut gi[n * in_features..(n + 1) * in_features];
            for o in 0..out_features {
                let g = godata[n * out_features + o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let wrow = &wdata[o * in_features..(o + 1) * in_features];
                let gwrow = &mut gw[o * in_features..(o + 1) * in_features];
                for i in 0..in_features {
                    gwrow[i] += g * irow[i];
                    girow[i] += g * wrow[i];
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "residual_add",
            format!("branch shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.clear_grad();
    for (v, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *v += bv;
    }
    Ok(out)
}

/// Softmax cross-entropy over logits [N, C] with integer labels.
/// Returns (mean loss, probabilities [N, C]).
pub fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n_batch = logits.shape()[0];
    let classes = logits.shape()[1];
    if labels.len() != n_batch {
        return Err(shape_err(
            "softmax_xent",
            format!("{} labels for batch of {n_batch}", labels.len()),
        ));
    }
    let mut probs = Tensor::zeros(&[n_batch, classes]);
    let zdata = logits.data();
    let pdata = probs.data_mut();
    let mut loss = 0.0;
    for n in 0..n_batch {
        let row = &zdata[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        if labels[n] >= classes {
            return Err(shape_err(
                "softmax_xent",
                format!("label {} out of range for {classes} classes", labels[n]),
            ));
        }
        loss -= row[labels[n]] - max - log_denom;
        for (c, &z) in row.iter().enumerate() {
            pdata[n * classes + c] = (z - max - log_denom).exp();
        }
    }
    Ok((loss / n_batch as f64, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let n_batch = probs.shape()[0];
    let classes = probs.shape()[1];
    let mut grad = probs.clone();
    grad.clear_grad();
    let scale = 1.0 / n_batch as f64;
    let g = grad.data_mut();
    for n in 0..n_batch {
        for c in 0..classes {
            let onehot = if c == labels[n] { 1.0 } else { 0.0 };
            g[n * classes + c] = (g[n * classes + c] - onehot) * scale;
        }
    }
    grad
}

/// Row-wise argmax of logits [N, C].
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n_batch = logits.shape()[0];
    let classes = logits.shape()[1];
    let data = logits.data();
    (0..n_batch)
        .map(|n| {
            let row = &data[n * classes..(n + 1) * classes];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
