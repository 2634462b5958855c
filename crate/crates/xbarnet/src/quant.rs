//! Symmetric per-layer 8-bit weight quantization.
//!
//! Each crossbar cell stores one signed 8-bit weight; the per-layer scale is
//! `max|w| / 127` with rounding half away from zero. An all-zero layer gets
//! scale 1 so the mapping stays invertible.

use crate::tensor::Tensor;

/// Quantized representation of one layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub values: Vec<i8>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

pub const QUANT_MAX: i32 = 127;

/// Per-layer scale: `max|w| / 127`, or 1 when every weight is zero.
pub fn layer_scale(weights: &Tensor) -> f64 {
    let max_abs = weights.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / QUANT_MAX as f64
    }
}

/// Round half away from zero, clamped to [-127, 127].
pub fn quantize_value(w: f64, scale: f64) -> i8 {
    let q = (w / scale).round();
    q.clamp(-(QUANT_MAX as f64), QUANT_MAX as f64) as i8
}

pub fn dequantize_value(q: i8, scale: f64) -> f64 {
    q as f64 * scale
}

pub fn quantize_tensor(weights: &Tensor) -> QuantizedWeights {
    let scale = layer_scale(weights);
    QuantizedWeights {
        values: weights
            .data()
            .iter()
            .map(|&w| quantize_value(w, scale))
            .collect(),
        scale,
        shape: weights.shape().to_vec(),
    }
}

pub fn dequantize_tensor(q: &QuantizedWeights) -> Tensor {
    let data = q
        .values
        .iter()
        .map(|&v| dequantize_value(v, q.scale))
        .collect();
    Tensor::from_vec(&q.shape, data).expect("shape preserved")
}
