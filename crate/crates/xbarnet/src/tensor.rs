//! Dense row-major f64 tensor with an optional gradient buffer.
//!
//! This is the single value type flowing through the engine: layer inputs,
//! activations, and weights. Training math stays in 64-bit floats; 8-bit
//! quantization happens only when weights are mapped onto crossbar cells.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                layer: "tensor".into(),
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Gradient slot, allocating a zeroed buffer on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Hard error on NaN/Inf anywhere in the value buffer.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn index4(&self, d0: usize, d1: usize, d2: usize, d3: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((d0 * self.shape[1] + d1) * self.shape[2] + d2) * self.shape[3] + d3
    }

    pub fn at4(&self, d0: usize, d1: usize, d2: usize, d3: usize) -> f64 {
        self.data[self.index4(d0, d1, d2, d3)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_matches_shape() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.grad_mut()[3] = 1.0;
        assert_eq!(t.grad().unwrap().len(), t.len());
    }

    #[test]
    fn finite_check_fails_on_nan() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.check_finite("bad").is_err());
    }

    #[test]
    fn row_major_index4() {
        let t = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.index4(0, 0, 0, 0), 0);
        assert_eq!(t.index4(0, 0, 0, 1), 1);
        assert_eq!(t.index4(0, 0, 1, 0), 5);
        assert_eq!(t.index4(0, 1, 0, 0), 20);
        assert_eq!(t.index4(1, 0, 0, 0), 60);
        assert_eq!(t.index4(1, 2, 3, 4), 119);
    }
}
