//! Minimal dense 4-d tensor in NCHW layout, 32-bit floats throughout.

use crate::error::{EspnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f32>,
    dims: (usize, usize, usize, usize),
}

impl Tensor4 {
    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        let len = dims.0 * dims.1 * dims.2 * dims.3;
        Tensor4 {
            data: vec![0.0; len],
            dims,
        }
    }

    pub fn from_vec(data: Vec<f32>, dims: (usize, usize, usize, usize)) -> Result<Self> {
        let expected = dims.0 * dims.1 * dims.2 * dims.3;
        if data.len() != expected {
            return Err(EspnError::Shape {
                layer: "tensor".into(),
                expected: format!("{expected} elements for dims {dims:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor4 { data, dims })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims.0
    }

    pub fn channels(&self) -> usize {
        self.dims.1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let (_, ch, hh, ww) = self.dims;
        self.data[((n * ch + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let (_, ch, hh, ww) = self.dims;
        self.data[((n * ch + c) * hh + h) * ww + w] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor4::from_vec(vec![0.0; 5], (1, 1, 2, 2)).is_err());
    }

    #[test]
    fn indexing_is_nchw() {
        let mut t = Tensor4::zeros((2, 3, 4, 5));
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
        assert_eq!(t.data()[2 * 3 * 4 * 5 - 1], 7.0);
    }
}
