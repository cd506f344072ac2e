use super::Real;
use crate::error::{Error, Result};

/// Dense `(batch, channels, length)` tensor in row-major order. Feature
/// matrices are stored as `(batch, features, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    /// Stacks equally long rows into a `(rows, 1, len)` tensor.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(Error::ShapeMismatch(format!("row of length {} among rows of {len}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new([rows.len(), 1, len], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Values of sample `b` (all channels).
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn row(&self, b: usize, c: usize) -> &[T] {
        let l = self.shape[2];
        let start = (b * self.shape[1] + c) * l;
        &self.data[start..start + l]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let l = self.shape[2];
        let start = (b * self.shape[1] + c) * l;
        &mut self.data[start..start + l]
    }

    pub fn reshape(self, shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, self.data)
    }
}
