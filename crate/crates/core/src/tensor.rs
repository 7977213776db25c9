//! Dense row-major `f64` tensors and trainable parameter slots.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor (time axis for sequences).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor (channel axis for sequences).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.cols();
        &self.data[t * c..(t + 1) * c]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[t * c..(t + 1) * c]
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.cols() + c]
    }

    pub fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(contract(format!(
                "{what}: expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Copy with the time (row) axis reversed.
    pub fn reverse_rows(&self) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(c).rev() {
            data.extend_from_slice(chunk);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() || len == 0 {
            return Err(contract(format!(
                "row range {start}..{} outside 0..{}",
                start + len,
                self.rows()
            )));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl ParamTensor {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        ParamTensor {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
