//! `f64` row-major matrices used for activations and layer features.
//!
//! Checkpoints store `f32`, but forward passes and calibration run in `f64`
//! so that finite-difference probes of the merging coefficients see a smooth
//! loss surface.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        match t.dims() {
            [r, c] => Ok(Self {
                rows: *r,
                cols: *c,
                data: t.data().iter().map(|&v| f64::from(v)).collect(),
            }),
            _ => Err(TensorError::NotMatrix(t.shape().clone())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("matrix extents match data")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self · w + bias`, where `w` is `cols × out` row-major.
    pub fn affine(&self, w: &[f64], bias: &[f64]) -> Matrix {
        let out = bias.len();
        debug_assert_eq!(w.len(), self.cols * out);
        let mut res = Matrix::zeros(self.rows, out);
        for i in 0..self.rows {
            let x = self.row(i);
            let dst = res.row_mut(i);
            for (p, &xp) in x.iter().enumerate() {
                let wrow = &w[p * out..(p + 1) * out];
                for (d, &wv) in dst.iter_mut().zip(wrow) {
                    *d += xp * wv;
                }
            }
            for (d, &b) in dst.iter_mut().zip(bias) {
                *d += b;
            }
        }
        res
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
