//! Row-major dense matrices in f64, sized for reference computations and
//! emulated sharded execution, not for performance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Counts multiply-add work done by the dense kernels. A fused multiply-add
/// is two operations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    pub flops: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadDataLength { rows, cols, len: data.len() });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite { row: idx / cols.max(1), col: idx % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn uniformly from [-1, 1].
    pub fn random(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatrixError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MatrixError::BadDataLength { rows: rows.len(), cols, len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Stack vertically: rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.cols != other.cols {
            return Err(self.mismatch("vstack", other));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(DenseMatrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Columns [start, start+len) as a new matrix.
    pub fn col_slice(&self, start: usize, len: usize) -> DenseMatrix {
        assert!(start + len <= self.cols, "column slice out of range");
        DenseMatrix::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    /// Rows [start, start+len) as a new matrix.
    pub fn row_slice(&self, start: usize, len: usize) -> DenseMatrix {
        assert!(start + len <= self.rows, "row slice out of range");
        DenseMatrix::from_fn(len, self.cols, |r, c| self.get(start + r, c))
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn mismatch(&self, op: &'static str, rhs: &DenseMatrix) -> MatrixError {
        MatrixError::ShapeMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: rhs.rows,
            right_cols: rhs.cols,
        }
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        let mut ops = OpCounter::new();
        self.matmul_counted(rhs, &mut ops)
    }

    /// `self * rhs`, adding 2*m*k*n to the counter (the multiply-add count
    /// actually executed by the loops below).
    pub fn matmul_counted(
        &self,
        rhs: &DenseMatrix,
        ops: &mut OpCounter,
    ) -> Result<DenseMatrix, MatrixError> {
        if self.cols != rhs.rows {
            return Err(self.mismatch("matmul", rhs));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = rhs.row(p);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        ops.flops += 2 * (m as u64) * (k as u64) * (n as u64);
        Ok(out)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(self.mismatch("add", rhs));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(self.mismatch("sub", rhs));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, rhs: &DenseMatrix) -> Result<(), MatrixError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(self.mismatch("add_assign", rhs));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// max |a - b| over all entries; panics on shape mismatch.
    pub fn max_abs_diff(&self, rhs: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// max |a - b| relative to max |b|, with an absolute floor when b is all zeros.
pub fn relative_error(got: &DenseMatrix, want: &DenseMatrix) -> f64 {
    let scale = want.max_abs();
    let diff = got.max_abs_diff(want);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
