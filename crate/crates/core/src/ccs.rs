//! Compressed column storage for sparse matrices, shared by the alignment
//! store and the pruned-weight inference path.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCcs<S: Scalar> {
    pub rows: usize,
    pub cols: usize,
    /// len cols + 1, monotone.
    pub col_ptr: Vec<usize>,
    /// Row index of each nonzero, grouped by column, ascending within one.
    pub row_idx: Vec<usize>,
    pub values: Vec<S>,
}

impl<S: Scalar> SparseCcs<S> {
    pub fn from_dense(dense: &Tensor<S>) -> SparseCcs<S> {
        let (r, c) = (dense.rows(), dense.cols());
        let mut col_ptr = vec![0usize; c + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..c {
            for i in 0..r {
                let v = dense.data()[i * c + j];
                if v != S::zero() {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr[j + 1] = row_idx.len();
        }
        SparseCcs {
            rows: r,
            cols: c,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor<S> {
        let mut out = vec![S::zero(); self.rows * self.cols];
        for j in 0..self.cols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[k] * self.cols + j] = self.values[k];
            }
        }
        Tensor::new(vec![self.rows, self.cols], out).unwrap()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = M x.
    pub fn matvec(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "ccs matvec: {} cols vs x of {}",
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![S::zero(); self.rows];
        for j in 0..self.cols {
            let xj = x[j];
            if xj == S::zero() {
                continue;
            }
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[k]] = y[self.row_idx[k]] + self.values[k] * xj;
            }
        }
        Ok(y)
    }

    /// out = A (r x cols_of_self-transposed?) — row-major dense A (m, rows)
    /// times this matrix viewed as (rows, cols): out (m, cols). Used for the
    /// sparse inference path where activations multiply weight matrices.
    pub fn left_matmul(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        if a.cols() != self.rows {
            return Err(Error::Shape(format!(
                "left_matmul: a has {} cols, matrix has {} rows",
                a.cols(),
                self.rows
            )));
        }
        let m = a.rows();
        let mut out = vec![S::zero(); m * self.cols];
        for j in 0..self.cols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[k];
                let v = self.values[k];
                for row in 0..m {
                    out[row * self.cols + j] =
                        out[row * self.cols + j] + a.data()[row * a.cols() + i] * v;
                }
            }
        }
        Tensor::new(vec![m, self.cols], out)
    }

    /// Bytes needed by this representation vs the dense equivalent, using the
    /// in-memory sizes of the value and index types.
    pub fn memory_report(&self) -> MemoryReport {
        let val = std::mem::size_of::<S>();
        let idx = std::mem::size_of::<usize>();
        MemoryReport {
            sparse_bytes: self.nnz() * (val + idx) + self.col_ptr.len() * idx,
            dense_bytes: self.rows * self.cols * val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub sparse_bytes: usize,
    pub dense_bytes: usize,
}
