use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compressed sparse row matrix. Column indices are sorted within each row
/// and no explicit zeros are stored (negative zero is dropped as well).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Compresses a rank-2 tensor (a vector is treated as a single row).
    pub fn from_dense(dense: &Tensor) -> Result<Self> {
        if dense.shape().len() > 2 {
            return Err(Error::invalid(format!(
                "compressed-row storage needs a matrix, got shape {:?}",
                dense.shape()
            )));
        }
        let (rows, cols) = (dense.rows(), dense.cols());
        if cols > u32::MAX as usize {
            return Err(Error::invalid("too many columns for 32-bit indices"));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for (c, &x) in dense.row(r).iter().enumerate() {
                if x != 0.0 {
                    col_idx.push(c as u32);
                    values.push(x);
                }
            }
            row_ptr.push(values.len());
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Format(format!("invalid sparse matrix: {msg}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("zero dimension");
        }
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[0] != 0 {
            return bad("row pointer length or origin");
        }
        if self.row_ptr[self.rows] != self.values.len() || self.col_idx.len() != self.values.len() {
            return bad("row pointer end does not match payload");
        }
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if a > b {
                return bad("row pointer decreases");
            }
            let cols = &self.col_idx[a..b];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad("column indices not strictly increasing");
            }
            if cols.last().is_some_and(|&c| c as usize >= self.cols) {
                return bad("column index out of range");
            }
        }
        if self.values.iter().any(|&v| v == 0.0) {
            return bad("explicit zero stored");
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let data = out.data_mut();
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                data[r * self.cols + self.col_idx[k] as usize] = self.values[k];
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sparse `A x`.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        self.spmv_rows(x, 0..self.rows, &mut out)?;
        Ok(out)
    }

    /// Rows `range` of `A x`, written to `out` (of length `range.len()`).
    pub fn spmv_rows(&self, x: &[f64], range: Range<usize>, out: &mut [f64]) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::Shape {
                op: "spmv",
                left: vec![self.rows, self.cols],
                right: vec![x.len()],
            });
        }
        if range.end > self.rows || out.len() != range.len() {
            return Err(Error::invalid("spmv row range out of bounds"));
        }
        for (o, r) in out.iter_mut().zip(range) {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *o = self.col_idx[a..b]
                .iter()
                .zip(&self.values[a..b])
                .map(|(&c, &v)| v * x[c as usize])
                .sum();
        }
        Ok(())
    }

    /// Row `r` scattered into a dense vector.
    pub fn dense_row(&self, r: usize) -> Result<Vec<f64>> {
        if r >= self.rows {
            return Err(Error::IndexOutOfRange {
                index: r,
                len: self.rows,
            });
        }
        let mut out = vec![0.0; self.cols];
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            out[self.col_idx[k] as usize] = self.values[k];
        }
        Ok(out)
    }

    /// On-disk payload size: row pointers as u64, column indices as u32,
    /// values as f64.
    pub fn storage_bytes(&self) -> usize {
        8 * (self.rows + 1) + 4 * self.nnz() + 8 * self.nnz()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_layout() {
        let d = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let s = SparseMatrix::from_dense(&d).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0]);
        assert_eq!(s.col_idx(), &[0, 1]);
        assert_eq!(s.row_ptr(), &[0, 1, 2]);
        assert_eq!(s.to_dense(), d);
    }

    #[test]
    fn all_zero_matrix() {
        let s = SparseMatrix::from_dense(&Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(s.nnz(), 0);
        assert_eq!(s.row_ptr(), &[0, 0, 0, 0]);
        assert_eq!(s.spmv(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_spmv() {
        let s = SparseMatrix::from_dense(&Tensor::identity(5)).unwrap();
        let x = [0.5, -1.0, 2.0, 3.5, 0.0];
        assert_eq!(s.spmv(&x).unwrap(), x.to_vec());
        assert!(s.spmv(&x[..4]).is_err());
    }

    #[test]
    fn validation_catches_corruption() {
        assert!(SparseMatrix::from_parts(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 2.0]).is_err());
        assert!(SparseMatrix::from_parts(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(SparseMatrix::from_parts(1, 3, vec![0, 1], vec![0], vec![0.0]).is_err());
        assert!(SparseMatrix::from_parts(2, 3, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(SparseMatrix::from_parts(1, 3, vec![0, 2], vec![0, 2], vec![1.0, 5.0]).is_ok());
    }

    #[test]
    fn storage_smaller_than_dense_when_sparse() {
        let d = Tensor::from_fn(&[40, 40], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let s = SparseMatrix::from_dense(&d).unwrap();
        assert!(s.storage_bytes() < 8 * d.len());
    }
}
