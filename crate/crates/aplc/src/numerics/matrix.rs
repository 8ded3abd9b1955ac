//! Row-major matrix type and the matmul kernels the engine is built from.

use super::{add_flops, NumericsError, Scalar};
use crate::corpus::SparseVector;
use crate::parallel::for_each_row;
use crate::rng::SplitMix64;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64((rng.next_f64() * 2.0 - 1.0) * bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map over rows, parallel when enabled.
    pub fn map_inplace<F>(&mut self, f: F)
    where
        F: Fn(T) -> T + Sync + Send,
    {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        for_each_row(&mut self.data, self.cols, |_, row| {
            for v in row {
                *v = f(*v);
            }
        });
    }

    pub fn scale(&mut self, s: T) {
        self.map_inplace(|v| v * s);
    }

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<(), NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err("add_assign", self, other));
        }
        if self.cols == 0 {
            return Ok(());
        }
        let cols = self.cols;
        let other_data = &other.data;
        for_each_row(&mut self.data, cols, |i, row| {
            let o = &other_data[i * cols..(i + 1) * cols];
            for (a, b) in row.iter_mut().zip(o) {
                *a += *b;
            }
        });
        Ok(())
    }

    /// Cast every entry through f64 into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.widen())).collect(),
        }
    }
}

fn shape_err<T>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// C = A * B. Counts 2 * m * k * n FLOPs.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    add_flops(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let a_data = &a.data;
    let b_data = &b.data;
    for_each_row(&mut out.data, n, |i, out_row| {
        let a_row = &a_data[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == T::zero() {
                continue;
            }
            let b_row = &b_data[kk * n..(kk + 1) * n];
            for (o, &b_kn) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kn;
            }
        }
    });
    Ok(out)
}

/// C = A^T * B, with A and B sharing their row count. Counts 2 * k * m * n
/// FLOPs (k = shared rows). Used for weight gradients dW = X^T * dY.
pub fn matmul_at_b<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_at_b", a, b));
    }
    add_flops(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
    let (shared, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let a_data = &a.data;
    let b_data = &b.data;
    for_each_row(&mut out.data, n, |i, out_row| {
        for r in 0..shared {
            let a_ri = a_data[r * m + i];
            if a_ri == T::zero() {
                continue;
            }
            let b_row = &b_data[r * n..(r + 1) * n];
            for (o, &b_rn) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * b_rn;
            }
        }
    });
    Ok(out)
}

/// C = A * B^T, with A and B sharing their column count. Counts
/// 2 * m * k * n FLOPs. Used for input gradients dX = dY * W^T.
pub fn matmul_a_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_a_bt", a, b));
    }
    add_flops(2 * a.rows as u64 * a.cols as u64 * b.rows as u64);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let a_data = &a.data;
    let b_data = &b.data;
    for_each_row(&mut out.data, n, |i, out_row| {
        let a_row = &a_data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b_data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    });
    Ok(out)
}

/// Row b of the output is sum of value * W[index, :] over the sparse entries
/// of batch sample b. Counts 2 * nnz * W.cols FLOPs.
pub fn sparse_dense_matmul<T: Scalar>(
    batch: &[SparseVector],
    w: &Matrix<T>,
) -> Result<Matrix<T>, NumericsError> {
    let mut nnz = 0u64;
    for x in batch {
        for &i in x.indices() {
            if i as usize >= w.rows {
                return Err(NumericsError::SparseIndexOutOfRange {
                    index: i,
                    rows: w.rows,
                });
            }
        }
        nnz += x.nnz() as u64;
    }
    add_flops(2 * nnz * w.cols as u64);
    let cols = w.cols;
    let mut out = Matrix::zeros(batch.len(), cols);
    if cols == 0 || batch.is_empty() {
        return Ok(out);
    }
    let w_data = &w.data;
    for_each_row(&mut out.data, cols, |b, out_row| {
        let x = &batch[b];
        for (&i, &v) in x.indices().iter().zip(x.values()) {
            let v = T::from_f64(v as f64);
            let w_row = &w_data[i as usize * cols..(i as usize + 1) * cols];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += v * wv;
            }
        }
    });
    Ok(out)
}
