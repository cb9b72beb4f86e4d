//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Kept deliberately small: the model is desk-scale, so plain loops over
//! contiguous slices (which LLVM auto-vectorizes) beat pulling in a BLAS.

use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S> Matrix<S> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        assert!(rows.iter().all(|v| v.len() == c), "ragged rows");
        Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill(&mut self, v: S)
    where
        S: Copy,
    {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { S::one() } else { S::zero() })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix<S> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&mut self, a: S) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn add_assign(&mut self, other: &Matrix<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// self += a * other
    pub fn add_scaled(&mut self, a: S, other: &Matrix<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * *y;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map_to<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::cast(x.as_f64())).collect(),
        }
    }

    /// C = A * B^T. A: n*k, B: m*k -> n*m. Row-dot-row, the layout both the
    /// linear layers (X W^T) and attention scores (Q K^T) want.
    pub fn matmul_nt(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dim");
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, b.row(j));
            }
        }
        out
    }

    /// C = A * B. A: n*k, B: k*m -> n*m.
    pub fn matmul_nn(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, b.rows, "matmul_nn inner dim");
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                axpy(a_ik, b.row(k), out_row);
            }
        }
        out
    }

    /// C += A^T * B. A: k*n, B: k*m -> accumulates into n*m.
    /// This is the gradient accumulation pattern dW += dY^T X.
    pub fn acc_matmul_tn(&self, b: &Matrix<S>, out: &mut Matrix<S>) {
        assert_eq!(self.rows, b.rows, "acc_matmul_tn outer dim");
        assert_eq!((out.rows, out.cols), (self.cols, b.cols));
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = b.row(k);
            for (i, &a_ki) in a_row.iter().enumerate() {
                axpy(a_ki, b_row, out.row_mut(i));
            }
        }
    }

    /// y = W x for column vector x (W: rows*cols, x: cols).
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.cols, x.len(), "matvec dim");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// y = W^T x (W: rows*cols, x: rows) -> cols.
    pub fn matvec_t(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.rows, x.len(), "matvec_t dim");
        let mut y = vec![S::zero(); self.cols];
        for (k, &xk) in x.iter().enumerate() {
            axpy(xk, self.row(k), &mut y);
        }
        y
    }

    /// out += x y^T (outer product accumulate).
    pub fn acc_outer(&mut self, x: &[S], y: &[S]) {
        assert_eq!((self.rows, self.cols), (x.len(), y.len()));
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, y, self.row_mut(i));
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// y += a * x
#[inline]
pub fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

pub fn norm2<S: Scalar>(x: &[S]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

pub fn add_vec<S: Scalar>(a: &mut [S], b: &[S]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += *y;
    }
}

/// In-place stable softmax over the first `active` entries of a row; the
/// remainder is zeroed. Returns nothing; caller slices rows.
pub fn softmax_inplace<S: Scalar>(row: &mut [S], active: usize) {
    debug_assert!(active >= 1 && active <= row.len());
    let mut max = row[0];
    for &v in &row[..active] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row[..active].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row[..active].iter_mut() {
        *v *= inv;
    }
    for v in row[active..].iter_mut() {
        *v = S::zero();
    }
}

/// log softmax of a full row, out-of-place, in f64 for score accounting.
pub fn log_softmax_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let logsum = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - logsum).collect()
}
