//! Dense row-major matrices and the scalar abstraction shared by the f32
//! training path and the f64 gradient-checking path.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

/// Floating-point scalar usable throughout the pipeline. Training runs in
/// f32; gradient checks require f64.
pub trait Scalar: Float + AddAssign + Sum + Debug + Default + 'static {
    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 -> scalar conversion")
    }

    /// Widening conversion (exact for both f32 and f64).
    fn as_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Row-major dense matrix. Vectors are represented as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from nested row slices (test convenience).
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        assert!(r > 0);
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row_vector(values: &[S]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise accumulate `self += other`.
    pub fn acc(&mut self, other: &Matrix<S>) {
        assert_eq!(self.shape(), other.shape(), "acc shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_in_place(&mut self, c: S) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    /// Convert element-wise through f64 (f32 -> f64 is exact).
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute element-wise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix<S>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Gather rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix<S> {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }
}

/// `c = a * b` for `a: n x m`, `b: m x p`. Plain ikj loop; deterministic
/// accumulation order (k ascending).
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension mismatch");
    let (n, m) = a.shape();
    let p = b.cols();
    let mut out = Matrix::zeros(n, p);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for k in 0..m {
            let aik = a_row[k];
            let b_row = b.row(k);
            for j in 0..p {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    out
}

/// `c = a * b^T` for `a: n x d`, `b: m x d`. Row-dot form.
pub fn matmul_nt<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    assert_eq!(a.cols(), b.cols(), "matmul_nt width mismatch");
    let n = a.rows();
    let m = b.rows();
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, cell) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = S::zero();
            for (x, y) in a_row.iter().zip(b_row) {
                acc += *x * *y;
            }
            *cell = acc;
        }
    }
    out
}

/// `c = a^T * b` for `a: n x m`, `b: n x p` (gradient-of-weights form).
pub fn matmul_tn<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    assert_eq!(a.rows(), b.rows(), "matmul_tn height mismatch");
    let n = a.rows();
    let m = a.cols();
    let p = b.cols();
    let mut out = Matrix::zeros(m, p);
    for k in 0..n {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for i in 0..m {
            let aki = a_row[i];
            let out_row = out.row_mut(i);
            for j in 0..p {
                out_row[j] += aki * b_row[j];
            }
        }
    }
    out
}
