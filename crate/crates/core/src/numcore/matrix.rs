use std::fmt;

use crate::error::{Error, Result};

/// Which vectors of a matrix an axis-wise operation acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row is one vector.
    Rows,
    /// Each column is one vector.
    Cols,
}

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadLength { len: data.len(), rows, cols });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self.rows, self.cols, other.cols, self, false, other, false, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch { op: "t_matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(self.cols, self.rows, other.cols, self, true, other, false, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch { op: "matmul_t", left: self.shape(), right: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(self.rows, self.cols, other.rows, self, false, other, true, &mut out);
        Ok(out)
    }

    /// Euclidean norm of each vector along `axis`.
    pub fn norms(&self, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::Rows => (0..self.rows)
                .map(|r| self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            Axis::Cols => {
                let mut acc = vec![0.0; self.cols];
                for r in 0..self.rows {
                    for (a, v) in acc.iter_mut().zip(self.row(r)) {
                        *a += v * v;
                    }
                }
                acc.into_iter().map(f64::sqrt).collect()
            }
        }
    }

    /// Scales each vector along `axis` to unit Euclidean norm. Vectors with
    /// norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&self, axis: Axis, eps: f64) -> Result<Matrix> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        let denom: Vec<f64> = self.norms(axis).into_iter().map(|n| n.max(eps)).collect();
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            match axis {
                Axis::Rows => row.iter_mut().for_each(|v| *v /= denom[r]),
                Axis::Cols => row.iter_mut().zip(&denom).for_each(|(v, d)| *v /= d),
            }
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &Matrix, a_t: bool, b: &Matrix, b_t: bool, c: &mut Matrix) {
    if m == 0 || n == 0 {
        return;
    }
    // (row stride, col stride) of the logical operand
    let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes were validated by the callers, strides describe the
    // row-major buffers exactly and `c` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = m.l2_normalize(Axis::Rows, 1e-12).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_column_unchanged() {
        let m = Matrix::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.l2_normalize(Axis::Cols, 1e-12).unwrap(), m);
    }

    #[test]
    fn random_columns_have_unit_norm() {
        let mut rng = crate::numcore::Rng::new(3);
        let m = Matrix::from_fn(8, 6, |_, _| rng.normal());
        let n = m.l2_normalize(Axis::Cols, 1e-12).unwrap();
        for c in 0..6 {
            let norm: f64 = (0..8).map(|r| n.get(r, c).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_vectors_scale_by_inverse_eps() {
        let m = Matrix::from_rows(&[[1e-14, 0.0], [3.0, 4.0]]).unwrap();
        let n = m.l2_normalize(Axis::Rows, 1e-12).unwrap();
        assert!((n.get(0, 0) - 1e-2).abs() < 1e-15);
        assert_eq!(n.get(0, 1), 0.0);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let m = Matrix::zeros(0, 3);
        assert!(matches!(m.l2_normalize(Axis::Rows, 1e-12), Err(Error::EmptyMatrix)));
        let m = Matrix::zeros(2, 0);
        assert!(matches!(m.l2_normalize(Axis::Cols, 1e-12), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = crate::numcore::Rng::new(11);
        let a = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let b = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let c = Matrix::from_fn(7, 3, |_, _| rng.normal());
        let tn = a.t_matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&b).unwrap()).unwrap() < 1e-12);
        let nt = a.matmul_t(&c).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&c.transpose()).unwrap()).unwrap() < 1e-12);
        let naive = Matrix::from_fn(5, 7, |i, j| (0..3).map(|k| a.get(i, k) * c.get(j, k)).sum());
        assert!(nt.max_abs_diff(&naive).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    }
}
