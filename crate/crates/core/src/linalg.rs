//! Dense row-major matrices and the handful of kernels the rest of the crate
//! needs: products, a Cholesky factorization, and the exact GELU.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{shape_err, Error, Result};

/// Dense double-precision matrix stored row-major. Vectors are `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "matrix entry",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Construct without the finiteness scan; callers guarantee the length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Column vector.
    pub fn column(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::from_raw(n, 1, v)
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &x) in d.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
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

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i * self.cols + j] = x;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape_err("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Aᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(shape_err("matvec_t", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{} rows", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        Ok(out)
    }

    /// `A Aᵀ`, exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let m = self.rows;
        let mut g = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                g.data[i * m + j] = v;
                g.data[j * m + i] = v;
            }
        }
        g
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`. Only the lower triangle of
/// the input is read.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor an SPD matrix; a pivot `<= 0` is reported with its index.
    pub fn factor(a: &Matrix) -> Result<Self> {
        Self::factor_with_threshold(a, 0.0)
    }

    /// Factor, rejecting any pivot (diagonal entry before the square root)
    /// that is `<= min_pivot`.
    pub fn factor_with_threshold(a: &Matrix, min_pivot: f64) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(shape_err("cholesky", format!("{n}x{n}"), format!("{n}x{}", a.cols())));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > min_pivot) {
                return Err(Error::Singular { index: j, pivot: d });
            }
            let ljj = d.sqrt();
            l[j * n + j] = ljj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest pivot `L_ii²`.
    pub fn min_pivot(&self) -> f64 {
        (0..self.n)
            .map(|i| self.l[i * self.n + i].powi(2))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn factor_matrix(&self) -> Matrix {
        Matrix::from_raw(self.n, self.n, self.l.clone())
    }

    /// Solve `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(shape_err("cholesky solve", self.n, b.len()));
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    /// Solve `A X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.n {
            return Err(shape_err("cholesky solve", format!("{} rows", self.n), b.rows()));
        }
        let k = b.cols();
        let mut x = Matrix::zeros(self.n, k);
        let mut col = vec![0.0; self.n];
        for j in 0..k {
            for i in 0..self.n {
                col[i] = b.get(i, j);
            }
            self.solve_in_place(&mut col);
            for i in 0..self.n {
                x.set(i, j, col[i]);
            }
        }
        Ok(x)
    }
}

/// Solve `A X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a)?.solve(b)
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// `d/dx gelu(x) = Φ(x) + x φ(x)`
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    norm_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_bad_lengths_and_nan() {
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(Error::Shape { .. })));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn matvec_hand_case() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(w.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(w.matvec_t(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
        assert!(w.matvec(&[1.0]).is_err());
    }

    #[test]
    fn cholesky_examples() {
        let x = cholesky_solve(&Matrix::identity(3), &Matrix::column(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, -2.0, 3.0]);

        let x = cholesky_solve(&Matrix::diagonal(&[4.0]), &Matrix::column(vec![2.0])).unwrap();
        assert_eq!(x.as_slice(), &[0.5]);

        let a = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap();
        let x = cholesky_solve(&a, &Matrix::column(vec![2.0, 1.0])).unwrap();
        assert_abs_diff_eq!(x.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(x.get(1, 0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        match Cholesky::factor(&a) {
            Err(Error::Singular { index, pivot }) => {
                assert_eq!(index, 1);
                assert_abs_diff_eq!(pivot, -3.0, epsilon = 1e-14);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(50.0), 50.0, epsilon = 1e-12);
        // Independent erf from statrs, which is itself good to about 1e-11.
        let expected = 0.5 * (1.0 + statrs::function::erf::erf(1.0 / 2f64.sqrt()));
        assert_abs_diff_eq!(gelu(1.0), expected, epsilon = 1e-10);
        assert_abs_diff_eq!(gelu(1.0), 0.841344746068543, epsilon = 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-9);
        }
    }
}
