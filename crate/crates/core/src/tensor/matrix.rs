use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " ")?;
            f.debug_list()
                .entries(self.data.chunks(self.cols).map(|r| r.to_vec()))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("non-empty literal")
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Reproducible draw from N(mean, std²) using a ChaCha8 stream keyed by `seed`.
    pub fn seeded_gaussian(rows: usize, cols: usize, mean: f64, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::gaussian_from(rows, cols, mean, std, &mut rng)
    }

    pub fn gaussian_from<R: rand::Rng + ?Sized>(
        rows: usize,
        cols: usize,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        assert!(std >= 0.0 && std.is_finite(), "std must be finite and nonnegative");
        if std == 0.0 {
            return Self::filled(rows, cols, mean);
        }
        let normal = Normal::new(mean, std).expect("valid normal");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
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

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows into a new matrix, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Shape("cannot select zero rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Index(format!("row {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        // i-k-j order; zero entries of the left operand are skipped, which makes
        // one-hot inputs cheap.
        for i in 0..self.rows {
            let lhs = &self.data[i * self.cols..(i + 1) * self.cols];
            let acc = &mut out[i * n..(i + 1) * n];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs = &other.data[k * n..(k + 1) * n];
                for (o, &b) in acc.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "transposed matmul of ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for k in 0..self.rows {
            let lhs = self.row(k);
            let rhs = other.row(k);
            for (i, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let acc = &mut out[i * n..(i + 1) * n];
                for (o, &b) in acc.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul of {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lhs = self.row(i);
            for j in 0..n {
                out[i * n + j] = dot(lhs, other.row(j));
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    fn check_same(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, what)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product `Σ_ij x_ij y_ij`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same(other, "inner product")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-major vectorization, `vec(M)`.
    pub fn vec_col_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        out
    }

    /// Adds `value` to every diagonal entry of a square matrix.
    pub fn add_diagonal(&mut self, value: f64) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!("diagonal shift of non-square {}x{}", self.rows, self.cols)));
        }
        for i in 0..self.rows {
            self.data[i * self.cols + i] += value;
        }
        Ok(())
    }

    /// `max |M - Mᵀ|`, or infinity for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_times_m() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&Matrix::identity(2)).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(x.matmul(&y).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn zero_annihilates() {
        let m = Matrix::seeded_gaussian(3, 4, 0.0, 1.0, 1);
        assert_eq!(Matrix::zeros(2, 3).matmul(&m).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn shape_error_names_both_operands() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("by 2x3"), "{msg}");
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn gaussian_degenerate_and_repeatable() {
        assert_eq!(Matrix::seeded_gaussian(3, 3, 1.25, 0.0, 9), Matrix::filled(3, 3, 1.25));
        assert_eq!(
            Matrix::seeded_gaussian(4, 5, 0.0, 1.0, 42),
            Matrix::seeded_gaussian(4, 5, 0.0, 1.0, 42)
        );
        assert_ne!(
            Matrix::seeded_gaussian(4, 5, 0.0, 1.0, 42),
            Matrix::seeded_gaussian(4, 5, 0.0, 1.0, 43)
        );
    }

    #[test]
    fn gaussian_sample_mean_within_four_sigma() {
        let n = 100_000;
        let (mean, std) = (0.7, 2.0);
        let m = Matrix::seeded_gaussian(n, 1, mean, std, 2024);
        let sample_mean = m.sum() / n as f64;
        assert!((sample_mean - mean).abs() < 4.0 * std / (n as f64).sqrt());
    }

    #[test]
    fn column_major_vec() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(m.vec_col_major(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    fn arb_matrix(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn transpose_of_product(x in arb_matrix(3, 4), y in arb_matrix(4, 2)) {
            let lhs = x.matmul(&y).unwrap().transpose();
            let rhs = y.transpose().matmul(&x.transpose()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-14);
        }

        #[test]
        fn fused_transposed_products_agree(x in arb_matrix(5, 3), y in arb_matrix(5, 4), z in arb_matrix(2, 3)) {
            let a = x.t_matmul(&y).unwrap();
            let b = x.transpose().matmul(&y).unwrap();
            prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
            let c = x.matmul_t(&z).unwrap();
            let d = x.matmul(&z.transpose()).unwrap();
            prop_assert!(c.sub(&d).unwrap().max_abs() < 1e-14);
        }
    }
}
