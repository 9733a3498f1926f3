//! Sparse and banded kernels shared by the solvers.
//!
//! Matrices assembled on structured grids have a narrow band under the
//! natural node ordering, so direct factorizations are done in band storage.
//! `BandLu` is LU with partial pivoting (row interchanges are applied
//! progressively, LINPACK style), `BandCholesky` stores the upper factor `R`
//! with `R^T R = A`.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Lower and upper bandwidth of a sparse matrix.
pub fn bandwidth(a: &CsMat<f64>) -> (usize, usize) {
    let (mut kl, mut ku) = (0, 0);
    for (r, row) in a.outer_iterator().enumerate() {
        for (c, _) in row.iter() {
            if r > c {
                kl = kl.max(r - c);
            } else {
                ku = ku.max(c - r);
            }
        }
    }
    (kl, ku)
}

/// `y = A x` for real `A` and real `x`.
pub fn spmv(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.cols(), x.len());
    a.outer_iterator()
        .map(|row| row.iter().map(|(c, v)| v * x[c]).sum())
        .collect()
}

/// `y = A x` for real `A` and complex `x`.
pub fn spmv_c(a: &CsMat<f64>, x: &[Complex64]) -> Vec<Complex64> {
    debug_assert_eq!(a.cols(), x.len());
    a.outer_iterator()
        .map(|row| row.iter().map(|(c, v)| x[c] * *v).sum())
        .collect()
}

/// `x = A^T y` for real `A` and real `y`.
pub fn spmv_t(a: &CsMat<f64>, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.rows(), y.len());
    let mut x = vec![0.0; a.cols()];
    for (r, row) in a.outer_iterator().enumerate() {
        for (c, v) in row.iter() {
            x[c] += v * y[r];
        }
    }
    x
}

/// `x = A^T y` for real `A` and complex `y`.
pub fn spmv_t_c(a: &CsMat<f64>, y: &[Complex64]) -> Vec<Complex64> {
    debug_assert_eq!(a.rows(), y.len());
    let mut x = vec![Complex64::new(0.0, 0.0); a.cols()];
    for (r, row) in a.outer_iterator().enumerate() {
        for (c, v) in row.iter() {
            x[c] += y[r] * *v;
        }
    }
    x
}

/// Builds a CSR matrix from triplets, summing duplicates.
pub fn csr_from_triplets(
    rows: usize,
    cols: usize,
    triplets: impl IntoIterator<Item = (usize, usize, f64)>,
) -> CsMat<f64> {
    let mut tri = TriMat::new((rows, cols));
    for (r, c, v) in triplets {
        tri.add_triplet(r, c, v);
    }
    tri.to_csr()
}

pub fn to_dense(a: &CsMat<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.rows(), a.cols());
    for (r, row) in a.outer_iterator().enumerate() {
        for (c, v) in row.iter() {
            d[(r, c)] += *v;
        }
    }
    d
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm2_c(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// LU factorization with partial pivoting in band storage.
///
/// Row `r` keeps columns `r - kl ..= r + kl + ku`; the extra `kl` upper
/// diagonals hold fill from row interchanges.
#[derive(Debug, Clone)]
pub struct BandLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<T>,
    piv: Vec<usize>,
}

impl<T: ComplexField + Copy> BandLu<T> {
    /// Factorizes the `n x n` matrix given by `entries` (duplicates summed).
    pub fn factor(
        n: usize,
        kl: usize,
        ku: usize,
        entries: impl IntoIterator<Item = (usize, usize, T)>,
    ) -> Result<Self> {
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            data: vec![T::zero(); n * width],
            piv: vec![0; n],
        };
        for (r, c, v) in entries {
            if r >= n || c >= n || r > c + kl || c > r + ku {
                return Err(Error::InvalidInput(format!(
                    "entry ({r}, {c}) outside band (kl = {kl}, ku = {ku}, n = {n})"
                )));
            }
            let i = lu.idx(r, c);
            lu.data[i] += v;
        }
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width + (c + self.kl - r)
    }

    fn eliminate(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].modulus();
            for r in k + 1..=last_row {
                let v = self.data[self.idx(r, k)].modulus();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == nalgebra::zero::<T::RealField>() {
                return Err(Error::Singular { pivot: k });
            }
            self.piv[k] = p;
            if p != k {
                for c in k..=last_col {
                    let (a, b) = (self.idx(k, c), self.idx(p, c));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for r in k + 1..=last_row {
                let ir = self.idx(r, k);
                let l = self.data[ir] / pivot;
                self.data[ir] = l;
                if l == T::zero() {
                    continue;
                }
                let (row_k, row_r) = (k * self.width, r * self.width);
                // Same column c maps to offsets that differ by (r - k).
                let shift = r - k;
                for c in k + 1..=last_col {
                    let ok = c + kl - k;
                    let or = c + kl - r;
                    debug_assert_eq!(ok, or + shift);
                    let u = self.data[row_k + ok];
                    self.data[row_r + or] -= l * u;
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for r in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                b[r] -= self.data[self.idx(r, k)] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for c in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.data[self.idx(k, c)] * b[c];
            }
            b[k] = s / self.data[self.idx(k, k)];
        }
    }

    /// Solves `A^T x = b` in place (plain transpose, no conjugation).
    pub fn solve_transpose_in_place(&self, b: &mut [T]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        assert_eq!(b.len(), n);
        for k in 0..n {
            let mut s = b[k];
            for r in k.saturating_sub(kl + ku)..k {
                s -= self.data[self.idx(r, k)] * b[r];
            }
            b[k] = s / self.data[self.idx(k, k)];
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for r in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                s -= self.data[self.idx(r, k)] * b[r];
            }
            b[k] = s;
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_transpose(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x);
        x
    }
}

/// Upper band Cholesky factor `R` (`R^T R = A`) of a symmetric positive
/// definite matrix with half-bandwidth `kd`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    kd: usize,
    /// Row `r` holds `R[r, r..=r+kd]`.
    data: Vec<f64>,
}

impl BandCholesky {
    /// Factorizes a symmetric matrix; only the upper triangle of `a` is read.
    pub fn factor(a: &CsMat<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch {
                what: "Cholesky of non-square matrix",
                expected: n,
                got: a.cols(),
            });
        }
        let (kl, ku) = bandwidth(a);
        let kd = kl.max(ku);
        let w = kd + 1;
        let mut data = vec![0.0; n * w];
        for (r, row) in a.outer_iterator().enumerate() {
            for (c, v) in row.iter() {
                if c >= r {
                    data[r * w + (c - r)] += *v;
                }
            }
        }
        for k in 0..n {
            let lo = k.saturating_sub(kd);
            let mut d = data[k * w];
            for i in lo..k {
                let rik = data[i * w + (k - i)];
                d -= rik * rik;
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite);
            }
            let rkk = d.sqrt();
            data[k * w] = rkk;
            for c in k + 1..=(k + kd).min(n - 1) {
                let mut s = data[k * w + (c - k)];
                for i in c.saturating_sub(kd).max(lo)..k {
                    s -= data[i * w + (k - i)] * data[i * w + (c - i)];
                }
                data[k * w + (c - k)] = s / rkk;
            }
        }
        Ok(Self { n, kd, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn r(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.kd + 1) + (c - r)]
    }

    /// `R x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|r| {
                (r..=(r + self.kd).min(self.n - 1))
                    .map(|c| self.r(r, c) * x[c])
                    .sum()
            })
            .collect()
    }

    /// `R^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n);
        (0..self.n)
            .map(|c| {
                (c.saturating_sub(self.kd)..=c)
                    .map(|r| self.r(r, c) * y[r])
                    .sum()
            })
            .collect()
    }

    /// Solves `A x = b` with `A = R^T R`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = b.to_vec();
        for k in 0..n {
            let mut s = z[k];
            for i in k.saturating_sub(self.kd)..k {
                s -= self.r(i, k) * z[i];
            }
            z[k] = s / self.r(k, k);
        }
        for k in (0..n).rev() {
            let mut s = z[k];
            for c in k + 1..=(k + self.kd).min(n - 1) {
                s -= self.r(k, c) * z[c];
            }
            z[k] = s / self.r(k, k);
        }
        z
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for c in r..=(r + self.kd).min(self.n - 1) {
                d[(r, c)] = self.r(r, c);
            }
        }
        d
    }
}

/// Dense LU of a matrix and of its transpose.
#[derive(Debug, Clone)]
pub struct DenseLu {
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_t: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseLu {
    pub fn factor(a: DMatrix<Complex64>) -> Result<Self> {
        let lu_t = a.transpose().lu();
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular { pivot: 0 });
        }
        Ok(Self { lu, lu_t })
    }

    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let v = nalgebra::DVector::from_column_slice(b);
        self.lu.solve(&v).expect("invertible").as_slice().to_vec()
    }

    pub fn solve_transpose(&self, b: &[Complex64]) -> Vec<Complex64> {
        let v = nalgebra::DVector::from_column_slice(b);
        self.lu_t.solve(&v).expect("invertible").as_slice().to_vec()
    }
}
