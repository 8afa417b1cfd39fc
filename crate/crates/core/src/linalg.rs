//! Small dense linear algebra: row-major matrices, a cyclic Jacobi symmetric
//! eigensolver and an LU solver. Sizes in this crate are tens to a few
//! hundred, so nothing here is blocked or vectorised.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from a row-major buffer. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// Outer product `v vᵀ`.
    pub fn outer(v: &[T]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j])
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) / T::lit(2.0)
        })
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `D A D` for a diagonal `D = diag(d)`.
    pub fn scale_sym(&self, d: &[T]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| d[i] * self[(i, j)] * d[j])
    }

    /// Sample covariance of the columns (rows are observations), `n − 1`
    /// denominator.
    pub fn column_covariance(&self) -> Self {
        let (n, k) = (self.rows, self.cols);
        let mut mu = vec![T::zero(); k];
        for i in 0..n {
            for (m, &x) in mu.iter_mut().zip(self.row(i)) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= T::from_len(n));
        let mut c = Self::zeros(k, k);
        for i in 0..n {
            let r = self.row(i);
            for a in 0..k {
                let da = r[a] - mu[a];
                for b in a..k {
                    c[(a, b)] += da * (r[b] - mu[b]);
                }
            }
        }
        let denom = T::from_len(n.saturating_sub(1).max(1));
        for a in 0..k {
            for b in a..k {
                let v = c[(a, b)] / denom;
                c[(a, b)] = v;
                c[(b, a)] = v;
            }
        }
        c
    }

    /// Correlation matrix implied by a covariance-like matrix. Zero diagonals
    /// map to unit diagonal with zero off-diagonals.
    pub fn to_correlation(&self) -> Self {
        let inv: Vec<T> = self
            .diag()
            .into_iter()
            .map(|v| if v > T::zero() { T::one() / v.sqrt() } else { T::zero() })
            .collect();
        let mut r = self.scale_sym(&inv);
        for i in 0..self.rows {
            r[(i, i)] = T::one();
        }
        r
    }

    /// Symmetric eigendecomposition; see [`SymEigen`].
    pub fn sym_eigen(&self) -> Result<SymEigen<T>> {
        SymEigen::new(self)
    }

    pub fn min_eigenvalue(&self) -> Result<T> {
        Ok(self.sym_eigen()?.values[0])
    }

    /// Solves `A x = b` by LU with partial pivoting.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        if !self.is_square() || b.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                actual: b.len(),
            });
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let scale = self.max_abs().max(T::min_positive_value());
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[piv * n + col].abs() {
                    piv = r;
                }
            }
            if a[piv * n + col].abs() <= scale * T::epsilon() {
                return Err(Error::Numerical("singular matrix in solve".into()));
            }
            if piv != col {
                for k in 0..n {
                    a.swap(piv * n + k, col * n + k);
                }
                x.swap(piv, col);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == T::zero() {
                    continue;
                }
                for k in col..n {
                    let v = a[col * n + k];
                    a[r * n + k] -= f * v;
                }
                let xv = x[col];
                x[r] -= f * xv;
            }
        }
        for col in (0..n).rev() {
            let mut s = x[col];
            for k in col + 1..n {
                s -= a[col * n + k] * x[k];
            }
            x[col] = s / a[col * n + col];
        }
        Ok(x)
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix, or
    /// `None` when the factorisation breaks down.
    pub fn cholesky(&self) -> Option<Self> {
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut s = self[(j, j)];
            for k in 0..j {
                s -= l[(j, k)] * l[(j, k)];
            }
            if !(s > T::zero()) {
                return None;
            }
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(l)
    }

    /// `(ln|A|, zᵀA⁻¹z)` for symmetric positive-definite `A`.
    pub fn spd_logdet_quad(&self, z: &[T]) -> Option<(T, T)> {
        let l = self.cholesky()?;
        let n = self.rows;
        let mut y = vec![T::zero(); n];
        let mut quad = T::zero();
        let mut logdet = T::zero();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
            quad += y[i] * y[i];
            logdet += l[(i, i)].ln();
        }
        Some((logdet * T::lit(2.0), quad))
    }

    /// Log-determinant and inverse of a symmetric positive-definite matrix via
    /// Cholesky. Returns `None` when the factorisation breaks down.
    pub fn spd_logdet_inverse(&self) -> Option<(T, Self)> {
        let n = self.rows;
        let l = self.cholesky()?;
        let logdet = (0..n).map(|i| l[(i, i)].ln()).sum::<T>() * T::lit(2.0);
        // invert L then form L⁻ᵀ L⁻¹
        let mut linv = Self::zeros(n, n);
        for i in 0..n {
            linv[(i, i)] = T::one() / l[(i, i)];
            for j in 0..i {
                let mut s = T::zero();
                for k in j..i {
                    s += l[(i, k)] * linv[(k, j)];
                }
                linv[(i, j)] = -s / l[(i, i)];
            }
        }
        let inv = linv.transpose().matmul(&linv);
        Some((logdet, inv))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors in
/// the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Real> SymEigen<T> {
    const MAX_SWEEPS: usize = 100;

    /// Cyclic Jacobi rotations. Only the upper triangle is read.
    pub fn new(m: &Matrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                expected: m.rows(),
                actual: m.cols(),
            });
        }
        if !m.is_finite() {
            return Err(Error::Numerical(
                "eigendecomposition of a non-finite matrix".into(),
            ));
        }
        let n = m.rows();
        let mut a = m.clone();
        let mut v = Matrix::identity(n);
        let mut d = a.diag();
        let mut b = d.clone();
        let mut z = vec![T::zero(); n];
        let hundred = T::lit(100.0);

        for sweep in 0..Self::MAX_SWEEPS {
            let mut off = T::zero();
            for p in 0..n {
                for q in p + 1..n {
                    off += a[(p, q)].abs();
                }
            }
            if off == T::zero() {
                return Ok(Self::sorted(d, v));
            }
            let thresh = if sweep < 3 {
                T::lit(0.2) * off / T::from_len(n * n)
            } else {
                T::zero()
            };
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    let g = hundred * apq.abs();
                    if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs()
                    {
                        a[(p, q)] = T::zero();
                        continue;
                    }
                    if apq.abs() <= thresh {
                        continue;
                    }
                    let h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        apq / h
                    } else {
                        let theta = T::lit(0.5) * h / apq;
                        let t = T::one() / (theta.abs() + (T::one() + theta * theta).sqrt());
                        if theta < T::zero() {
                            -t
                        } else {
                            t
                        }
                    };
                    let c = T::one() / (T::one() + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (T::one() + c);
                    let h = t * apq;
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[(p, q)] = T::zero();
                    let rot = |a: &mut Matrix<T>, i: (usize, usize), k: (usize, usize)| {
                        let g = a[i];
                        let h = a[k];
                        a[i] = g - s * (h + g * tau);
                        a[k] = h + s * (g - h * tau);
                    };
                    for j in 0..p {
                        rot(&mut a, (j, p), (j, q));
                    }
                    for j in p + 1..q {
                        rot(&mut a, (p, j), (j, q));
                    }
                    for j in q + 1..n {
                        rot(&mut a, (p, j), (q, j));
                    }
                    for j in 0..n {
                        rot(&mut v, (j, p), (j, q));
                    }
                }
            }
            for i in 0..n {
                b[i] += z[i];
                d[i] = b[i];
                z[i] = T::zero();
            }
        }
        Err(Error::Numerical("Jacobi eigensolver did not converge".into()))
    }

    fn sorted(values: Vec<T>, vectors: Matrix<T>) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite"));
        let vals = order.iter().map(|&i| values[i]).collect();
        let vecs = Matrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
        Self {
            values: vals,
            vectors: vecs,
        }
    }

    /// `U diag(values) Uᵀ`, symmetrised so the result is exactly symmetric.
    pub fn reconstruct(&self, values: &[T]) -> Matrix<T> {
        let n = self.values.len();
        assert_eq!(values.len(), n);
        let u = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for k in 0..n {
                    s += u[(i, k)] * values[k] * u[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(n: usize, seed: u64) -> Matrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.add(&a.transpose())
    }

    #[test]
    fn jacobi_reconstructs_input() {
        for seed in 0..5 {
            let a = random_sym(7, seed);
            let e = a.sym_eigen().unwrap();
            let back = e.reconstruct(&e.values);
            assert!(back.sub(&a).max_abs() < 1e-12);
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            // orthonormal columns
            let utu = e.vectors.transpose().matmul(&e.vectors);
            assert!(utu.sub(&Matrix::identity(7)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_diagonal_and_known_2x2() {
        let d = Matrix::from_diag(&[3.0, -1.0, 2.0]);
        assert_eq!(d.sym_eigen().unwrap().values, vec![-1.0, 2.0, 3.0]);
        let m = Matrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let e = m.sym_eigen().unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_rejects_nan() {
        let m = Matrix::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]);
        assert!(m.sym_eigen().is_err());
    }

    #[test]
    fn jacobi_works_in_single_precision() {
        let m = Matrix::<f32>::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let e = m.sym_eigen().unwrap();
        let back = e.reconstruct(&e.values);
        assert!(back.sub(&m).max_abs() < 1e-5);
    }

    #[test]
    fn lu_solve_matches_product() {
        let a = random_sym(6, 11).add(&Matrix::identity(6).scale(5.0));
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b = a.matvec(&x);
        let sol = a.solve(&b).unwrap();
        for (s, t) in sol.iter().zip(&x) {
            assert!((s - t).abs() < 1e-12);
        }
        assert!(Matrix::<f64>::zeros(2, 2).solve(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn cholesky_inverse_and_logdet() {
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let (ld, inv) = m.spd_logdet_inverse().unwrap();
        assert!((ld - 8f64.ln()).abs() < 1e-14);
        assert!(m.matmul(&inv).sub(&Matrix::identity(2)).max_abs() < 1e-14);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(bad.spd_logdet_inverse().is_none());
        let z = [1.0, -2.0];
        let (ld2, quad) = m.spd_logdet_quad(&z).unwrap();
        let direct: f64 = inv.matvec(&z).iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((ld2 - ld).abs() < 1e-14 && (quad - direct).abs() < 1e-13);
    }
}
