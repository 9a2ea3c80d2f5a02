//! Small dense linear algebra on plain `Vec`/slice storage.
//!
//! Problem dimensions here are desk scale (tens of variables), so the
//! routines favour clarity over blocking or SIMD.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BilevelError, Result};
use crate::scalar::Scalar;

pub fn sum<T: Scalar>(items: impl IntoIterator<Item = T>) -> T {
    items.into_iter().fold(T::zero(), |acc, x| acc + x)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}

pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn scale<T: Scalar>(s: T, a: &[T]) -> Vec<T> {
    a.iter().map(|&x| s * x).collect()
}

/// `a + s * b`
pub fn axpy<T: Scalar>(a: &[T], s: T, b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
}

pub fn dist_sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    sum(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)))
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn zeros<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

/// Vector of i.i.d. standard normal draws.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn diag(d: &[T]) -> Self {
        Self::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { T::zero() })
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(BilevelError::InvalidArgument(
                "matrix rows have unequal lengths".into(),
            ));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn random_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: standard_normal(rng, rows * cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`
    pub fn tmatvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = zeros(self.cols);
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let idx = i * other.cols + j;
                    out.data[idx] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: scale(s, &self.data),
        }
    }

    pub fn frobenius_sq(&self) -> T {
        norm_sq(&self.data)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(BilevelError::InvalidArgument("Cholesky needs a square matrix".into()));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > T::zero()) {
                return Err(BilevelError::InvalidArgument(
                    "matrix is not positive definite".into(),
                ));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Self { lower: l })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lower.rows();
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.lower.get(i, k) * z[k];
            }
            z[i] = s / self.lower.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= self.lower.get(k, i) * z[k];
            }
            z[i] = s / self.lower.get(i, i);
        }
        z
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    let n = a.rows();
    if a.cols() != n || !a.is_symmetric(T::lit(1e-9) * (T::one() + a.frobenius_sq().sqrt())) {
        return Err(BilevelError::InvalidArgument("matrix is not symmetric".into()));
    }
    let mut m = a.clone();
    let tol = T::eps() * T::eps() * (T::one() + m.frobenius_sq());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(eig)
}

/// Spectral norm squared, `λ_max(AᵀA)`.
pub fn spectral_norm_sq<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    let gram = a.transpose().matmul(a);
    // symmetrize away rounding before the Jacobi check
    let gram = Matrix::from_fn(gram.rows(), gram.cols(), |i, j| {
        (gram.get(i, j) + gram.get(j, i)) / T::lit(2.0)
    });
    Ok(symmetric_eigenvalues(&gram)?
        .last()
        .copied()
        .unwrap_or_else(T::zero)
        .max(T::zero()))
}

/// Haar-ish random orthogonal matrix via modified Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix<T> {
    let g = Matrix::<T>::random_normal(rng, n, n);
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..n {
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(&cols[j], &cols[k]);
                let qk = cols[k].clone();
                cols[j] = axpy(&cols[j], -proj, &qk);
            }
        }
        let nrm = norm(&cols[j]);
        cols[j] = scale(T::one() / nrm, &cols[j]);
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}
