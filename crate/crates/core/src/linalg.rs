//! Small dense linear algebra for the per-component Newton systems and
//! information matrices. Matrices are row-major and at most a few hundred wide.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
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
        Self::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// Copies the upper triangle onto the lower one.
    pub fn symmetrize_from_upper(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                self[(i, j)] = self[(j, i)];
            }
        }
    }

    pub fn max_abs_diag(&self) -> T {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)].abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Lower Cholesky factor of `a + shift * I`, or `None` if not positive definite.
pub fn cholesky_shifted<T: Real>(a: &Matrix<T>, shift: T) -> Option<Matrix<T>> {
    let n = a.rows;
    assert_eq!(n, a.cols, "cholesky needs a square matrix");
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

pub fn cholesky<T: Real>(a: &Matrix<T>) -> Option<Matrix<T>> {
    cholesky_shifted(a, T::zero())
}

/// Solves `L L^T x = b` given the lower factor.
pub fn cholesky_solve<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, &y)
}

/// Forward substitution `L y = b`.
pub fn solve_lower<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows;
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s = s - l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Back substitution `L^T x = y`.
pub fn solve_lower_transpose<T: Real>(l: &Matrix<T>, y: &[T]) -> Vec<T> {
    let n = l.rows;
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn sym_eigen<T: Real>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows;
    assert_eq!(n, a.cols, "eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.as_slice().iter().fold(T::zero(), |s, x| s + *x * *x).sqrt();
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off = off + m[(i, j)] * m[(i, j)];
            }
        }
        if off <= tol || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Moore-Penrose inverse of a symmetric positive semi-definite matrix.
#[derive(Debug, Clone)]
pub struct PseudoInverse<T> {
    pub inverse: Matrix<T>,
    /// Number of eigenvalues treated as zero.
    pub dropped: usize,
    pub min_eigenvalue: T,
}

/// Inverts via Cholesky when possible, otherwise through the eigen-decomposition
/// discarding eigenvalues below `rel_tol * max_eigenvalue`.
pub fn pinv_psd<T: Real>(a: &Matrix<T>, rel_tol: T) -> PseudoInverse<T> {
    let n = a.rows;
    if let Some(l) = cholesky(a) {
        let min_diag = (0..n).map(|i| l[(i, i)]).fold(T::infinity(), T::min);
        let max_diag = (0..n).map(|i| l[(i, i)]).fold(T::zero(), T::max);
        // squared diagonal ratio bounds the conditioning from below
        if n == 0 || (min_diag / max_diag) * (min_diag / max_diag) > rel_tol {
            let mut inv = Matrix::zeros(n, n);
            let mut e = vec![T::zero(); n];
            for j in 0..n {
                e.iter_mut().for_each(|x| *x = T::zero());
                e[j] = T::one();
                let col = cholesky_solve(&l, &e);
                for i in 0..n {
                    inv[(i, j)] = col[i];
                }
            }
            inv.symmetrize_from_upper();
            return PseudoInverse {
                inverse: inv,
                dropped: 0,
                min_eigenvalue: min_diag * min_diag,
            };
        }
    }
    let (vals, vecs) = sym_eigen(a);
    let max_eig = vals.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let min_eig = vals.iter().fold(T::infinity(), |m, &x| m.min(x));
    let cut = rel_tol * max_eig;
    let mut inv = Matrix::zeros(n, n);
    let mut dropped = 0;
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= cut {
            dropped += 1;
            continue;
        }
        let w = T::one() / lam;
        for i in 0..n {
            let vik = vecs[(i, k)] * w;
            for j in i..n {
                inv[(i, j)] = inv[(i, j)] + vik * vecs[(j, k)];
            }
        }
    }
    inv.symmetrize_from_upper();
    PseudoInverse {
        inverse: inv,
        dropped,
        min_eigenvalue: min_eig,
    }
}

/// `v^T A v` for symmetric `A`.
pub fn quad_form<T: Real>(a: &Matrix<T>, v: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..a.rows {
        if v[i] == T::zero() {
            continue;
        }
        s = s + v[i] * dot(a.row(i), v);
    }
    s
}
