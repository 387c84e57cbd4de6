//! Small dense helpers shared by the solvers: jittered Cholesky, symmetric
//! projections and triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::{lit, Error, Real, Result};

/// Smallest relative jitter tried when a Cholesky factorization fails.
pub const JITTER_START: f64 = 1e-12;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Returns `(m + mᵀ) / 2`, which is symmetric bit for bit.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = lit::<T>(0.5);
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| (m[(i, j)] + m[(j, i)]) * half)
}

fn mean_diagonal<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    if n == 0 {
        return T::zero();
    }
    let sum = (0..n).fold(T::zero(), |acc, i| acc + m[(i, i)]);
    sum / lit::<T>(n as f64)
}

/// Lower Cholesky factor of a symmetric matrix.
///
/// When the plain factorization fails, `eps * mean(diag) * I` is added with
/// `eps` escalating by ×10 from [`JITTER_START`] to [`JITTER_MAX`]. A matrix
/// with non-positive mean diagonal is jittered on an absolute scale of one.
pub fn cholesky_jittered<T: Real>(m: &DMatrix<T>, what: &'static str) -> Result<DMatrix<T>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { what });
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let mut scale = mean_diagonal(m);
    if scale <= T::zero() {
        scale = T::one();
    }
    let mut eps = JITTER_START;
    while eps <= JITTER_MAX * 1.000_001 {
        let mut shifted = m.clone();
        let jitter = scale * lit::<T>(eps);
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            log::debug!("{what}: Cholesky needed jitter {eps:e}");
            return Ok(c.l());
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite { what })
}

/// `log det(L Lᵀ)` from a lower Cholesky factor.
pub fn log_det_from_cholesky<T: Real>(l: &DMatrix<T>) -> T {
    (0..l.nrows()).fold(T::zero(), |acc, i| acc + l[(i, i)].ln()) * lit::<T>(2.0)
}

/// Solves `(L Lᵀ) x = b` for a matrix right-hand side.
pub fn cholesky_solve<T: Real>(l: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a zero pivot");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a zero pivot")
}

/// Solves `(L Lᵀ) x = b` for a vector right-hand side.
pub fn cholesky_solve_vec<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a zero pivot");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a zero pivot")
}

/// Clips the eigenvalues of a symmetric matrix from below at `floor`.
pub fn eigen_floor<T: Real>(m: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| if v < floor { floor } else { v });
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()))
}

/// Nearest positive semidefinite matrix in the Frobenius norm.
pub fn psd_projection<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    eigen_floor(m, T::zero())
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    let values = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    values
        .iter()
        .copied()
        .fold(values[0], |a, b| if b > a { b } else { a })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    let values = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    values
        .iter()
        .copied()
        .fold(values[0], |a, b| if b < a { b } else { a })
}

/// Stacks two vectors.
pub fn concat<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Assembles the symmetric block matrix `[[A, Bᵀ], [B, C]]`.
pub fn block_symmetric<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    let na = a.nrows();
    let nc = c.nrows();
    let mut out = DMatrix::zeros(na + nc, na + nc);
    out.view_mut((0, 0), (na, na)).copy_from(a);
    out.view_mut((na, 0), (nc, na)).copy_from(b);
    out.view_mut((0, na), (na, nc)).copy_from(&b.transpose());
    out.view_mut((na, na), (nc, nc)).copy_from(c);
    symmetrize(&out)
}

pub fn all_finite<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn ensure_len<T: Real>(v: &DVector<T>, expected: usize, what: &'static str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

pub fn ensure_square<T: Real>(m: &DMatrix<T>, expected: usize, what: &'static str) -> Result<()> {
    if m.nrows() != expected || m.ncols() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            found: if m.nrows() != expected { m.nrows() } else { m.ncols() },
        });
    }
    Ok(())
}
