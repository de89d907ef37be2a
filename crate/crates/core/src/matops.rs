//! Dense matrix helpers: column-stacking vectorization, Kronecker products,
//! spectral radius and small factorized solves.
//!
//! Every module in the crate relies on the column-stacking convention
//! `vectorize(A·M·Bᵀ) = (B ⊗ A)·vectorize(M)`. nalgebra stores matrices
//! column-major, so vectorization is a straight copy of the storage.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Condition estimate above which a linear solve is rejected.
pub const MAX_CONDITION: f64 = 1e14;

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITERS: usize = 10_000;

/// Stacks the columns of `m` into a single vector; entry `(i, j)` lands at
/// index `j * rows + i`.
pub fn vectorize(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`].
pub fn matricize(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot matricize a vector of length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Matrix::from_column_slice(rows, cols, v))
}

/// Kronecker product: block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(a.nrows() * br, a.ncols() * bc);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc))
                .zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    out
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Largest eigenvalue magnitude of a general (nonsymmetric) square matrix,
/// via a real Schur decomposition.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m, "spectral radius argument")?;
    ensure_finite(m, "spectral radius argument")?;
    if m.is_empty() {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), SCHUR_EPS, SCHUR_MAX_ITERS)
        .ok_or(Error::EigenNonConvergence(m.nrows()))?;
    let rho = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::EigenNonConvergence(m.nrows()))
    }
}

/// 2-norm condition number from the singular values. Matrices here are at
/// most a few hundred entries, so the SVD is cheap.
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `a·x = b` with an LU factorization; rejects matrices whose
/// condition estimate exceeds [`MAX_CONDITION`].
pub fn solve_linear(a: &Matrix, b: &Vector) -> Result<Vector> {
    let x = solve_matrix(a, &Matrix::from_column_slice(b.len(), 1, b.as_slice()), "linear solve")?;
    Ok(Vector::from_column_slice(x.as_slice()))
}

/// Solves `a·X = b` column by column with one LU factorization.
pub fn solve_matrix(a: &Matrix, b: &Matrix, context: &str) -> Result<Matrix> {
    ensure_square(a, context)?;
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "{context}: left side is {}x{} but right side has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    ensure_finite(a, context)?;
    ensure_finite(b, context)?;
    let condition = condition_number(a);
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(Error::Singular {
            context: context.to_string(),
            condition,
        });
    }
    a.clone().lu().solve(b).ok_or(Error::Singular {
        context: context.to_string(),
        condition,
    })
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry (0 for an empty matrix).
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Symmetry and positive-semidefiniteness test with relative tolerance `tol`:
/// `|M - Mᵀ| ≤ tol·max|M|` and `λ_min ≥ -tol·max(λ_max, 0)`.
///
/// Returns `None` when the test passes, otherwise a description of the
/// violation.
pub fn psd_violation(m: &Matrix, tol: f64) -> Option<String> {
    if !m.is_square() {
        return Some(format!("not square ({}x{})", m.nrows(), m.ncols()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Some("non-finite entries".to_string());
    }
    if m.is_empty() {
        return None;
    }
    let scale = max_abs(m);
    let asym = max_abs(&(m - m.transpose()));
    if asym > tol * scale {
        return Some(format!("not symmetric (max asymmetry {asym:.3e})"));
    }
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let min = eig.min();
    let max = eig.max();
    if min < -tol * max.max(0.0) {
        return Some(format!("min eigenvalue {min:.6e} < 0 (max eigenvalue {max:.6e})"));
    }
    None
}

/// A factor `F` with `F·Fᵀ = m` for a symmetric PSD matrix: the lower
/// Cholesky factor when `m` is positive definite, otherwise the symmetric
/// square root with negative rounding noise clipped to zero.
pub fn psd_factor(m: &Matrix, what: &str) -> Result<Matrix> {
    if let Some(v) = psd_violation(m, 1e-10) {
        return Err(Error::NotPsd(format!("{what}: {v}")));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}
