//! Covariances of the linear (Ornstein–Uhlenbeck) center-of-mass dynamics
//! `dx = −Ax dt + noise`, with noise covariance `Σ/p`.

use super::AnalysisError;
use nalgebra::{DMatrix, SymmetricEigen};

/// Largest dimension accepted by the dense Kronecker route for non-symmetric
/// drifts (the system has `n²` unknowns).
const KRONECKER_MAX_DIM: usize = 32;

fn check_square(a: &DMatrix<f64>, sigma: &DMatrix<f64>, p: usize) -> Result<usize, AnalysisError> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || sigma.shape() != (n, n) {
        return Err(AnalysisError::Dimension(format!(
            "A is {:?}, Sigma is {:?}",
            a.shape(),
            sigma.shape()
        )));
    }
    if p == 0 {
        return Err(AnalysisError::Dimension("p must be positive".into()));
    }
    Ok(n)
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    (a - a.transpose()).amax() <= 1e-14 * scale
}

/// Solves `AV + VAᵀ = Σ/p`.
///
/// Symmetric `A` is diagonalized, `V = U[(UᵀΣU)ᵢⱼ/(λᵢ+λⱼ)]Uᵀ/p`. Otherwise the
/// vectorized system `(I⊗A + A⊗I) vec V = vec Σ / p` is solved directly.
pub fn ou_stationary_variance(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p: usize,
) -> Result<DMatrix<f64>, AnalysisError> {
    let n = check_square(a, sigma, p)?;
    let rhs = sigma / p as f64;
    if is_symmetric(a) {
        let eig = SymmetricEigen::new(a.clone());
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(AnalysisError::NotStable);
        }
        let u = &eig.eigenvectors;
        let mut inner = u.transpose() * &rhs * u;
        for i in 0..n {
            for j in 0..n {
                inner[(i, j)] /= eig.eigenvalues[i] + eig.eigenvalues[j];
            }
        }
        return Ok(u * inner * u.transpose());
    }
    if a.complex_eigenvalues().iter().any(|e| !(e.re > 0.0)) {
        return Err(AnalysisError::NotStable);
    }
    if n > KRONECKER_MAX_DIM {
        return Err(AnalysisError::Dimension(format!(
            "non-symmetric drift of dimension {n} exceeds {KRONECKER_MAX_DIM}"
        )));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    let vec_rhs = DMatrix::from_column_slice(n * n, 1, rhs.as_slice());
    let solution = system.lu().solve(&vec_rhs).ok_or(AnalysisError::Singular)?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Singular);
    }
    Ok(DMatrix::from_column_slice(n, n, solution.as_slice()))
}

/// Asymptotic covariance of the scaled iterate average, `(1/p)A⁻¹ΣA⁻ᵀ`.
pub fn ou_asymptotic_avg_variance(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p: usize,
) -> Result<DMatrix<f64>, AnalysisError> {
    check_square(a, sigma, p)?;
    let lu = a.clone().lu();
    if !lu.is_invertible() {
        return Err(AnalysisError::Singular);
    }
    // A⁻¹ΣA⁻ᵀ = (A⁻¹(A⁻¹Σ)ᵀ)ᵀ
    let x = lu.solve(sigma).ok_or(AnalysisError::Singular)?;
    let v = lu.solve(&x.transpose()).ok_or(AnalysisError::Singular)?.transpose();
    let v = (&v + v.transpose()) * (0.5 / p as f64);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::Singular);
    }
    Ok(v)
}
