//! Dense helpers for the small (d ≤ a handful) symmetric matrices used by
//! full-covariance mixture components. Matrices are row-major `d*d` slices.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower-triangular Cholesky factor of an SPD matrix.
pub fn cholesky<S: Real>(a: &[S], d: usize) -> Result<Vec<S>> {
    if a.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, got: a.len() });
    }
    let mut l = vec![S::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum = sum - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > S::zero()) {
                    return Err(Error::InvalidParameter(
                        "covariance is not positive definite".into(),
                    ));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<S: Real>(l: &[S], d: usize, b: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum = sum - l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    let mut x = vec![S::zero(); d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in (i + 1)..d {
            sum = sum - l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    x
}

/// `log det(L Lᵀ)`.
pub fn cholesky_log_det<S: Real>(l: &[S], d: usize) -> S {
    (0..d).fold(S::zero(), |acc, i| acc + l[i * d + i].ln()) * S::lit(2.0)
}

/// `L z`, used to draw correlated Gaussian samples.
pub fn lower_mul<S: Real>(l: &[S], d: usize, z: &[S]) -> Vec<S> {
    (0..d)
        .map(|i| (0..=i).fold(S::zero(), |acc, k| acc + l[i * d + k] * z[k]))
        .collect()
}

pub fn is_symmetric<S: Real>(a: &[S], d: usize, tol: S) -> bool {
    (0..d).all(|i| (0..i).all(|j| (a[i * d + j] - a[j * d + i]).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_roundtrip() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let l = cholesky(&a, 3).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = cholesky_solve(&l, 3, &b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
        // det = 4(6-0.04) - 1(2-0.1) + 0.5(0.2-1.5)
        let det: f64 = 4.0 * (6.0 - 0.04) - (2.0 - 0.1) + 0.5 * (0.2 - 1.5);
        assert!((cholesky_log_det(&l, 3) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }
}
