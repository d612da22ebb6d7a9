//! Small dense helpers shared across the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize_in_place(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &Mat) -> Mat {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn cholesky(m: &Mat) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub fn is_positive_definite(m: &Mat) -> bool {
    cholesky(m).is_some()
}

/// `log|m|` of a positive definite matrix.
pub fn log_det_pd(m: &Mat) -> Result<f64> {
    let chol = cholesky(m).ok_or(Error::NotPositiveDefinite("log-determinant"))?;
    Ok(log_det_from_cholesky(&chol))
}

pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Inverse of a positive definite matrix, symmetrized.
pub fn inverse_pd(m: &Mat) -> Result<Mat> {
    let chol = cholesky(m).ok_or(Error::NotPositiveDefinite("inverse"))?;
    let mut inv = chol.inverse();
    symmetrize_in_place(&mut inv);
    Ok(inv)
}

pub fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a - b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    frobenius(&(a - b)) / frobenius(b).max(1e-300)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Column-major vectorization.
pub fn vec_of(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Symmetric eigenvalues, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when the
/// smallest is not positive.
pub fn condition_number_sym(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let ev = sym_eigenvalues(m);
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves a symmetric positive definite system, retrying with a ridge of
/// `ridge_scale · trace / dim` when the plain factorization fails. Returns
/// the solution and the ridge used (0 when none was needed).
pub fn solve_spd_with_ridge(m: &Mat, rhs: &Mat, ridge_scale: f64) -> Result<(Mat, f64)> {
    if let Some(chol) = cholesky(m) {
        return Ok((chol.solve(rhs), 0.0));
    }
    let dim = m.nrows().max(1) as f64;
    let trace = m.trace().abs().max(1e-300);
    let mut ridge = ridge_scale * trace / dim;
    for _ in 0..12 {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = cholesky(&shifted) {
            return Ok((chol.solve(rhs), ridge));
        }
        ridge *= 10.0;
    }
    Err(Error::Singular(
        "ridge-regularized factorization failed".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_matches_vec_identity() {
        // (X ⊗ Y) vec(M) = vec(Y M Xᵀ)
        let x = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let y = Mat::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 4.0]);
        let m = Mat::from_row_slice(2, 3, &[0.3, -0.7, 1.1, 2.0, 0.1, -0.4]);
        let lhs = kron(&x, &y) * vec_of(&m);
        let rhs = vec_of(&(&y * &m * x.transpose()));
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0, 0.5]));
        assert!((log_det_pd(&m).unwrap() - 3.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_positive_definite(&m));
        assert!(log_det_pd(&m).is_err());
    }
}
