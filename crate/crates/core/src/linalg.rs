//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix (the upper triangle is trusted).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().max()
}

/// Symmetric square root `S` with `S * S = m` for `m ⪰ 0`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root of `m ≻ 0`.
pub fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite("inverse square root"));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("inverse"))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Largest generalized eigenvalue of the pencil `(q, m)`, `m ≻ 0`.
///
/// Uses `m = L Lᵀ` and the symmetric eigenproblem of `L⁻¹ q L⁻ᵀ` so that no
/// non-symmetric product is ever formed.
pub fn max_generalized_eigenvalue(q: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("generalized eigenvalue metric"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite("generalized eigenvalue metric"))?;
    let c = &linv * q * linv.transpose();
    Ok(max_eigenvalue(&c))
}

/// `‖v‖²_m = vᵀ m v`.
pub fn weighted_norm_sq(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Cyclic Jacobi eigenvalue iteration for symmetric matrices.
///
/// Deliberately independent of nalgebra's QR-based solver so it can be used
/// to cross-check residual eigenvalues reported by the solvers.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = symmetrize(m);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let scale: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_nalgebra() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, -2.0, 0.5, 1.0, 3.0, 0.0, 0.2, -2.0, 0.0, 5.0, 1.0, 0.5, 0.2, 1.0, 2.0,
            ],
        );
        let jac = jacobi_eigenvalues(&m);
        let mut na: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
        na.sort_by(|x, y| x.total_cmp(y));
        for (a, b) in jac.iter().zip(&na) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn generalized_eigenvalue_identity_metric() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let m = DMatrix::identity(2, 2);
        assert!((max_generalized_eigenvalue(&q, &m).unwrap() - 3.0).abs() < 1e-12);
        let m4 = m * 4.0;
        assert!((max_generalized_eigenvalue(&q, &m4).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sqrt_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).norm() < 1e-12);
        let si = inv_sqrt(&m).unwrap();
        assert!((&si * &m * &si - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
