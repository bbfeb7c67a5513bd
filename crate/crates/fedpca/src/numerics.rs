//! Dense-matrix kernels shared by every other module.
//!
//! Matrices are column-major `nalgebra::DMatrix<f64>` throughout the crate;
//! a data matrix holds one record per column. The factorizations here pin
//! down two conventions the rest of the crate relies on:
//!
//! * `thin_qr` forces `diag(R) > 0` by flipping column signs, which removes
//!   the sign ambiguity of QR and makes retractions deterministic;
//! * `truncated_svd` runs through a symmetric eigendecomposition of the
//!   `d x d` Gram matrix of the input, which is cheap for the
//!   short-and-wide data matrices this crate sees (`d <= 41`), and returns
//!   the full singular spectrum so the Eckart-Young residual identity can
//!   be checked by callers.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};

/// Dense column-major matrix of `f64`.
pub type Mat = nalgebra::DMatrix<f64>;

/// Relative tolerance below which an `R` diagonal entry counts as zero.
const QR_RANK_TOL: f64 = 1e-12;

/// Frobenius inner product `<a, b> = sum_ij a_ij * b_ij`.
pub fn frobenius_inner(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "frobenius_inner: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// Squared Frobenius norm, `<a, a>`.
pub fn frobenius_norm_sq(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Thin QR factors: `q` is `d x k` with orthonormal columns, `r` is `k x k`
/// upper triangular with a strictly positive diagonal.
#[derive(Debug, Clone)]
pub struct ThinQr {
    pub q: Mat,
    pub r: Mat,
}

/// Thin QR of a tall matrix (`rows >= cols`) under the positive-diagonal
/// sign convention. Inputs that are numerically rank deficient
/// (`|R_jj| <= 1e-12 * ||a||_F`) are rejected.
pub fn thin_qr(a: &Mat) -> Result<ThinQr> {
    let (d, k) = a.shape();
    if d < k || k == 0 {
        return Err(Error::Dimension(format!(
            "thin_qr needs rows >= cols >= 1, got {d}x{k}"
        )));
    }
    let scale = frobenius_norm_sq(a).sqrt();
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..k {
        let rjj = r[(j, j)];
        if rjj.abs() <= QR_RANK_TOL * scale {
            return Err(Error::Degenerate(format!(
                "thin_qr: |R[{j},{j}]| = {:.3e} is under the rank tolerance {:.3e}",
                rjj.abs(),
                QR_RANK_TOL * scale
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    Ok(ThinQr { q, r })
}

/// Truncated SVD output: `u` holds the `k` leading left singular vectors,
/// `sigma` the full singular spectrum (length `min(d, n)`, descending).
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Mat,
    pub sigma: Vec<f64>,
}

/// Leading `k` left singular vectors of `a` plus all `min(d, n)` singular
/// values, computed from the symmetric eigendecomposition of `a * a^T`.
///
/// Columns of `u` are sign-canonicalized (largest-magnitude entry positive)
/// so identical inputs produce identical outputs.
pub fn truncated_svd(a: &Mat, k: usize) -> Result<TruncatedSvd> {
    let (d, n) = a.shape();
    let rank_cap = d.min(n);
    if k == 0 || k > rank_cap {
        return Err(Error::Dimension(format!(
            "truncated_svd: k = {k} out of range 1..={rank_cap} for a {d}x{n} input"
        )));
    }
    let gram = a * a.transpose();
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order
        .iter()
        .take(rank_cap)
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();

    let mut u = Mat::zeros(d, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let mut pivot = 0;
        let mut best = 0.0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        u.set_column(c, &col);
    }
    Ok(TruncatedSvd { u, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn frobenius_inner_is_trace_against_identity() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let id = Mat::identity(2, 2);
        assert_eq!(frobenius_inner(&a, &id).unwrap(), 5.0);
    }

    #[test]
    fn frobenius_inner_zero_and_self() {
        let z = Mat::zeros(3, 2);
        assert_eq!(frobenius_inner(&z, &z).unwrap(), 0.0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(frobenius_inner(&a, &a).unwrap(), 30.0);
        assert_eq!(frobenius_norm_sq(&a), 30.0);
    }

    #[test]
    fn frobenius_inner_rejects_shape_mismatch() {
        let a = Mat::zeros(2, 2);
        let b = Mat::zeros(2, 3);
        assert!(matches!(
            frobenius_inner(&a, &b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn thin_qr_of_orthonormal_input_is_identity_factorization() {
        // Columns of a 4x2 orthonormal matrix.
        let s = 1.0 / 2.0_f64.sqrt();
        let a = Mat::from_row_slice(4, 2, &[s, 0.0, s, 0.0, 0.0, s, 0.0, -s]);
        let f = thin_qr(&a).unwrap();
        assert_relative_eq!(f.q, a, epsilon = 1e-10);
        assert_relative_eq!(f.r, Mat::identity(2, 2), epsilon = 1e-10);
    }

    #[test]
    fn thin_qr_of_scaled_axes() {
        let a = Mat::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let f = thin_qr(&a).unwrap();
        let q_expected = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(f.q, q_expected, epsilon = 1e-12);
        assert_relative_eq!(f.r, Mat::from_diagonal(&nalgebra::dvector![2.0, 3.0]), epsilon = 1e-12);
    }

    #[test]
    fn thin_qr_positive_diagonal_and_determinism() {
        let a = Mat::from_row_slice(3, 2, &[-1.0, 2.0, 0.5, -0.25, 3.0, 1.0]);
        let f1 = thin_qr(&a).unwrap();
        let f2 = thin_qr(&a).unwrap();
        for j in 0..2 {
            assert!(f1.r[(j, j)] > 0.0);
        }
        // Identical input bits, identical output bits.
        assert_eq!(f1.q, f2.q);
        assert_eq!(f1.r, f2.r);
    }

    #[test]
    fn thin_qr_rejects_rank_deficient_input() {
        let a = Mat::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(thin_qr(&a), Err(Error::Degenerate(_))));
        let zero = Mat::zeros(3, 2);
        assert!(matches!(thin_qr(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn truncated_svd_of_diagonal() {
        let a = Mat::from_diagonal(&nalgebra::dvector![3.0, 2.0, 1.0]);
        let svd = truncated_svd(&a, 2).unwrap();
        assert_eq!(svd.sigma.len(), 3);
        assert_relative_eq!(svd.sigma[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(svd.sigma[1], 2.0, epsilon = 1e-10);
        assert_relative_eq!(svd.sigma[2], 1.0, epsilon = 1e-10);
        // Leading vectors are the first two axes up to sign; sign convention
        // makes them exactly the positive axes.
        assert_relative_eq!(svd.u[(0, 0)].abs(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(svd.u[(1, 1)].abs(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn truncated_svd_exact_rank_one() {
        let u = nalgebra::dvector![0.6, 0.8, 0.0];
        let v = nalgebra::dvector![1.0, 2.0, 2.0, 4.0];
        let a = &u * v.transpose();
        let svd = truncated_svd(&a, 1).unwrap();
        let residual: f64 = svd.sigma.iter().skip(1).map(|s| s * s).sum();
        assert!(residual < 1e-12 * frobenius_norm_sq(&a));
    }

    #[test]
    fn truncated_svd_rejects_bad_k() {
        let a = Mat::zeros(4, 6);
        assert!(matches!(truncated_svd(&a, 0), Err(Error::Dimension(_))));
        assert!(matches!(truncated_svd(&a, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn truncated_svd_sigma_descending() {
        let a = Mat::from_row_slice(3, 4, &[0.3, -1.2, 0.7, 2.0, 1.1, 0.4, -0.9, 0.2, -0.5, 0.8, 1.6, -0.1]);
        let svd = truncated_svd(&a, 2).unwrap();
        for w in svd.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}
