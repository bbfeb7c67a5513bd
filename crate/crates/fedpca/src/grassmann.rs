//! Grassmann-manifold primitives: orthonormal subspace representatives,
//! tangent projection of Euclidean gradients, and the QR retraction.
//!
//! A point of G(d, k) is stored as one orthonormal `d x k` basis. Subspace
//! equality is always tested through principal angles, never by comparing
//! basis matrices. The retraction is the Q factor of a thin QR; under the
//! positive-diagonal convention of [`thin_qr`] it is deterministic and fixes
//! an orthonormal input, so a zero tangent step returns the same point.

use crate::error::{Error, Result};
use crate::numerics::{frobenius_norm_sq, thin_qr, Mat};

/// Orthonormality defect allowed on construction and after retraction.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// A k-dimensional subspace of R^d, represented by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannPoint {
    basis: Mat,
}

impl GrassmannPoint {
    /// Wrap a basis, enforcing `||B^T B - I||_F <= 1e-8` and `d > k > 0`.
    pub fn new(basis: Mat) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || d <= k {
            return Err(Error::Dimension(format!(
                "Grassmann point needs d > k > 0, got {d}x{k}"
            )));
        }
        let defect = orthonormality_defect(&basis);
        if !(defect <= ORTHONORMALITY_TOL) {
            return Err(Error::Degenerate(format!(
                "basis is not orthonormal: defect {defect:.3e}"
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormalize an arbitrary full-column-rank matrix onto the manifold.
    pub fn from_general(m: &Mat) -> Result<Self> {
        Self::new(thin_qr(m)?.q)
    }

    pub fn basis(&self) -> &Mat {
        &self.basis
    }

    /// `(d, k)`.
    pub fn dims(&self) -> (usize, usize) {
        self.basis.shape()
    }

    pub fn into_basis(self) -> Mat {
        self.basis
    }
}

/// `||B^T B - I||_F`.
pub fn orthonormality_defect(basis: &Mat) -> f64 {
    let k = basis.ncols();
    let gram = basis.transpose() * basis;
    frobenius_norm_sq(&(gram - Mat::identity(k, k))).sqrt()
}

/// A tangent direction `delta` at a point, satisfying `at^T delta = 0`.
#[derive(Debug, Clone)]
pub struct TangentVector {
    delta: Mat,
    at: GrassmannPoint,
}

impl TangentVector {
    /// Wrap a direction, enforcing the tangency invariant
    /// `||at^T delta||_F <= 1e-8`.
    pub fn new(at: GrassmannPoint, delta: Mat) -> Result<Self> {
        if delta.shape() != at.basis.shape() {
            return Err(Error::Dimension(format!(
                "tangent vector shape {:?} does not match point {:?}",
                delta.shape(),
                at.basis.shape()
            )));
        }
        let defect = frobenius_norm_sq(&(at.basis.transpose() * &delta)).sqrt();
        if !(defect <= ORTHONORMALITY_TOL) {
            return Err(Error::Degenerate(format!(
                "direction is not tangent: ||p^T delta|| = {defect:.3e}"
            )));
        }
        Ok(Self { delta, at })
    }

    pub fn delta(&self) -> &Mat {
        &self.delta
    }

    pub fn at(&self) -> &GrassmannPoint {
        &self.at
    }
}

/// Project a Euclidean gradient onto the tangent space at `p`:
/// `delta = (I_d - p p^T) g`, computed as `g - p (p^T g)`.
pub fn project_to_tangent(p: &GrassmannPoint, euclid_grad: &Mat) -> Result<TangentVector> {
    if euclid_grad.shape() != p.basis.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match point {:?}",
            euclid_grad.shape(),
            p.basis.shape()
        )));
    }
    let delta = euclid_grad - &p.basis * (p.basis.transpose() * euclid_grad);
    Ok(TangentVector {
        delta,
        at: p.clone(),
    })
}

/// Move from `p` along `-step * v` and map back onto the manifold through
/// the Q factor of a thin QR. A zero step (or zero direction) returns `p`
/// itself; a step that collapses the basis rank is reported as degenerate so
/// the caller can shrink it.
pub fn retract(p: &GrassmannPoint, v: &TangentVector, step: f64) -> Result<GrassmannPoint> {
    if v.at != *p {
        return Err(Error::Dimension(
            "tangent vector is anchored at a different point".into(),
        ));
    }
    if !step.is_finite() {
        return Err(Error::Config(format!("retraction step must be finite, got {step}")));
    }
    if step == 0.0 || v.delta.iter().all(|x| *x == 0.0) {
        return Ok(p.clone());
    }
    let moved = &p.basis - &v.delta * step;
    let q = thin_qr(&moved)
        .map_err(|e| Error::Degenerate(format!("retraction step is degenerate ({e}); shrink the step")))?
        .q;
    GrassmannPoint::new(q)
}

/// Principal angles between two subspaces: `arccos` of the singular values
/// of `p^T q`, clamped to `[0, 1]`; returned ascending, all in `[0, pi/2]`.
/// The zero vector characterizes equal subspaces.
pub fn principal_angles(p: &GrassmannPoint, q: &GrassmannPoint) -> Result<Vec<f64>> {
    if p.dims() != q.dims() {
        return Err(Error::Dimension(format!(
            "principal_angles: {:?} vs {:?}",
            p.dims(),
            q.dims()
        )));
    }
    let overlap = p.basis.transpose() * &q.basis;
    let mut cosines: Vec<f64> = overlap.svd(false, false).singular_values.iter().copied().collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    Ok(cosines.into_iter().map(|c| c.clamp(0.0, 1.0).acos()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn e1_point() -> GrassmannPoint {
        GrassmannPoint::new(Mat::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn construction_rejects_bad_shapes_and_defects() {
        assert!(GrassmannPoint::new(Mat::identity(2, 2)).is_err());
        assert!(GrassmannPoint::new(Mat::from_column_slice(3, 1, &[2.0, 0.0, 0.0])).is_err());
        assert!(GrassmannPoint::new(Mat::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).is_ok());
    }

    #[test]
    fn in_span_gradient_projects_to_zero() {
        let p = e1_point();
        let v = project_to_tangent(&p, p.basis()).unwrap();
        assert!(frobenius_norm_sq(v.delta()).sqrt() < 1e-14);
    }

    #[test]
    fn tangent_gradient_is_fixed_by_projection() {
        let p = e1_point();
        let g = Mat::from_column_slice(3, 1, &[0.0, -1.5, 2.0]);
        let v = project_to_tangent(&p, &g).unwrap();
        assert_relative_eq!(*v.delta(), g, epsilon = 1e-14);
    }

    #[test]
    fn coordinate_projection_example() {
        let p = e1_point();
        let g = Mat::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let v = project_to_tangent(&p, &g).unwrap();
        let expected = Mat::from_column_slice(3, 1, &[0.0, 2.0, 3.0]);
        assert_relative_eq!(*v.delta(), expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_step_returns_the_same_point() {
        let p = e1_point();
        let zero = TangentVector::new(p.clone(), Mat::zeros(3, 1)).unwrap();
        let moved = retract(&p, &zero, 1.0).unwrap();
        assert_eq!(moved.basis(), p.basis());
        let g = Mat::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let v = TangentVector::new(p.clone(), g).unwrap();
        let moved = retract(&p, &v, 0.0).unwrap();
        assert_eq!(moved.basis(), p.basis());
    }

    #[test]
    fn retract_rejects_foreign_anchor() {
        let p = e1_point();
        let q = GrassmannPoint::new(Mat::from_column_slice(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        let v = TangentVector::new(q, Mat::zeros(3, 1)).unwrap();
        assert!(retract(&p, &v, 0.5).is_err());
    }

    #[test]
    fn tangency_invariant_is_enforced() {
        let p = e1_point();
        let not_tangent = Mat::from_column_slice(3, 1, &[0.5, 1.0, 0.0]);
        assert!(TangentVector::new(p, not_tangent).is_err());
    }

    #[test]
    fn principal_angles_identity_and_orthogonal() {
        let p = e1_point();
        assert!(principal_angles(&p, &p).unwrap()[0] < 1e-7);

        let a = GrassmannPoint::new(Mat::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let b = GrassmannPoint::new(Mat::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert_relative_eq!(
            principal_angles(&a, &b).unwrap()[0],
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn principal_angles_ignore_basis_choice() {
        let basis = Mat::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = GrassmannPoint::new(basis.clone()).unwrap();
        // Same subspace: columns swapped and one sign flipped.
        let swapped = Mat::from_row_slice(4, 2, &[0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = GrassmannPoint::new(swapped).unwrap();
        let angles = principal_angles(&p, &q).unwrap();
        assert!(angles.iter().all(|a| *a < 1e-7));
    }
}
