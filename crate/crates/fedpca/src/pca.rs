//! Centralized PCA baseline and the reconstruction-error scores every
//! detector in this crate shares.
//!
//! Fitting does not re-center the data: ingestion applies z-score
//! normalization upstream, so data matrices arrive pre-normalized. Errors
//! are reported as squared norms and thresholds operate on squared values
//! consistently.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grassmann::GrassmannPoint;
use crate::numerics::{frobenius_norm_sq, truncated_svd, Mat};

/// A fitted rank-k subspace profile of normal behavior.
#[derive(Debug, Clone)]
pub struct PcaModel {
    basis: GrassmannPoint,
}

impl PcaModel {
    pub fn new(basis: GrassmannPoint) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &GrassmannPoint {
        &self.basis
    }

    pub fn k(&self) -> usize {
        self.basis.dims().1
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.dims().0
    }

    /// Squared reconstruction error `||x - U U^T x||^2` of one record.
    pub fn reconstruction_error(&self, record: &[f64]) -> Result<f64> {
        let (d, _) = self.basis.dims();
        if record.len() != d {
            return Err(Error::Dimension(format!(
                "record has {} features, model expects {d}",
                record.len()
            )));
        }
        let x = nalgebra::DVector::from_column_slice(record);
        let coeffs = self.basis.basis().transpose() * &x;
        let residual = &x - self.basis.basis() * coeffs;
        Ok(residual.norm_squared())
    }

    /// Per-column squared reconstruction errors, order preserved.
    pub fn batch_errors(&self, x: &Mat) -> Result<Vec<f64>> {
        let (d, _) = self.basis.dims();
        if x.nrows() != d {
            return Err(Error::Dimension(format!(
                "data has {} rows, model expects {d}",
                x.nrows()
            )));
        }
        let residual = x - self.basis.basis() * (self.basis.basis().transpose() * x);
        Ok(residual.column_iter().map(|c| c.norm_squared()).collect())
    }

    /// Total squared residual `||(I - U U^T) X||_F^2` over a data matrix.
    pub fn total_residual(&self, x: &Mat) -> Result<f64> {
        let (d, _) = self.basis.dims();
        if x.nrows() != d {
            return Err(Error::Dimension(format!(
                "data has {} rows, model expects {d}",
                x.nrows()
            )));
        }
        let residual = x - self.basis.basis() * (self.basis.basis().transpose() * x);
        Ok(frobenius_norm_sq(&residual))
    }
}

/// Fit the rank-k PCA profile of a pre-normalized `d x n` data matrix: the
/// leading k left singular vectors, which minimize `||(I - U U^T) X||_F^2`
/// over orthonormal `U`.
pub fn fit_centralized(x: &Mat, k: usize) -> Result<PcaModel> {
    let (d, n) = x.shape();
    if k == 0 || k >= d || k > n {
        return Err(Error::Dimension(format!(
            "fit_centralized: k = {k} out of range for a {d}x{n} data matrix (need 1 <= k < d and k <= n)"
        )));
    }
    let svd = truncated_svd(x, k)?;
    Ok(PcaModel::new(GrassmannPoint::new(svd.u)?))
}

const MODEL_MAGIC: &[u8; 8] = b"FPCAMDL1";
const MODEL_VERSION: u32 = 1;

/// Write a model checkpoint.
///
/// Byte layout (all integers little endian): magic `FPCAMDL1`, `u32`
/// version, `u64` d, `u64` k, 32-byte feature-manifest hash, then `d * k`
/// `f64` basis entries in column-major order. The round trip is lossless.
pub fn save_model(path: &Path, model: &PcaModel, manifest_hash: &[u8; 32]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (d, k) = model.basis.dims();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&(k as u64).to_le_bytes())?;
    w.write_all(manifest_hash)?;
    for v in model.basis.basis().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(PcaModel, [u8; 32])> {
    let bad = |message: &str| Error::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    if u32::from_le_bytes(buf4) != MODEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let d = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let k = u64::from_le_bytes(buf8) as usize;
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if d == 0 || k == 0 || k >= d || d > 1 << 20 {
        return Err(bad("implausible dimensions"));
    }
    let mut entries = vec![0.0f64; d * k];
    for v in entries.iter_mut() {
        r.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    let basis = Mat::from_column_slice(d, k, &entries);
    let model = PcaModel::new(GrassmannPoint::new(basis).map_err(|e| bad(&e.to_string()))?);
    Ok((model, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn axis_model() -> PcaModel {
        // Span of e1 in R^2.
        let basis = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        PcaModel::new(GrassmannPoint::new(basis).unwrap())
    }

    #[test]
    fn fit_recovers_dominant_axes() {
        // Data spanned by diag(3, 2, 1) scales along the axes.
        let x = Mat::from_row_slice(
            3,
            6,
            &[
                3.0, -3.0, 0.0, 0.0, 0.3, -0.3, //
                0.0, 0.0, 2.0, -2.0, 0.2, 0.0, //
                0.1, -0.1, 0.05, 0.0, 1.0, -1.0,
            ],
        );
        let model = fit_centralized(&x, 2).unwrap();
        // e1 and e2 should be nearly in-span: tiny reconstruction error.
        assert!(model.reconstruction_error(&[1.0, 0.0, 0.0]).unwrap() < 0.02);
        assert!(model.reconstruction_error(&[0.0, 1.0, 0.0]).unwrap() < 0.02);
    }

    #[test]
    fn fit_rank_one_data_has_zero_residual() {
        let u = nalgebra::dvector![0.36, 0.48, 0.8];
        let mut x = Mat::zeros(3, 5);
        for (j, c) in [1.0, -2.0, 0.5, 3.0, -0.25].iter().enumerate() {
            x.set_column(j, &(&u * *c));
        }
        let model = fit_centralized(&x, 1).unwrap();
        assert!(model.total_residual(&x).unwrap() < 1e-18);
    }

    #[test]
    fn fit_rejects_bad_k() {
        let x = Mat::zeros(3, 5);
        assert!(fit_centralized(&x, 0).is_err());
        assert!(fit_centralized(&x, 3).is_err());
        let narrow = Mat::from_fn(4, 2, |i, j| (i + j) as f64);
        assert!(fit_centralized(&narrow, 3).is_err());
    }

    #[test]
    fn reconstruction_error_in_span_and_orthogonal() {
        let model = axis_model();
        assert_eq!(model.reconstruction_error(&[5.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            model.reconstruction_error(&[0.0, 2.0]).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            model.reconstruction_error(&[3.0, 4.0]).unwrap(),
            16.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reconstruction_error_rejects_length_mismatch() {
        let model = axis_model();
        assert!(model.reconstruction_error(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn batch_errors_edge_cases() {
        let model = axis_model();
        assert!(model.batch_errors(&Mat::zeros(2, 0)).unwrap().is_empty());
        let single = Mat::from_column_slice(2, 1, &[3.0, 4.0]);
        let errs = model.batch_errors(&single).unwrap();
        assert_eq!(errs.len(), 1);
        assert_relative_eq!(errs[0], 16.0, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let x = Mat::from_fn(4, 9, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let model = fit_centralized(&x, 2).unwrap();
        let hash = [7u8; 32];
        save_model(&path, &model, &hash).unwrap();
        let (loaded, loaded_hash) = load_model(&path).unwrap();
        assert_eq!(loaded_hash, hash);
        assert_eq!(loaded.basis().basis(), model.basis().basis());
    }
}
