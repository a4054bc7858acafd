//! PCA preprocessing: eigendecomposition of the pooled empirical covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted PCA model: mean, orthonormal basis of top principal directions,
/// and their explained variances in non-increasing order.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `D x d` matrix with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

/// Fits PCA on pooled rows, projecting onto the top `d` eigenvectors of the
/// empirical covariance. Sign convention: the largest-magnitude component of
/// each basis vector is positive.
pub fn pca_fit(rows: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    if rows.is_empty() {
        return Err(Error::Data("PCA needs at least one row".into()));
    }
    let big_d = rows[0].len();
    if rows.iter().any(|r| r.len() != big_d) {
        return Err(Error::Dim("ragged rows".into()));
    }
    if d == 0 || d > big_d || d > rows.len().saturating_sub(1).max(1) {
        return Err(Error::Config(format!(
            "target dimension {d} out of range for {} rows of width {big_d}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(big_d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(big_d, big_d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..big_d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut basis = DMatrix::zeros(big_d, d);
    let mut explained = Vec::with_capacity(d);
    for (col, &idx) in order.iter().take(d).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // deterministic sign: largest-magnitude component positive
        let dominant = (0..big_d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap();
        if v[dominant] < 0.0 {
            v = -v;
        }
        basis.set_column(col, &v);
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean,
        basis,
        explained_variance: explained,
    })
}

/// Projects rows into the reduced coordinate system.
pub fn pca_project(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let big_d = model.mean.len();
    rows.iter()
        .map(|r| {
            if r.len() != big_d {
                return Err(Error::Dim("row width does not match PCA model".into()));
            }
            let c = DVector::from_column_slice(r) - &model.mean;
            Ok((model.basis.transpose() * c).iter().cloned().collect())
        })
        .collect()
}
