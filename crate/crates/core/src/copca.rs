//! Joint PCA over the stacked source and target feature matrices.
//!
//! Both cities' rows are stacked, columns z-scored, and the covariance
//! eigendecomposed; projecting onto the top-d′ components and splitting the
//! rows back apart gives each city a latent matrix in one shared space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::CellIndex;

/// A fitted joint-PCA transform, reusable on any matrix with the same schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoPcaTransform {
    /// Column schema the transform was fitted on.
    pub columns: Vec<String>,
    pub column_means: Vec<f64>,
    /// Z-score denominators; exactly 1 for (near-)constant columns.
    pub column_scales: Vec<f64>,
    /// d×d′ orthonormal projection, row-major.
    pub projection: Vec<f64>,
    /// Eigenvalues of the standardized covariance for the kept components.
    pub explained_variance: Vec<f64>,
}

impl CoPcaTransform {
    pub fn input_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.explained_variance.len()
    }
}

/// Latent feature rows, one per cell, in the shared d′-dimensional space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub cells: Vec<CellIndex>,
    pub dim: usize,
    /// `cells.len() × dim` values, row-major.
    pub values: Vec<f64>,
}

impl LatentMatrix {
    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_of(&self, cell: CellIndex) -> Option<&[f64]> {
        self.cells.binary_search(&cell).ok().map(|r| self.row(r))
    }
}

/// Fit the joint transform on both cities and return their latent matrices.
pub fn fit_joint(
    f_src: &FeatureMatrix,
    f_tgt: &FeatureMatrix,
    d_prime: usize,
) -> Result<(CoPcaTransform, LatentMatrix, LatentMatrix)> {
    if f_src.columns != f_tgt.columns {
        return Err(Error::shape(format!(
            "source and target feature schemas differ ({} vs {} columns)",
            f_src.n_cols(),
            f_tgt.n_cols()
        )));
    }
    let d = f_src.n_cols();
    let n = f_src.n_rows() + f_tgt.n_rows();
    if d_prime == 0 || d_prime > d {
        return Err(Error::invalid(format!("latent dimension {d_prime} outside [1, {d}]")));
    }
    if n < d_prime {
        return Err(Error::invalid(format!(
            "{n} stacked rows cannot support {d_prime} components"
        )));
    }

    let mut stacked = Vec::with_capacity(n * d);
    stacked.extend_from_slice(&f_src.values);
    stacked.extend_from_slice(&f_tgt.values);

    let (means, scales) = column_stats(&stacked, n, d);
    // Standardize, then covariance C = ZᵀZ/(N−1).
    let mut z = stacked;
    for r in 0..n {
        for j in 0..d {
            z[r * d + j] = (z[r * d + j] - means[j]) / scales[j];
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &z[r * d..(r + 1) * d];
        for a in 0..d {
            let va = row[a];
            if va != 0.0 {
                for b in a..d {
                    cov[a * d + b] += va * row[b];
                }
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigh(cov, d)?;
    // Order components by descending eigenvalue (stable on ties).
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]).then(a.cmp(&b)));
    let lambda_max = eigvals[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&c| eigvals[c] > lambda_max * 1e-10 && eigvals[c] > 0.0)
        .count();
    if d_prime > rank {
        return Err(Error::invalid(format!(
            "requested {d_prime} components but the stacked data only has rank {rank}"
        )));
    }

    let mut projection = vec![0.0; d * d_prime];
    let mut explained = Vec::with_capacity(d_prime);
    for (c, &src_col) in order[..d_prime].iter().enumerate() {
        // Deterministic sign: the largest-magnitude entry (first on ties)
        // of each component is positive.
        let mut arg = 0;
        for j in 1..d {
            if eigvecs[j * d + src_col].abs() > eigvecs[arg * d + src_col].abs() {
                arg = j;
            }
        }
        let flip = if eigvecs[arg * d + src_col] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            projection[j * d_prime + c] = flip * eigvecs[j * d + src_col];
        }
        explained.push(eigvals[src_col].max(0.0));
    }

    let t = CoPcaTransform {
        columns: f_src.columns.clone(),
        column_means: means,
        column_scales: scales,
        projection,
        explained_variance: explained,
    };
    let latent_src = transform(&t, f_src)?;
    let latent_tgt = transform(&t, f_tgt)?;
    Ok((t, latent_src, latent_tgt))
}

/// Apply a fitted transform: `(F − means)/scales · projection`.
///
/// Uses the identical arithmetic path as `fit_joint`'s own outputs, so
/// re-applying to the fit inputs is bit-identical.
pub fn transform(t: &CoPcaTransform, f: &FeatureMatrix) -> Result<LatentMatrix> {
    if f.columns != t.columns {
        return Err(Error::shape(format!(
            "matrix schema ({} columns) differs from the fitted transform ({} columns)",
            f.n_cols(),
            t.input_dim()
        )));
    }
    let d = t.input_dim();
    let dp = t.latent_dim();
    let mut values = vec![0.0; f.n_rows() * dp];
    let mut zrow = vec![0.0; d];
    for r in 0..f.n_rows() {
        let row = f.row(r);
        for j in 0..d {
            zrow[j] = (row[j] - t.column_means[j]) / t.column_scales[j];
        }
        let out = &mut values[r * dp..(r + 1) * dp];
        for (j, &zj) in zrow.iter().enumerate() {
            if zj != 0.0 {
                let prow = &t.projection[j * dp..(j + 1) * dp];
                for (o, &p) in out.iter_mut().zip(prow) {
                    *o += zj * p;
                }
            }
        }
    }
    Ok(LatentMatrix { cells: f.cells.clone(), dim: dp, values })
}

/// Column means and z-score scales over a row-major n×d block. Columns whose
/// sample standard deviation is negligible relative to their mean get scale 1.
fn column_stats(values: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            means[j] += values[r * d + j];
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut scales = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            let c = values[r * d + j] - means[j];
            scales[j] += c * c;
        }
    }
    for (j, s) in scales.iter_mut().enumerate() {
        let std = if n > 1 { (*s / (n - 1) as f64).sqrt() } else { 0.0 };
        *s = if std > 1e-9 * (1.0 + means[j].abs()) { std } else { 1.0 };
    }
    (means, scales)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d×d).
///
/// Returns eigenvalues and the eigenvector matrix V (row-major; column c of
/// V is the eigenvector of eigenvalue c), with VᵀAV diagonal.
fn jacobi_eigh(mut a: Vec<f64>, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; d * d];
    for j in 0..d {
        v[j * d + j] = 1.0;
    }
    if d == 1 {
        return Ok((vec![a[0]], v));
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (frob * 1e-14).max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            return Ok(((0..d).map(|j| a[j * d + j]).collect(), v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for j in 0..d {
                    let ajp = a[j * d + p];
                    let ajq = a[j * d + q];
                    a[j * d + p] = c * ajp - s * ajq;
                    a[j * d + q] = s * ajp + c * ajq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for j in 0..d {
                    let vjp = v[j * d + p];
                    let vjq = v[j * d + q];
                    v[j * d + p] = c * vjp - s * vjq;
                    v[j * d + q] = s * vjp + c * vjq;
                }
            }
        }
    }
    Err(Error::numeric("Jacobi eigendecomposition did not converge in 64 sweeps"))
}
