//! Reference methods for the comparison table: ridge regression and
//! K-nearest-neighbor averaging.
//!
//! Both consume the same latent features as the network and both emit
//! patterns through the same decoding chain, so KLMSE numbers are directly
//! comparable. Ridge fits closed-form in the k/2 coefficient space; its
//! per-pattern targets are the least-squares preimage of the decoding chain
//! (softplus inverse of the scaled pattern, then the low-pass analysis
//! band), so a perfect linear fit reproduces the pattern itself rather than
//! a smeared version of it.

use std::collections::BTreeMap;

use crate::copca::LatentMatrix;
use crate::dwt::{dwt_level1, WaveletFilters};
use crate::error::{Error, Result};
use crate::grid::{CellIndex, ProbVector};
use crate::model::decode_head;

/// Closed-form l2-regularized linear predictor of head coefficients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RidgeModel {
    /// [d′][k/2] row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub input_dim: usize,
    pub wavelet: String,
}

/// ln(e^y − 1), stable at both ends.
fn softplus_inverse(y: f64) -> f64 {
    if y > 20.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Encode a pattern as the head-space coefficients whose decoding best
/// reproduces it: v = softplus⁻¹(k·pattern), coefficients = low-pass
/// analysis of v (the least-squares preimage under an orthogonal filter).
pub fn encode_target(pattern: &ProbVector, wavelet: &WaveletFilters) -> Result<Vec<f64>> {
    let k = pattern.len() as f64;
    let v: Vec<f64> = pattern.values().iter().map(|&t| softplus_inverse(t * k)).collect();
    Ok(dwt_level1(&v, wavelet)?.0)
}

/// Fit ridge per output column on centered data; the intercept absorbs the
/// means so λ only shrinks the slopes.
pub fn ridge_fit(features: &[Vec<f64>], targets: &[Vec<f64>], lambda: f64, wavelet: &str) -> Result<RidgeModel> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::invalid(format!(
            "ridge needs matching nonempty samples, got {} features and {} targets",
            features.len(),
            targets.len()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("ridge λ must be positive, got {lambda}")));
    }
    let n = features.len();
    let d = features[0].len();
    let out = targets[0].len();
    if features.iter().any(|f| f.len() != d) || targets.iter().any(|t| t.len() != out) {
        return Err(Error::shape("ragged feature or target rows"));
    }
    let x_mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64)
        .collect();
    let y_mean: Vec<f64> = (0..out)
        .map(|m| targets.iter().map(|t| t[m]).sum::<f64>() / n as f64)
        .collect();
    // Normal equations on centered data: (XᵀX + λI) W = XᵀY.
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d * out];
    for (f, t) in features.iter().zip(targets) {
        let xc: Vec<f64> = f.iter().zip(&x_mean).map(|(&v, &m)| v - m).collect();
        let yc: Vec<f64> = t.iter().zip(&y_mean).map(|(&v, &m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                xtx[i * d + j] += xc[i] * xc[j];
            }
            for m in 0..out {
                xty[i * out + m] += xc[i] * yc[m];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            xtx[i * d + j] = xtx[j * d + i];
        }
        xtx[i * d + i] += lambda;
    }
    let weights = cholesky_solve(&xtx, &xty, d, out)?;
    let bias: Vec<f64> = (0..out)
        .map(|m| y_mean[m] - (0..d).map(|j| x_mean[j] * weights[j * out + m]).sum::<f64>())
        .collect();
    Ok(RidgeModel {
        weights,
        bias,
        lambda,
        input_dim: d,
        wavelet: wavelet.to_string(),
    })
}

/// Solve A·W = B for SPD A (d×d) with `out` right-hand columns.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize, out: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for t in 0..j {
                s -= l[i * d + t] * l[j * d + t];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::numeric(format!(
                        "normal-equation matrix lost positive definiteness at pivot {i}"
                    )));
                }
                l[i * d + j] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut w = b.to_vec();
    // Forward substitution L·Z = B, in place column-wise.
    for i in 0..d {
        for t in 0..i {
            let lt = l[i * d + t];
            for m in 0..out {
                let z = w[t * out + m];
                w[i * out + m] -= lt * z;
            }
        }
        for m in 0..out {
            w[i * out + m] /= l[i * d + i];
        }
    }
    // Back substitution Lᵀ·W = Z.
    for i in (0..d).rev() {
        for t in i + 1..d {
            let lt = l[t * d + i];
            for m in 0..out {
                let z = w[t * out + m];
                w[i * out + m] -= lt * z;
            }
        }
        for m in 0..out {
            w[i * out + m] /= l[i * d + i];
        }
    }
    Ok(w)
}

impl RidgeModel {
    /// Predicted head coefficients for one feature vector.
    pub fn predict_coeffs(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim {
            return Err(Error::shape(format!(
                "ridge expects {} features, got {}",
                self.input_dim,
                features.len()
            )));
        }
        let out = self.bias.len();
        let mut y = self.bias.clone();
        for (j, &x) in features.iter().enumerate() {
            for (m, yv) in y.iter_mut().enumerate() {
                *yv += x * self.weights[j * out + m];
            }
        }
        Ok(y)
    }

    /// Predicted pattern, decoded exactly like the network head.
    pub fn predict_pattern(&self, features: &[f64], norm_eps: f64) -> Result<ProbVector> {
        let coeffs = self.predict_coeffs(features)?;
        decode_head(&coeffs, &WaveletFilters::by_name(&self.wavelet)?, norm_eps)
    }
}

/// Fit ridge on mined patterns and predict every cell of a target city.
pub fn ridge_infer_city(
    train_latents: &LatentMatrix,
    train_patterns: &BTreeMap<CellIndex, ProbVector>,
    target_latents: &LatentMatrix,
    lambda: f64,
    wavelet: &str,
    norm_eps: f64,
) -> Result<(RidgeModel, BTreeMap<CellIndex, ProbVector>)> {
    let filters = WaveletFilters::by_name(wavelet)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (cell, pattern) in train_patterns {
        let row = train_latents
            .row_of(*cell)
            .ok_or_else(|| Error::invalid(format!("no latent features for training cell {cell}")))?;
        x.push(row.to_vec());
        y.push(encode_target(pattern, &filters)?);
    }
    let model = ridge_fit(&x, &y, lambda, wavelet)?;
    let mut predictions = BTreeMap::new();
    for (r, cell) in target_latents.cells.iter().enumerate() {
        predictions.insert(*cell, model.predict_pattern(target_latents.row(r), norm_eps)?);
    }
    Ok((model, predictions))
}

/// A KNN prediction; `fallback` marks a zero-norm query answered uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub pattern: ProbVector,
    pub fallback: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Average the patterns of the K most cosine-similar training rows.
///
/// Ties keep the lower original index. The arithmetic mean of valid
/// patterns is itself normalized, so the result keeps its values bit-exact
/// (a single neighbor returns that row's pattern unchanged).
pub fn knn_predict(
    query: &[f64],
    train_features: &[Vec<f64>],
    train_patterns: &[ProbVector],
    k: usize,
) -> Result<KnnPrediction> {
    if train_features.is_empty() || train_features.len() != train_patterns.len() {
        return Err(Error::invalid(format!(
            "KNN needs matching nonempty training data, got {} features and {} patterns",
            train_features.len(),
            train_patterns.len()
        )));
    }
    if k == 0 || k > train_features.len() {
        return Err(Error::invalid(format!(
            "K must be between 1 and the training size {}, got {k}",
            train_features.len()
        )));
    }
    let slots = train_patterns[0].len();
    if train_patterns.iter().any(|p| p.len() != slots) {
        return Err(Error::shape("training patterns disagree on the slot count"));
    }
    if query.iter().map(|&x| x * x).sum::<f64>() == 0.0 {
        return Ok(KnnPrediction { pattern: ProbVector::uniform(slots)?, fallback: true });
    }
    let mut order: Vec<usize> = (0..train_features.len()).collect();
    let sims: Vec<f64> = train_features.iter().map(|f| cosine(query, f)).collect();
    // Stable sort on descending similarity keeps lower indices first on ties.
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    let mut mean = vec![0.0; slots];
    for &idx in &order[..k] {
        for (m, &v) in mean.iter_mut().zip(train_patterns[idx].values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    Ok(KnnPrediction { pattern: ProbVector::from_positive(mean)?, fallback: false })
}

/// KNN predictions for every cell of a target city.
pub fn knn_infer_city(
    train_latents: &LatentMatrix,
    train_patterns: &BTreeMap<CellIndex, ProbVector>,
    target_latents: &LatentMatrix,
    k: usize,
) -> Result<(BTreeMap<CellIndex, ProbVector>, usize)> {
    let mut features = Vec::new();
    let mut patterns = Vec::new();
    for (cell, pattern) in train_patterns {
        let row = train_latents
            .row_of(*cell)
            .ok_or_else(|| Error::invalid(format!("no latent features for training cell {cell}")))?;
        features.push(row.to_vec());
        patterns.push(pattern.clone());
    }
    let mut predictions = BTreeMap::new();
    let mut fallbacks = 0;
    for (r, cell) in target_latents.cells.iter().enumerate() {
        let p = knn_predict(target_latents.row(r), &features, &patterns, k)?;
        if p.fallback {
            fallbacks += 1;
        }
        predictions.insert(*cell, p.pattern);
    }
    Ok((predictions, fallbacks))
}
