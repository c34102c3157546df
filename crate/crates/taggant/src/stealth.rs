//! Stealth measurements for a signed dataset: PSNR against the original
//! images, and k-NN outlier scoring in a frozen model's feature space to
//! estimate how discoverable the perturbed samples are.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::models::Model;

/// 20*log10(peak/RMSE); +infinity when the images are identical.
pub fn psnr(original: &[f64], signed: &[f64], peak: f64) -> Result<f64> {
    if original.len() != signed.len() || original.is_empty() {
        return Err(Error::Shape(format!(
            "psnr: {} vs {} pixels",
            original.len(),
            signed.len()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::Config(format!("psnr peak {peak} must be > 0")));
    }
    let mse: f64 = original
        .iter()
        .zip(signed)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / original.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Penultimate-layer activations, one row per image.
pub fn feature_extract(model: &Model, images: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = model.spec.input_shape;
    if images.len() != n * c * h * w {
        return Err(Error::Shape(format!(
            "feature_extract: {} pixels for batch {n}",
            images.len()
        )));
    }
    let mut rows = Vec::with_capacity(n);
    // chunk to keep per-tape memory bounded
    for start in (0..n).step_by(64) {
        let b = 64.min(n - start);
        let t = Tape::new();
        let x = t.constant(&[b, c, h, w], images[start * c * h * w..(start + b) * c * h * w].to_vec())?;
        let fwd = model.forward(&t, &x)?;
        let feats = fwd.penultimate.value();
        let dim = feats.len() / b;
        for r in 0..b {
            rows.push(feats[r * dim..(r + 1) * dim].to_vec());
        }
    }
    Ok(rows)
}

/// Mean Euclidean distance to the k_nn nearest neighbors (self excluded);
/// higher is more anomalous. The boolean flags the degenerate all-identical
/// case, where every score is zero.
pub fn knn_outlier_scores(features: &[Vec<f64>], k_nn: usize) -> Result<(Vec<f64>, bool)> {
    let n = features.len();
    if k_nn == 0 || k_nn >= n {
        return Err(Error::Config(format!("k_nn={k_nn} must be in 1..{n}")));
    }
    if let Some(row) = features.iter().find(|r| r.len() != features[0].len()) {
        return Err(Error::Shape(format!(
            "knn: ragged feature rows ({} vs {})",
            row.len(),
            features[0].len()
        )));
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    features[i]
                        .iter()
                        .zip(&features[j])
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[..k_nn].iter().sum::<f64>() / k_nn as f64
        })
        .collect();
    let degenerate = scores.iter().all(|&s| s == 0.0);
    Ok((scores, degenerate))
}

/// Fraction of taggants among the top_n samples by outlier score, ties
/// broken toward the lower index.
pub fn taggant_detection_rate(scores: &[f64], taggant_indices: &[usize], top_n: usize) -> Result<f64> {
    if top_n > scores.len() {
        return Err(Error::Config(format!(
            "top_n={top_n} > {} samples",
            scores.len()
        )));
    }
    if taggant_indices.is_empty() {
        return Err(Error::Config("no taggant indices given".into()));
    }
    if let Some(&bad) = taggant_indices.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Config(format!("taggant index {bad} out of range")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let flagged: std::collections::HashSet<usize> = order.into_iter().take(top_n).collect();
    let caught = taggant_indices.iter().filter(|i| flagged.contains(i)).count();
    Ok(caught as f64 / taggant_indices.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StealthReport {
    /// Over signed images only.
    pub mean_psnr_db: f64,
    pub min_psnr_db: f64,
    /// True when every signed image is bit-identical to its original
    /// (PSNR is +infinity; the dB fields then hold f64::MAX sentinels).
    pub psnr_infinite: bool,
    pub outlier_scores: Vec<f64>,
    pub degenerate_features: bool,
    pub k_nn: usize,
    pub top_n: usize,
    pub detection_rate: f64,
    /// Chance rate: top_n / N.
    pub base_rate: f64,
}

/// Full stealth evaluation of `signed` against `original` using the frozen
/// `model` as feature extractor.
pub fn stealth_report(
    original: &Dataset,
    signed: &Dataset,
    model: &Model,
    taggant_indices: &[usize],
    k_nn: usize,
    top_n: usize,
) -> Result<StealthReport> {
    if original.shape != signed.shape || original.len() != signed.len() {
        return Err(Error::Shape("stealth: dataset geometry mismatch".into()));
    }
    let mut psnrs = Vec::with_capacity(taggant_indices.len());
    for &i in taggant_indices {
        if i >= original.len() {
            return Err(Error::Config(format!("taggant index {i} out of range")));
        }
        psnrs.push(psnr(original.image(i), signed.image(i), 1.0)?);
    }
    let finite: Vec<f64> = psnrs.iter().copied().filter(|p| p.is_finite()).collect();
    let psnr_infinite = finite.is_empty();
    let (mean_psnr_db, min_psnr_db) = if psnr_infinite {
        (f64::MAX, f64::MAX)
    } else {
        (
            finite.iter().sum::<f64>() / finite.len() as f64,
            finite.iter().cloned().fold(f64::INFINITY, f64::min),
        )
    };
    let features = feature_extract(model, &signed.images, signed.len())?;
    let (outlier_scores, degenerate_features) = knn_outlier_scores(&features, k_nn)?;
    let detection_rate = taggant_detection_rate(&outlier_scores, taggant_indices, top_n)?;
    Ok(StealthReport {
        mean_psnr_db,
        min_psnr_db,
        psnr_infinite,
        outlier_scores,
        degenerate_features,
        k_nn,
        top_n,
        detection_rate,
        base_rate: top_n as f64 / signed.len() as f64,
    })
}
