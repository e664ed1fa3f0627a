//! Cosine similarity and Pearson correlations.

use crate::error::{MupadError, Result};

/// Mean row-wise cosine similarity of paired rows of width `d`.
pub fn cosine_similarity_mean(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if d == 0 || a.len() != b.len() || a.is_empty() || !a.len().is_multiple_of(d) {
        return Err(MupadError::Invalid(format!(
            "cosine needs paired rows of width {d}, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.chunks(d).zip(b.chunks(d)) {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            return Err(MupadError::Invalid("zero-norm row in cosine similarity".into()));
        }
        total += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
    }
    Ok(total / (a.len() / d) as f64)
}

/// Sample Pearson correlation. Constant input is [`MupadError::Undefined`].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MupadError::Invalid(format!(
            "pearson needs two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MupadError::Undefined("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Patch-level correlation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPcc {
    /// Mean over patches with a defined correlation.
    pub mean: f64,
    pub used: usize,
    /// Patches skipped because one side was constant.
    pub undefined: usize,
}

/// Mean over patches of the pixel-wise Pearson correlation.
pub fn patch_pcc(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<PatchPcc> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MupadError::Invalid("patch_pcc needs paired, nonempty patch lists".into()));
    }
    let (mut sum, mut used, mut undefined) = (0.0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        match pearson(p, t) {
            Ok(r) => {
                sum += r;
                used += 1;
            }
            Err(MupadError::Undefined(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(MupadError::Undefined("every patch has a constant side".into()));
    }
    Ok(PatchPcc {
        mean: sum / used as f64,
        used,
        undefined,
    })
}

/// Per-slide mean of patch-mean intensities, slides in ascending index order.
pub fn slide_means(patches: &[Vec<f64>], slide: &[usize]) -> Result<Vec<f64>> {
    if patches.len() != slide.len() || patches.is_empty() {
        return Err(MupadError::Invalid("one slide index per patch required".into()));
    }
    let slides = slide.iter().max().map_or(0, |&m| m + 1);
    let mut sum = vec![0.0; slides];
    let mut count = vec![0usize; slides];
    for (p, &s) in patches.iter().zip(slide) {
        if p.is_empty() {
            return Err(MupadError::Invalid("empty patch".into()));
        }
        sum[s] += p.iter().sum::<f64>() / p.len() as f64;
        count[s] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect())
}

/// Pearson correlation over slides of aggregated patch-mean intensities.
pub fn slide_pcc(pred: &[Vec<f64>], truth: &[Vec<f64>], slide: &[usize]) -> Result<f64> {
    pearson(&slide_means(pred, slide)?, &slide_means(truth, slide)?)
}
