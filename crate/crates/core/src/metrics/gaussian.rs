//! Frechet and kernel distances between feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MupadError, Result};

/// Eigenvalues below `-EIG_TOL * max(1, largest)` are rejected; others below zero clip to 0.
const EIG_TOL: f64 = 1e-8;

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(MupadError::Invalid(format!(
                "covariance has {} entries for dimension {d}",
                cov.len()
            )));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(MupadError::Invalid(format!("covariance asymmetric by {asym}")));
        }
        Ok(GaussianStats {
            mean: DVector::from_vec(mean),
            cov,
            n,
        })
    }

    /// From `n` rows of width `d` (row-major), `n >= 2`.
    pub fn from_rows(rows: &[f64], d: usize) -> Result<Self> {
        if d == 0 || !rows.len().is_multiple_of(d) || rows.len() / d < 2 {
            return Err(MupadError::Invalid(format!(
                "need at least two rows of width {d}, got {} values",
                rows.len()
            )));
        }
        let n = rows.len() / d;
        let x = DMatrix::from_row_slice(n, d, rows);
        let mean = x.row_mean().transpose();
        let mut centred = x;
        for mut r in centred.row_iter_mut() {
            r -= mean.transpose();
        }
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        // exact symmetry
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianStats { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn checked_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::new(m);
    let top = e.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let low = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if low < -EIG_TOL * top.max(1.0) {
        return Err(MupadError::Invalid(format!(
            "{what} is not positive semi-definite (eigenvalue {low})"
        )));
    }
    Ok(e)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = checked_eigen(m.clone(), what)?;
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MupadError::Invalid(format!(
            "feature dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let s1h = psd_sqrt(&a.cov, "first covariance")?;
    let mut m = &s1h * &b.cov * &s1h;
    m = (&m + m.transpose()) * 0.5;
    let e = checked_eigen(m, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Frechet distance between two row-major feature sets.
pub fn fid(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    frechet_distance(&GaussianStats::from_rows(a, d)?, &GaussianStats::from_rows(b, d)?)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with kernel `(x.y/d + 1)^3`.
///
/// Within-set sums exclude the diagonal. When both sets have the same size the
/// cross term excludes `i == j` pairs as well, so a set compared with itself scores 0.
pub fn kid(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if d == 0 || !a.len().is_multiple_of(d) || !b.len().is_multiple_of(d) || a.len() / d < 2 || b.len() / d < 2 {
        return Err(MupadError::Invalid(
            "kernel distance needs at least two samples per set".into(),
        ));
    }
    let (n, m) = (a.len() / d, b.len() / d);
    let row = |x: &'_ [f64], i: usize| -> Vec<f64> { x[i * d..(i + 1) * d].to_vec() };
    let within = |x: &[f64], k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += poly_kernel(&row(x, i), &row(x, j));
                }
            }
        }
        s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..m {
            if n == m && i == j {
                continue;
            }
            cross += poly_kernel(&row(a, i), &row(b, j));
            count += 1;
        }
    }
    Ok(within(a, n) + within(b, m) - 2.0 * cross / count as f64)
}
