//! Bootstrap confidence intervals and permutation tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MupadError, Result};

pub const DEFAULT_BOOTSTRAP: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl MetricReport {
    /// `name<TAB>value<TAB>ci_low<TAB>ci_high`.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.name, self.value, self.ci_low, self.ci_high
        )
    }
}

/// Empirical percentile of sorted data, `q` in [0, 1], at Weibull plotting positions
/// `q (n + 1)` with linear interpolation, clamped to the sample range.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = (q * (n + 1) as f64 - 1.0).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap over `n` items. `metric` receives the selected item indices; the point value uses
/// every item once. The interval is the 2.5/97.5 percentile range of the resampled values,
/// widened to include the point value when `iterations > 1`.
pub fn bootstrap<F>(name: &str, n: usize, iterations: usize, seed: u64, metric: F) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if iterations == 0 || n == 0 {
        return Err(MupadError::Invalid("bootstrap needs data and at least one iteration".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let value = metric(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        stats.push(metric(&idx)?);
    }
    stats.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (percentile(&stats, 0.025), percentile(&stats, 0.975));
    if iterations > 1 {
        lo = lo.min(value);
        hi = hi.max(value);
    }
    Ok(MetricReport {
        name: name.to_string(),
        value,
        ci_low: lo,
        ci_high: hi,
        iterations,
        seed,
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Two-sided permutation test on the difference of means; `(count + 1) / (iters + 1)`.
pub fn permutation_test(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() || iters == 0 {
        return Err(MupadError::Invalid("permutation test needs two nonempty groups".into()));
    }
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for _ in 0..iters {
        pooled.shuffle(&mut rng);
        let d = (mean(&pooled[..a.len()]) - mean(&pooled[a.len()..])).abs();
        if d >= observed - 1e-12 {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iters + 1) as f64)
}

/// Two-sided paired sign-flip permutation test on the mean difference.
pub fn paired_permutation_test(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() || iters == 0 {
        return Err(MupadError::Invalid("paired test needs equal nonempty arrays".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean(&diffs).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for _ in 0..iters {
        let s: f64 = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { d } else { -d })
            .sum();
        if (s / diffs.len() as f64).abs() >= observed - 1e-12 {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iters + 1) as f64)
}
