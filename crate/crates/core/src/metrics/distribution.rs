//! One-dimensional distribution comparisons.

use crate::error::{MupadError, Result};

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// 1-Wasserstein distance as the integral of the absolute quantile-function gap.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MupadError::Invalid("wasserstein1 needs nonempty samples".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        let d: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(d / sa.len() as f64);
    }
    let (n, m) = (sa.len(), sb.len());
    // walk the merged quantile breakpoints k/n and l/m
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (sa[i] - sb[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Probability that a positive outscores a negative, ties counting one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MupadError::Invalid("auc needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    // twice the rank sum of positives, using average ranks for ties
    let mut rank2_pos = 0.0;
    let mut k = 0;
    while k < all.len() {
        let mut e = k;
        while e + 1 < all.len() && all[e + 1].0 == all[k].0 {
            e += 1;
        }
        let twice_avg_rank = (k + 1 + e + 1) as f64;
        let n_pos = all[k..=e].iter().filter(|p| p.1).count() as f64;
        rank2_pos += twice_avg_rank * n_pos;
        k = e + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let u2_pos = rank2_pos - np * (np + 1.0);
    let u2_neg = 2.0 * np * nn - u2_pos;
    let pairs2 = 2.0 * np * nn;
    // evaluate the smaller side directly so swapped classes sum to exactly 1
    Ok(if u2_pos <= u2_neg {
        u2_pos / pairs2
    } else {
        1.0 - u2_neg / pairs2
    })
}
