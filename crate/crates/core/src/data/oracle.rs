//! Density read-back used to score generated images.

use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

pub const LUMINANCE_THRESHOLD: f64 = 0.35;

pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(MupadError::Invalid(format!("expected [3, H, W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = img.data();
    Ok((0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect())
}

/// Number of 4-connected components of `mask` (`h x w`, row-major).
pub fn count_components(mask: &[bool], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

/// Count of dark blobs mapped back to the density factor: `clamp((count - 3) / 12, 0, 1)`.
pub fn oracle_density(img: &Tensor) -> Result<f64> {
    let lum = luminance(img)?;
    let mask: Vec<bool> = lum.iter().map(|&l| l < LUMINANCE_THRESHOLD).collect();
    let c = count_components(&mask, img.shape()[1], img.shape()[2]);
    Ok(((c as f64 - 3.0) / 12.0).clamp(0.0, 1.0))
}
