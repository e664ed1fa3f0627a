//! Minimal raster line plots.

use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

const PALETTE: [[f64; 3]; 6] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
];
const MARGIN: usize = 8;

/// Renders each series as a polyline on a shared axis; returns a `[3, height, width]` image.
pub fn line_plot(series: &[Vec<f64>], width: usize, height: usize) -> Result<Tensor> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(MupadError::Invalid(format!("plot size {width}x{height} too small")));
    }
    let mut img = vec![1.0; 3 * width * height];
    let plane = width * height;
    let mut put = |x: usize, y: usize, c: [f64; 3]| {
        for (k, v) in c.iter().enumerate() {
            img[k * plane + y * width + x] = *v;
        }
    };
    let (x0, x1, y0, y1) = (MARGIN, width - MARGIN, MARGIN, height - MARGIN);
    for x in x0..=x1 {
        put(x, y1, [0.0; 3]);
    }
    for y in y0..=y1 {
        put(x0, y, [0.0; 3]);
    }
    let finite = series.iter().flatten().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return Err(MupadError::Invalid("no finite values to plot".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let n = s.len().max(2) - 1;
        let pt = |i: usize| -> (f64, f64) {
            let x = x0 as f64 + (x1 - x0) as f64 * i as f64 / n as f64;
            let y = y1 as f64 - (y1 - y0) as f64 * (s[i] - lo) / span;
            (x, y)
        };
        for i in 0..s.len() {
            let (xa, ya) = pt(i);
            let (xb, yb) = if i + 1 < s.len() { pt(i + 1) } else { (xa, ya) };
            let steps = ((xb - xa).abs().max((yb - ya).abs()).ceil() as usize).max(1);
            for k in 0..=steps {
                let f = k as f64 / steps as f64;
                let (x, y) = (xa + (xb - xa) * f, ya + (yb - ya) * f);
                if x.is_finite() && y.is_finite() {
                    put(x.round() as usize, y.round() as usize, color);
                }
            }
        }
    }
    Ok(Tensor::new(&[3, height, width], img)?)
}
