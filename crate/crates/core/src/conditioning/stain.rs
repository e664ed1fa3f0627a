//! HED stain-space colour augmentation.

use mupad_tensor::Tensor;
use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MupadError, Result};

/// Smallest intensity before taking optical density.
const MIN_INTENSITY: f64 = 1e-6;

/// Row-normalized stain vectors (hematoxylin, eosin, DAB) and the inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct StainMatrix {
    /// Row `k` is stain `k`'s optical-density colour.
    pub rgb_from_hed: Matrix3<f64>,
    pub hed_from_rgb: Matrix3<f64>,
}

impl StainMatrix {
    pub fn ruifrok() -> Self {
        let rows = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];
        let mut m = Matrix3::zeros();
        for (k, r) in rows.iter().enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..3 {
                m[(k, c)] = r[c] / n;
            }
        }
        let inv = m.try_inverse().expect("stain matrix is invertible");
        StainMatrix {
            rgb_from_hed: m,
            hed_from_rgb: inv,
        }
    }

    /// Stain concentrations of one RGB pixel.
    pub fn to_hed(&self, rgb: [f64; 3]) -> [f64; 3] {
        let od = nalgebra::RowVector3::from_fn(|_, c| -rgb[c].max(MIN_INTENSITY).ln());
        let hed = od * self.hed_from_rgb;
        [hed[0], hed[1], hed[2]]
    }

    pub fn to_rgb(&self, hed: [f64; 3]) -> [f64; 3] {
        let h = nalgebra::RowVector3::new(hed[0], hed[1], hed[2]);
        let od = h * self.rgb_from_hed;
        [(-od[0]).exp(), (-od[1]).exp(), (-od[2]).exp()]
    }
}

/// Per-stain `hed' = hed * scale + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainPerturbation {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl StainPerturbation {
    pub fn identity() -> Self {
        StainPerturbation {
            scale: [1.0; 3],
            shift: [0.0; 3],
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, sigma_scale: f64, sigma_shift: f64) -> Self {
        let a = Normal::new(1.0, sigma_scale).expect("finite sigma");
        let b = Normal::new(0.0, sigma_shift).expect("finite sigma");
        StainPerturbation {
            scale: [a.sample(rng), a.sample(rng), a.sample(rng)],
            shift: [b.sample(rng), b.sample(rng), b.sample(rng)],
        }
    }
}

/// Augments a `[3, H, W]` image; output clamped to [0, 1].
pub fn hed_augment(rgb: &Tensor, p: &StainPerturbation) -> Result<Tensor> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(MupadError::Invalid(format!("hed_augment expects [3, H, W], got {s:?}")));
    }
    let m = StainMatrix::ruifrok();
    let n = s[1] * s[2];
    let d = rgb.data();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let hed = m.to_hed([d[i], d[n + i], d[2 * n + i]]);
        let hed = [0, 1, 2].map(|k| hed[k] * p.scale[k] + p.shift[k]);
        let px = m.to_rgb(hed);
        for c in 0..3 {
            out[c * n + i] = px[c].clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::new(s, out)?)
}
