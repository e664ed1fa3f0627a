//! Lossless space-to-depth latent codec.

use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

pub const LATENT_FACTOR: usize = 4;

/// `[C, H, W] -> [C*f*f, H/f, W/f]`. Pixel `(c, i, j)` lands in channel
/// `((i mod f)*f + (j mod f))*C + c` at `(i/f, j/f)`.
pub fn latent_encode(img: &Tensor, f: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || f == 0 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
        return Err(MupadError::Invalid(format!(
            "cannot encode {s:?} at factor {f}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; c * h * w];
    let d = img.data();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let oc = ((i % f) * f + j % f) * c + ch;
                out[(oc * ho + i / f) * wo + j / f] = d[(ch * h + i) * w + j];
            }
        }
    }
    Ok(Tensor::new(&[c * f * f, ho, wo], out)?)
}

/// Inverse of [`latent_encode`].
pub fn latent_decode(z: &Tensor, f: usize) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 3 || f == 0 || !s[0].is_multiple_of(f * f) {
        return Err(MupadError::Invalid(format!(
            "cannot decode {s:?} at factor {f}"
        )));
    }
    let (c, ho, wo) = (s[0] / (f * f), s[1], s[2]);
    let (h, w) = (ho * f, wo * f);
    let mut out = vec![0.0; c * h * w];
    let d = z.data();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let oc = ((i % f) * f + j % f) * c + ch;
                out[(ch * h + i) * w + j] = d[(oc * ho + i / f) * wo + j / f];
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Pixel latent in [0, 1] to the centred range the denoiser works in.
pub fn to_model_space(z: &Tensor) -> Tensor {
    z.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_space(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Encode straight to model space.
pub fn encode_image(img: &Tensor) -> Result<Tensor> {
    Ok(to_model_space(&latent_encode(img, LATENT_FACTOR)?))
}

/// Decode from model space, clamped to [0, 1].
pub fn decode_image(z: &Tensor) -> Result<Tensor> {
    latent_decode(&from_model_space(z), LATENT_FACTOR)
}
