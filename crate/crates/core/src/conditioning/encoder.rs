//! Frozen random-weight convolutional encoders.

use mupad_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{MupadError, Result};

pub const IMAGE_CHANNELS: usize = 3;
pub const ENCODER_WIDTH: usize = 32;
pub const TEACHER_WIDTH: usize = 48;
pub const CONDITION_SEED: u64 = 0x0C0D;
pub const TEACHER_SEED: u64 = 0x7EAC;

#[derive(Clone, Debug)]
struct ConvLayer {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

/// Deterministic conv stack `3 -> ... -> width`, stride 2 per layer, tanh between layers.
///
/// Output tokens are layer-normalized per grid cell.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    pub seed: u64,
    layers: Vec<ConvLayer>,
}

/// Per-image token grid and pooled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    /// `[gh*gw, width]`.
    pub tokens: Tensor,
    /// Spatial mean of the tokens, `[width]`.
    pub cls: Vec<f64>,
}

impl StubEncoder {
    pub fn new(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = IMAGE_CHANNELS;
        for &cout in widths {
            let std = (1.5 / (cin * 9) as f64).sqrt();
            layers.push(ConvLayer {
                w: Tensor::randn(&[cout, cin, 3, 3], std, &mut rng),
                b: Tensor::randn(&[1, cout, 1, 1], 0.1, &mut rng),
                stride: 2,
            });
            cin = cout;
        }
        StubEncoder { seed, layers }
    }

    /// The image-condition encoder: three stride-2 layers to a 4x4 grid of width 32.
    pub fn condition() -> Self {
        Self::new(CONDITION_SEED, &[16, 32, ENCODER_WIDTH])
    }

    /// The alignment teacher: independent seed, width 48.
    pub fn teacher() -> Self {
        Self::new(TEACHER_SEED, &[24, 48, TEACHER_WIDTH])
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(IMAGE_CHANNELS, |l| l.w.shape()[0])
    }

    /// Total downsampling factor.
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// SHA-256 over every weight, in layer order.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.w.data().iter().chain(l.b.data()) {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Feature maps `[B, width, H/stride, W/stride]` for images `[B, 3, H, W]` in [0, 1].
    pub fn feature_grid(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS {
            return Err(MupadError::Invalid(format!(
                "encoder expects [B, {IMAGE_CHANNELS}, H, W], got {s:?}"
            )));
        }
        let stride = self.stride();
        if !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return Err(MupadError::Invalid(format!(
                "image extent {}x{} not divisible by encoder stride {stride}",
                s[2], s[3]
            )));
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(images.map(|v| 2.0 * v - 1.0));
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.constant(l.w.clone());
            let b = tape.constant(l.b.clone());
            x = tape.conv2d(x, w, l.stride, 1)?;
            x = tape.add(x, b)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        Ok(tape.value(x).clone())
    }

    /// Token grids `[B, N, width]` (layer-normalized) for a batch of images.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let g = self.feature_grid(images)?;
        let s = g.shape().to_vec();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let mut tape = Tape::new();
        let x = tape.constant(g);
        let x = tape.reshape(x, &[b, c, n])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let x = tape.layer_norm(x, crate::model::dit::LN_EPS)?;
        Ok(tape.value(x).clone())
    }

    pub fn encode(&self, image: &Tensor) -> Result<ImageEmbedding> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        let tokens = self.encode_batch(&batch)?.index_first(0);
        let cls = mean_token(&tokens);
        Ok(ImageEmbedding { tokens, cls })
    }

    /// Spatially pooled features `[B, width]` of the raw grid; used as the metric feature space.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let g = self.feature_grid(images)?;
        let s = g.shape().to_vec();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(b * c);
        for chunk in g.data().chunks(n) {
            out.push(chunk.iter().sum::<f64>() / n as f64);
        }
        Ok(Tensor::new(&[b, c], out)?)
    }
}

/// Column mean of a `[N, D]` token matrix.
pub fn mean_token(tokens: &Tensor) -> Vec<f64> {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let mut out = vec![0.0; d];
    for row in tokens.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Teacher feature grid `[B, 48, H/8, W/8]`.
pub fn teacher_features(teacher: &StubEncoder, images: &Tensor) -> Result<Tensor> {
    teacher.feature_grid(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn same_image_same_embedding() {
        let e = StubEncoder::condition();
        let x = image(1);
        assert_eq!(e.encode(&x).unwrap(), e.encode(&x).unwrap());
    }

    #[test]
    fn one_pixel_changes_embedding() {
        let e = StubEncoder::condition();
        let x = image(2);
        let mut y = x.clone();
        y.data_mut()[500] = 1.0 - y.data()[500];
        assert_ne!(e.encode(&x).unwrap().tokens, e.encode(&y).unwrap().tokens);
    }

    #[test]
    fn zero_image_is_finite() {
        let e = StubEncoder::condition();
        let out = e.encode(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(out.tokens.all_finite());
        assert_eq!(out.tokens.shape(), &[16, ENCODER_WIDTH]);
        assert_eq!(out.cls.len(), ENCODER_WIDTH);
    }

    #[test]
    fn teacher_grid_extent_is_image_over_stride() {
        let t = StubEncoder::teacher();
        let x = Tensor::stack(&[image(3), image(4)]).unwrap();
        let g = teacher_features(&t, &x).unwrap();
        assert_eq!(t.stride(), 8);
        assert_eq!(g.shape(), &[2, TEACHER_WIDTH, 4, 4]);
    }

    #[test]
    fn teacher_differs_from_condition_encoder() {
        let (c, t) = (StubEncoder::condition(), StubEncoder::teacher());
        assert_ne!(c.weights_hash(), t.weights_hash());
        let x = Tensor::stack(&[image(5)]).unwrap();
        let a = c.pooled(&x).unwrap();
        let b = t.pooled(&x).unwrap();
        assert_ne!(a.shape(), b.shape());
        let shared: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
        assert!(shared > 1e-3);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let e = StubEncoder::condition();
        assert!(e.encode(&Tensor::zeros(&[1, 32, 32])).is_err());
    }
}
