//! Procedural histology-like patches with known generating factors.

use mupad_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conditioning::{caption, PATHWAY_COUNT};
use crate::error::{MupadError, Result};

pub const IMAGE_SIZE: usize = 32;
pub const MARKER_CHANNELS: usize = 4;
pub const NUISANCE_COUNT: usize = 5;
pub const FACTOR_COUNT: usize = 3 + NUISANCE_COUNT;
pub const FROZEN_RATE: f64 = 0.25;
pub const AVAILABILITY: f64 = 0.5;
pub const STREAKS: usize = 4;
pub const STREAK_AMPLITUDE: f64 = 0.3;
pub const JITTER: f64 = 0.1;
pub const PATHWAY_NOISE_STD: f64 = 0.1;
const PATHWAY_SEED: u64 = 0x9A7B;

pub const NUCLEUS_RGB: [f64; 3] = [0.25, 0.10, 0.35];
const PINK: [f64; 3] = [0.95, 0.72, 0.84];
const PURPLE: [f64; 3] = [0.78, 0.62, 0.90];

/// RNG stream for one sample id. Streams are disjoint so ids can be generated in any order.
fn sample_rng(seed: u64, id: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id.wrapping_mul(4).wrapping_add(stream));
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticFactors {
    pub density: f64,
    pub size: f64,
    pub hue: f64,
    pub nuisance: [f64; NUISANCE_COUNT],
}

impl SyntheticFactors {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut v = [0.0; FACTOR_COUNT];
        for x in &mut v {
            *x = rng.random();
        }
        Self::from_array(v)
    }

    pub fn from_array(v: [f64; FACTOR_COUNT]) -> Self {
        SyntheticFactors {
            density: v[0],
            size: v[1],
            hue: v[2],
            nuisance: v[3..].try_into().expect("five nuisance factors"),
        }
    }

    pub fn to_array(&self) -> [f64; FACTOR_COUNT] {
        let mut v = [0.0; FACTOR_COUNT];
        v[0] = self.density;
        v[1] = self.size;
        v[2] = self.hue;
        v[3..].copy_from_slice(&self.nuisance);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|x| (0.0..=1.0).contains(x)) {
            Ok(())
        } else {
            Err(MupadError::Invalid(format!("factors outside [0, 1]: {self:?}")))
        }
    }

    pub fn nucleus_count(&self) -> usize {
        (3.0 + 12.0 * self.density).round() as usize
    }

    pub fn nucleus_radius(&self) -> f64 {
        1.0 + 2.0 * self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Clean,
    Frozen,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Clean => "clean",
            Domain::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Domain::Clean),
            "frozen" => Ok(Domain::Frozen),
            o => Err(MupadError::Format(format!("unknown domain `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: u64,
    pub factors: SyntheticFactors,
    pub domain: Domain,
    /// `[3, 32, 32]` in `[0, 1]`, with artifacts when frozen.
    pub image: Tensor,
    /// The same patch without frozen-section artifacts.
    pub clean: Tensor,
    /// `[4, 32, 32]`: nucleus mask, nucleus boundary, vertical gradient, sparse dots.
    pub markers: Tensor,
    pub pathway: Vec<f64>,
    pub caption: String,
    /// Per-modality availability (image, text, rna).
    pub available: [bool; 3],
}

/// Fixed `331 x 8` factor-to-pathway loading matrix.
pub fn pathway_matrix() -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(PATHWAY_SEED);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..PATHWAY_COUNT * FACTOR_COUNT).map(|_| n.sample(&mut r)).collect()
}

pub fn pathway_vector<R: Rng + ?Sized>(m: &[f64], f: &SyntheticFactors, rng: &mut R) -> Vec<f64> {
    let x = f.to_array();
    let eta = Normal::new(0.0, PATHWAY_NOISE_STD).expect("positive std");
    (0..PATHWAY_COUNT)
        .map(|i| {
            let row = &m[i * FACTOR_COUNT..(i + 1) * FACTOR_COUNT];
            row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + eta.sample(rng)
        })
        .collect()
}

/// Integer nucleus centres with pairwise distance at least `2r + 2` where possible.
fn place_nuclei<R: Rng + ?Sized>(count: usize, r: f64, rng: &mut R) -> Vec<(i64, i64)> {
    let margin = r.ceil() as i64;
    let hi = IMAGE_SIZE as i64 - 1 - margin;
    let mut min_d = 2.0 * r + 2.0;
    let mut centres: Vec<(i64, i64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centres.len() < count {
        let c = (rng.random_range(margin..=hi), rng.random_range(margin..=hi));
        let ok = centres.iter().all(|&(y, x)| {
            let (dy, dx) = ((y - c.0) as f64, (x - c.1) as f64);
            (dy * dy + dx * dx).sqrt() >= min_d
        });
        if ok {
            centres.push(c);
        }
        attempts += 1;
        if attempts % 2000 == 0 {
            // crowded patch: relax spacing rather than loop forever
            min_d *= 0.9;
        }
    }
    centres
}

fn nucleus_mask(centres: &[(i64, i64)], r: f64) -> Vec<bool> {
    let n = IMAGE_SIZE;
    let mut mask = vec![false; n * n];
    let reach = r.ceil() as i64;
    for &(cy, cx) in centres {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy + dy, cx + dx);
                if (dy * dy + dx * dx) as f64 <= r * r && (0..n as i64).contains(&y) && (0..n as i64).contains(&x) {
                    mask[y as usize * n + x as usize] = true;
                }
            }
        }
    }
    mask
}

fn boundary(mask: &[bool]) -> Vec<bool> {
    let n = IMAGE_SIZE;
    let mut out = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if !mask[y * n + x] {
                continue;
            }
            let outside = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize || !mask[yy as usize * n + xx as usize]
            };
            let (yi, xi) = (y as isize, x as isize);
            out[y * n + x] = outside(yi - 1, xi) || outside(yi + 1, xi) || outside(yi, xi - 1) || outside(yi, xi + 1);
        }
    }
    out
}

/// Renders the clean patch and its marker stack.
pub fn render<R: Rng + ?Sized>(f: &SyntheticFactors, rng: &mut R) -> (Tensor, Tensor) {
    let n = IMAGE_SIZE;
    let plane = n * n;
    let r = f.nucleus_radius();
    let centres = place_nuclei(f.nucleus_count(), r, rng);
    let mask = nucleus_mask(&centres, r);
    let edge = boundary(&mask);

    let [brightness, grain, shade, tilt, speckle] = f.nuisance;
    let bg: Vec<f64> = (0..3).map(|c| PINK[c] + (PURPLE[c] - PINK[c]) * f.hue).collect();
    let grain_d = Normal::new(0.0, 0.02 * grain + 1e-12).expect("positive std");
    let nuc_scale = 1.0 + 0.2 * (shade - 0.5);
    let mut img = vec![0.0; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let ramp = 0.04 * (tilt - 0.5) * (x as f64 / (n - 1) as f64 - 0.5);
            let g = grain_d.sample(rng);
            let dot = if rng.random::<f64>() < 0.01 * speckle { -0.08 } else { 0.0 };
            for c in 0..3 {
                let base = if mask[i] {
                    NUCLEUS_RGB[c] * nuc_scale
                } else {
                    bg[c] + 0.06 * (brightness - 0.5) + ramp + dot
                };
                img[c * plane + i] = (base + g).clamp(0.0, 1.0);
            }
        }
    }

    let dot_rate = 0.02 * (1.0 + f.density);
    let mut markers = vec![0.0; MARKER_CHANNELS * plane];
    for i in 0..plane {
        let y = i / n;
        markers[i] = mask[i] as u8 as f64;
        markers[plane + i] = edge[i] as u8 as f64;
        markers[2 * plane + i] = y as f64 / (n - 1) as f64;
        markers[3 * plane + i] = (rng.random::<f64>() < dot_rate) as u8 as f64;
    }
    (
        Tensor::new(&[3, n, n], img).expect("sized above"),
        Tensor::new(&[MARKER_CHANNELS, n, n], markers).expect("sized above"),
    )
}

/// Frozen-section artifacts: four bright one-pixel vertical streaks and a global brightness shift.
pub fn frozen_artifacts<R: Rng + ?Sized>(clean: &Tensor, rng: &mut R) -> Tensor {
    let n = IMAGE_SIZE;
    let mut out = clean.clone();
    let jitter = rng.random_range(-JITTER..=JITTER);
    let cols: Vec<usize> = (0..STREAKS).map(|_| rng.random_range(0..n)).collect();
    let d = out.data_mut();
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let k = (c * n + y) * n + x;
                let streak = if cols.contains(&x) { STREAK_AMPLITUDE } else { 0.0 };
                d[k] = (d[k] + streak + jitter).clamp(0.0, 1.0);
            }
        }
    }
    out
}

impl SyntheticSample {
    /// Deterministic in `(seed, id)`.
    pub fn generate(seed: u64, id: u64, m: &[f64]) -> Self {
        let mut r = sample_rng(seed, id, 0);
        let factors = SyntheticFactors::random(&mut r);
        let frozen = r.random::<f64>() < FROZEN_RATE;
        let available = [0; 3].map(|_| r.random::<f64>() < AVAILABILITY);
        Self::from_factors(seed, id, factors, frozen, available, m)
    }

    /// Renders a sample with prescribed factors and domain, using the id's random streams.
    pub fn from_factors(
        seed: u64,
        id: u64,
        factors: SyntheticFactors,
        frozen: bool,
        available: [bool; 3],
        m: &[f64],
    ) -> Self {
        let (clean, markers) = render(&factors, &mut sample_rng(seed, id, 1));
        let image = if frozen {
            frozen_artifacts(&clean, &mut sample_rng(seed, id, 2))
        } else {
            clean.clone()
        };
        let pathway = pathway_vector(m, &factors, &mut sample_rng(seed, id, 3));
        SyntheticSample {
            id,
            caption: caption(factors.density, factors.size, factors.hue, frozen),
            factors,
            domain: if frozen { Domain::Frozen } else { Domain::Clean },
            image,
            clean,
            markers,
            pathway,
            available,
        }
    }
}
