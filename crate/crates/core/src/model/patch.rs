//! Patch tokenization of `[C, H, W]` latents.
//!
//! Token `(i, j)` (row-major over the patch grid) holds the pixels of patch
//! `(i, j)` ordered channel-major, then row, then column within the patch.

use mupad_tensor::{Tape, Tensor, Var};

use crate::error::{MupadError, Result};

fn check(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(MupadError::Invalid(format!(
            "spatial extent {h}x{w} not divisible by patch {patch}"
        )));
    }
    Ok(())
}

/// `[C, H, W] -> [N, C*p*p]`.
pub fn patchify(z: &Tensor, patch: usize) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(MupadError::Invalid(format!("patchify expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    check(h, w, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let width = c * patch * patch;
    let mut out = vec![0.0; gh * gw * width];
    let d = z.data();
    for gi in 0..gh {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for ch in 0..c {
                for pi in 0..patch {
                    for pj in 0..patch {
                        let src = (ch * h + gi * patch + pi) * w + gj * patch + pj;
                        let dst = tok * width + (ch * patch + pi) * patch + pj;
                        out[dst] = d[src];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, width], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = shape;
    check(h, w, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let width = c * patch * patch;
    if tokens.shape() != [gh * gw, width] {
        return Err(MupadError::Invalid(format!(
            "unpatchify expects [{}, {width}], got {:?}",
            gh * gw,
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; c * h * w];
    let d = tokens.data();
    for gi in 0..gh {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for ch in 0..c {
                for pi in 0..patch {
                    for pj in 0..patch {
                        let dst = (ch * h + gi * patch + pi) * w + gj * patch + pj;
                        let src = tok * width + (ch * patch + pi) * patch + pj;
                        out[dst] = d[src];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Batched tape version: `[B, C, H, W] -> [B, N, C*p*p]`.
pub fn patchify_var(tape: &mut Tape, x: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    check(h, w, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let y = tape.reshape(x, &[b, c, gh, patch, gw, patch])?;
    let y = tape.permute(y, &[0, 2, 4, 1, 3, 5])?;
    Ok(tape.reshape(y, &[b, gh * gw, c * patch * patch])?)
}

/// Batched tape version: `[B, N, C*p*p] -> [B, C, H, W]`.
pub fn unpatchify_var(tape: &mut Tape, x: Var, patch: usize, shape: [usize; 3]) -> Result<Var> {
    let [c, h, w] = shape;
    check(h, w, patch)?;
    let b = tape.shape(x)[0];
    let (gh, gw) = (h / patch, w / patch);
    let y = tape.reshape(x, &[b, gh, gw, c, patch, patch])?;
    let y = tape.permute(y, &[0, 3, 1, 4, 2, 5])?;
    Ok(tape.reshape(y, &[b, c, h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_tokens_of_length_four() {
        let z = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let t = patchify(&z, 2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn token_holds_exactly_its_patch() {
        let (c, h, w, p) = (3, 6, 4, 2);
        // encode (ch, row, col) in the value so positions can be read back
        let data: Vec<f64> = (0..c * h * w)
            .map(|i| {
                let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
                (ch * 10000 + r * 100 + col) as f64
            })
            .collect();
        let z = Tensor::new(&[c, h, w], data).unwrap();
        let t = patchify(&z, p).unwrap();
        let gw = w / p;
        for tok in 0..t.shape()[0] {
            let (gi, gj) = (tok / gw, tok % gw);
            let mut seen: Vec<(usize, usize, usize)> = t.data()[tok * 12..(tok + 1) * 12]
                .iter()
                .map(|&v| {
                    let v = v as usize;
                    (v / 10000, (v / 100) % 100, v % 100)
                })
                .collect();
            seen.sort();
            let mut want = Vec::new();
            for ch in 0..c {
                for r in gi * p..(gi + 1) * p {
                    for col in gj * p..(gj + 1) * p {
                        want.push((ch, r, col));
                    }
                }
            }
            assert_eq!(seen, want);
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[5, 8, 6], 1.0, &mut rng);
        let back = unpatchify(&patchify(&z, 2).unwrap(), 2, [5, 8, 6]).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn tape_version_matches_pure_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let toks = patchify_var(&mut tape, v, 2).unwrap();
        for b in 0..2 {
            let want = patchify(&z.index_first(b), 2).unwrap();
            assert_eq!(tape.value(toks).index_first(b), want);
        }
        let back = unpatchify_var(&mut tape, toks, 2, [3, 4, 4]).unwrap();
        assert_eq!(tape.value(back), &z);
    }

    #[test]
    fn indivisible_extent_is_an_error() {
        assert!(patchify(&Tensor::zeros(&[1, 5, 4]), 2).is_err());
    }
}
