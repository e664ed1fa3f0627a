//! Binary PPM (P6) images.
//!
//! Files are written as `P6\n<width> <height>\n255\n` followed by `width * height` RGB byte
//! triples in row-major order. Values in `[0, 1]` map to `round(255 x)` after clamping; reads
//! return `byte / 255`. Readers accept any whitespace and `#` comments in the header and a
//! maximum value up to 255.

use std::path::Path;

use mupad_tensor::Tensor;

use super::binary::{read_file, write_file};
use crate::error::{MupadError, Result};

pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in `[0, 1]` to P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(MupadError::Invalid(format!("ppm expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(MupadError::Format("truncated ppm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(MupadError::Format(format!("not a P6 file (magic {})", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| MupadError::Format(format!("bad ppm header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(MupadError::Format(format!("unsupported maxval {maxval}")));
    }
    let n = w * h;
    if bytes.len() < pos + 3 * n {
        return Err(MupadError::Format(format!("ppm raster needs {} bytes", 3 * n)));
    }
    let raster = &bytes[pos..pos + 3 * n];
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f64 / maxval as f64;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_raster_layout() {
        let img = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 0.5, 0.0, 0.0, 2.0]).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert_eq!(&b[..11], b"P6\n2 1\n255\n");
        assert_eq!(&b[11..], &[255, 128, 0, 0, 0, 255]);
    }

    #[test]
    fn quantized_round_trip_is_exact() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn comments_and_errors() {
        let b = b"P6 # note\n1 1\n# more\n255\n\x01\x02\x03";
        let t = decode_ppm(b).unwrap();
        assert_eq!(t.data(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
