//! Named-tensor containers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      5 bytes
//! count      u32
//! entry*     name_len u32, name utf-8, rank u32, dims u64 * rank, data f64 * numel
//! ```

use std::io::{Read, Write};
use std::path::Path;

use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

pub const TENSOR_MAGIC: &[u8; 5] = b"MTNS1";

const MAX_RANK: usize = 8;

/// Appends little-endian primitives to a byte buffer.
#[derive(Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn tensors<'a>(&mut self, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
        self.u32(items.len() as u32);
        for (n, t) in items {
            self.tensor(n, t);
        }
    }
}

/// Reads primitives back; every short read is a [`MupadError::Corrupt`].
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(MupadError::Corrupt(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(MupadError::Corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MupadError::Corrupt("name is not utf-8".into()))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > MAX_RANK {
            return Err(MupadError::Corrupt(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| MupadError::Corrupt(format!("{name}: shape {shape:?} exceeds file")))?;
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }

    pub fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(MupadError::Corrupt(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn encode_tensors(items: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(TENSOR_MAGIC);
    e.tensors(items.iter().copied());
    e.buf
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut d = Decoder::new(bytes);
    d.expect_magic(TENSOR_MAGIC)?;
    let out = d.tensors()?;
    d.finish()?;
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| MupadError::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| MupadError::io(path, e))?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| MupadError::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| MupadError::io(path, e))?;
    f.write_all(bytes).map_err(|e| MupadError::io(path, e))
}

pub fn save_tensors(path: &Path, items: &[(&str, &Tensor)]) -> Result<()> {
    write_file(path, &encode_tensors(items))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&read_file(path)?)
}
