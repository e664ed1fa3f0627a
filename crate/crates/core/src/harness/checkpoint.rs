//! Training checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MUPD1"
//! config     u32 length + TOML text
//! step       u64
//! counters   u32 count + u64 * count   (optimizer step counters)
//! tensors    named-tensor section (see `io::binary`)
//! ```
//!
//! Tensor names are prefixed by role: `model/`, `align/`, `ema/`, `adam.model.m/`,
//! `adam.model.v/`, `adam.align.m/`, `adam.align.v/`.

use std::path::Path;

use mupad_tensor::Tensor;

use super::config::RunConfig;
use crate::error::{MupadError, Result};
use crate::io::binary::{read_file, write_file, Decoder, Encoder};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MUPD1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub counters: Vec<u64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(CHECKPOINT_MAGIC);
        e.str(&self.config.to_toml());
        e.u64(self.step);
        e.u32(self.counters.len() as u32);
        for &c in &self.counters {
            e.u64(c);
        }
        e.tensors(self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        e.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        d.expect_magic(CHECKPOINT_MAGIC)?;
        let config = RunConfig::from_toml(&d.str()?)
            .map_err(|e| MupadError::Corrupt(format!("embedded config: {e}")))?;
        let step = d.u64()?;
        let n = d.u32()? as usize;
        if n > 16 {
            return Err(MupadError::Corrupt(format!("{n} optimizer counters")));
        }
        let counters = (0..n).map(|_| d.u64()).collect::<Result<_>>()?;
        let tensors = d.tensors()?;
        d.finish()?;
        Ok(Checkpoint {
            config,
            step,
            counters,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    /// Tensors under `prefix/`, in file order, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}
