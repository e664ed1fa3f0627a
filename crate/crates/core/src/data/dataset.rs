//! Datasets on disk: one tensor file per sample plus a tab-separated manifest.
//!
//! ```text
//! # mupad-dataset v1 seed=<seed> n=<n>
//! id  file  domain  factors  caption  available  sha256
//! ```
//!
//! `factors` is eight comma-separated values, `available` three `0/1` flags
//! (image, text, rna) and `sha256` the digest of the sample file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::synth::{pathway_matrix, Domain, SyntheticFactors, SyntheticSample, FACTOR_COUNT};
use crate::error::{MupadError, Result};
use crate::io::binary::{decode_tensors, encode_tensors, read_file, write_file};

pub const MANIFEST: &str = "manifest.tsv";
const HEADER: &str = "id\tfile\tdomain\tfactors\tcaption\tavailable\tsha256";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub domain: Domain,
    pub factors: SyntheticFactors,
    pub caption: String,
    pub available: [bool; 3],
    pub sha256: String,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let f: Vec<String> = self.factors.to_array().iter().map(|x| x.to_string()).collect();
        let a: String = self.available.iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.file,
            self.domain.as_str(),
            f.join(","),
            self.caption,
            a,
            self.sha256
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| MupadError::Format(format!("manifest {what}: `{line}`"));
        if cols.len() != 7 {
            return Err(bad("column count"));
        }
        let vals: Vec<f64> = cols[3]
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("factors"))?;
        let arr: [f64; FACTOR_COUNT] = vals.try_into().map_err(|_| bad("factor count"))?;
        let flags: Vec<bool> = cols[5].chars().map(|c| c == '1').collect();
        Ok(ManifestEntry {
            id: cols[0].parse().map_err(|_| bad("id"))?,
            file: cols[1].to_string(),
            domain: Domain::parse(cols[2])?,
            factors: SyntheticFactors::from_array(arr),
            caption: cols[4].to_string(),
            available: flags.try_into().map_err(|_| bad("availability"))?,
            sha256: cols[6].to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn sample_file(id: u64) -> String {
    format!("samples/{id:06}.mtns")
}

fn encode_sample(s: &SyntheticSample) -> Vec<u8> {
    let pathway = mupad_tensor::Tensor::new(&[s.pathway.len()], s.pathway.clone()).expect("vector");
    encode_tensors(&[
        ("image", &s.image),
        ("clean", &s.clean),
        ("markers", &s.markers),
        ("pathway", &pathway),
    ])
}

/// Writes `n` samples and the manifest; the directory is a pure function of `(n, seed)`.
pub fn gen_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Dataset> {
    if n == 0 {
        return Err(MupadError::Invalid("dataset needs at least one sample".into()));
    }
    let m = pathway_matrix();
    let mut entries = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let s = SyntheticSample::generate(seed, id, &m);
        let bytes = encode_sample(&s);
        let file = sample_file(id);
        write_file(&out_dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            id,
            file,
            domain: s.domain,
            factors: s.factors,
            caption: s.caption,
            available: s.available,
            sha256: sha256_hex(&bytes),
        });
    }
    let mut text = format!("# mupad-dataset v1 seed={seed} n={n}\n{HEADER}\n");
    for e in &entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    write_file(&out_dir.join(MANIFEST), text.as_bytes())?;
    Ok(Dataset {
        dir: out_dir.to_path_buf(),
        seed,
        entries,
    })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = String::from_utf8(read_file(&path)?)
            .map_err(|_| MupadError::Format(format!("{}: not utf-8", path.display())))?;
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        let seed = head
            .split_whitespace()
            .find_map(|w| w.strip_prefix("seed="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MupadError::Format(format!("{}: missing header", path.display())))?;
        if lines.next() != Some(HEADER) {
            return Err(MupadError::Format(format!("{}: missing column header", path.display())));
        }
        let entries = lines.filter(|l| !l.is_empty()).map(ManifestEntry::parse).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            seed,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads one sample, checking its digest.
    pub fn load(&self, index: usize) -> Result<SyntheticSample> {
        let e = &self.entries[index];
        let bytes = read_file(&self.dir.join(&e.file))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(MupadError::Corrupt(format!("{}: digest mismatch", e.file)));
        }
        let mut named = decode_tensors(&bytes)?.into_iter();
        let mut next = |want: &str| match named.next() {
            Some((n, t)) if n == want => Ok(t),
            _ => Err(MupadError::Corrupt(format!("{}: expected tensor `{want}`", e.file))),
        };
        let (image, clean, markers, pathway) = (next("image")?, next("clean")?, next("markers")?, next("pathway")?);
        Ok(SyntheticSample {
            id: e.id,
            factors: e.factors,
            domain: e.domain,
            image,
            clean,
            markers,
            pathway: pathway.into_data(),
            caption: e.caption.clone(),
            available: e.available,
        })
    }

    pub fn load_all(&self) -> Result<Vec<SyntheticSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
