//! TPM normalization and pathway-level scores.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MupadError, Result};

pub const PATHWAY_COUNT: usize = 331;
pub const GENE_COUNT: usize = 512;
pub const GENE_SET_SEED: u64 = 331;
const MAX_SET_SIZE: usize = 8;

const SHIPPED: &str = include_str!("../../data/gene_sets.tsv");

/// Counts to transcripts-per-million over the genes not listed in `exclude`.
///
/// The returned vector omits excluded genes and keeps the original order otherwise.
pub fn rna_preprocess(counts: &[f64], lengths: &[f64], exclude: &[usize]) -> Result<Vec<f64>> {
    if counts.len() != lengths.len() {
        return Err(MupadError::Invalid(format!(
            "{} counts but {} gene lengths",
            counts.len(),
            lengths.len()
        )));
    }
    if counts.iter().any(|&c| !(c >= 0.0)) || lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(MupadError::Invalid(
            "counts must be nonnegative and lengths positive".into(),
        ));
    }
    let rates: Vec<f64> = (0..counts.len())
        .filter(|i| !exclude.contains(i))
        .map(|i| counts[i] / lengths[i])
        .collect();
    let total: f64 = rates.iter().sum();
    if total <= 0.0 {
        return Err(MupadError::Invalid("all-zero counts".into()));
    }
    Ok(rates.iter().map(|r| r / total * 1e6).collect())
}

/// Named gene sets indexing into the gene panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSetTable {
    pub sets: Vec<(String, Vec<usize>)>,
}

impl GeneSetTable {
    /// Seeded random table: `count` sets of 1..=8 distinct genes drawn from `genes`.
    pub fn generate(seed: u64, count: usize, genes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets = (0..count)
            .map(|k| {
                let size = rng.random_range(1..=MAX_SET_SIZE.min(genes));
                let mut members = rand::seq::index::sample(&mut rng, genes, size).into_vec();
                members.sort_unstable();
                (format!("PATHWAY_{k:03}"), members)
            })
            .collect();
        GeneSetTable { sets }
    }

    /// The table shipped with the crate.
    pub fn standard() -> Self {
        Self::parse(SHIPPED).expect("shipped gene-set table is well formed")
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Largest gene index referenced plus one.
    pub fn gene_span(&self) -> usize {
        self.sets
            .iter()
            .flat_map(|(_, m)| m.iter())
            .max()
            .map_or(0, |&m| m + 1)
    }

    /// One set per line: `name<TAB>i,j,k`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, members) in &self.sets {
            let ids: Vec<String> = members.iter().map(usize::to_string).collect();
            writeln!(out, "{name}\t{}", ids.join(",")).expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sets = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| MupadError::Format(format!("gene sets line {}: {m}", ln + 1));
            let (name, ids) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let members = ids
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("bad gene index")))
                .collect::<Result<Vec<_>>>()?;
            if members.is_empty() {
                return Err(bad("empty set"));
            }
            sets.push((name.to_string(), members));
        }
        Ok(GeneSetTable { sets })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MupadError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| MupadError::io(path, e))
    }
}

/// Per-set mean of `log1p(tpm)` z-scored across genes. Zero variance gives all-zero scores.
pub fn pathway_scores(tpm: &[f64], table: &GeneSetTable) -> Result<Vec<f64>> {
    if table.gene_span() > tpm.len() {
        return Err(MupadError::Invalid(format!(
            "gene sets reference gene {} but the profile has {} genes",
            table.gene_span() - 1,
            tpm.len()
        )));
    }
    let logs: Vec<f64> = tpm.iter().map(|&x| x.ln_1p()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let z: Vec<f64> = if sd > 1e-12 {
        logs.iter().map(|l| (l - mean) / sd).collect()
    } else {
        vec![0.0; logs.len()]
    };
    table
        .sets
        .iter()
        .map(|(name, members)| {
            if members.is_empty() {
                return Err(MupadError::Invalid(format!("gene set {name} is empty")));
            }
            Ok(members.iter().map(|&g| z[g]).sum::<f64>() / members.len() as f64)
        })
        .collect()
}
