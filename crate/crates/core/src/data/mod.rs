//! Synthetic corpus with ground-truth factors.

pub mod dataset;
pub mod oracle;
pub mod synth;

pub use dataset::{gen_dataset, sha256_hex, Dataset, ManifestEntry, MANIFEST};
pub use oracle::{count_components, luminance, oracle_density, LUMINANCE_THRESHOLD};
pub use synth::{
    frozen_artifacts, pathway_matrix, pathway_vector, render, Domain, SyntheticFactors, SyntheticSample,
    FACTOR_COUNT, IMAGE_SIZE, MARKER_CHANNELS,
};
