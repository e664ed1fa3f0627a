//! Evaluation metrics.

pub mod correlation;
pub mod distribution;
pub mod gaussian;
pub mod plot;
pub mod resample;

pub use correlation::{cosine_similarity_mean, patch_pcc, pearson, slide_means, slide_pcc, PatchPcc};
pub use distribution::{auc, wasserstein1};
pub use gaussian::{fid, frechet_distance, kid, GaussianStats};
pub use plot::line_plot;
pub use resample::{
    bootstrap, paired_permutation_test, percentile, permutation_test, MetricReport,
    DEFAULT_BOOTSTRAP,
};
