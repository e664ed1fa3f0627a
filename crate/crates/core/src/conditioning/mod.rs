pub mod encoder;
pub mod latent;
pub mod multiplex;
pub mod rna;
pub mod stain;
pub mod text;

pub use encoder::{
    mean_token, teacher_features, ImageEmbedding, StubEncoder, ENCODER_WIDTH, TEACHER_WIDTH,
};
pub use latent::{decode_image, encode_image, latent_decode, latent_encode, LATENT_FACTOR};
pub use multiplex::{group_channels, group_count, ungroup_channels};
pub use rna::{pathway_scores, rna_preprocess, GeneSetTable, GENE_COUNT, PATHWAY_COUNT};
pub use stain::{hed_augment, StainMatrix, StainPerturbation};
pub use text::{caption, TextVocab, UNK_ID};
