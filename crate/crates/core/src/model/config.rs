use serde::{Deserialize, Serialize};

use crate::error::{MupadError, Result};

/// How condition tokens are attended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossAttnVariant {
    /// One attention stream per modality with its own key/value projections; outputs summed.
    Dca,
    /// Ablation: a single attention over the concatenation of all condition tokens,
    /// each offset by a learned modality-type embedding.
    Shared,
}

impl CrossAttnVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CrossAttnVariant::Dca => "dca",
            CrossAttnVariant::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dca" => Ok(CrossAttnVariant::Dca),
            "shared" => Ok(CrossAttnVariant::Shared),
            other => Err(MupadError::Config(format!("unknown attention variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// `(C, H, W)` of the latent being denoised.
    pub latent_shape: [usize; 3],
    /// Channels of a clean structural latent concatenated to the input (0 disables).
    pub struct_channels: usize,
    pub image_cond_dim: usize,
    pub text_vocab: usize,
    pub text_max_len: usize,
    pub rna_dim: usize,
    pub rna_tokens: usize,
    /// Width of the CLS read-out and of the injected semantic token.
    pub cls_dim: usize,
    pub mlp_ratio: usize,
    pub variant: CrossAttnVariant,
    /// Number of output channel groups the model can be asked for (0 disables).
    pub num_groups: usize,
    /// Add a projection of `z_cls` to the CLS token at the input.
    pub use_z_cls: bool,
    /// Time-gated linear path from each input token straight to its output velocity. Lets a
    /// model narrower than the patch width reach every latent direction.
    pub token_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            patch: 2,
            latent_shape: [48, 8, 8],
            struct_channels: 0,
            image_cond_dim: crate::conditioning::ENCODER_WIDTH,
            text_vocab: crate::conditioning::TextVocab::standard().len(),
            text_max_len: 16,
            rna_dim: crate::conditioning::PATHWAY_COUNT,
            rna_tokens: 4,
            cls_dim: crate::conditioning::ENCODER_WIDTH,
            mlp_ratio: 4,
            variant: CrossAttnVariant::Dca,
            num_groups: 0,
            use_z_cls: true,
            token_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.latent_shape;
        let fail = |m: String| Err(MupadError::Config(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            return fail("depth, dim, heads and patch must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if c == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return fail(format!(
                "latent {:?} not divisible by patch {}",
                self.latent_shape, self.patch
            ));
        }
        if self.rna_tokens == 0 || self.text_max_len == 0 || self.mlp_ratio == 0 {
            return fail("rna_tokens, text_max_len and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.latent_shape[1] / self.patch,
            self.latent_shape[2] / self.patch,
        )
    }

    /// Number of patch tokens (excluding CLS).
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Flattened patch width fed to the patch embedding.
    pub fn patch_in(&self) -> usize {
        (self.latent_shape[0] + self.struct_channels) * self.patch * self.patch
    }

    pub fn patch_out(&self) -> usize {
        self.latent_shape[0] * self.patch * self.patch
    }
}
