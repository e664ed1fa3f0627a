//! Applications built on a trained denoiser: sampling, domain translation with attention
//! injection, virtual staining and embedding translation.

use mupad_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{decode_image, encode_image, group_count, ungroup_channels, TextVocab};
use crate::error::{MupadError, Result};
use crate::flow::{
    ddim_invert, guided_velocity, sample, time_grid, GuidanceSchedule, SamplerConfig,
    VelocityModel,
};
use crate::model::{ConditionBatch, ConditionSet, Denoiser, ForwardOptions};
use crate::objectives::EmbeddingFlowNet;

/// Samples per solver batch in [`generate`].
pub const SAMPLE_BATCH: usize = 32;

/// Euler steps used by [`embed_translate`].
pub const EMBED_STEPS: usize = 50;

/// Initial noise for sample `index`; independent of how samples are batched.
pub fn initial_noise(shape: &[usize], seed: u64, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// One latent per condition set, decoded to images in [0, 1].
pub fn generate(
    model: &Denoiser,
    sets: &[ConditionSet],
    sampler: &SamplerConfig,
    guidance: &GuidanceSchedule,
) -> Result<Vec<Tensor>> {
    let shape = model.config.latent_shape;
    let mut images = Vec::with_capacity(sets.len());
    for (chunk_idx, chunk) in sets.chunks(SAMPLE_BATCH).enumerate() {
        let start = (chunk_idx * SAMPLE_BATCH) as u64;
        let noise: Vec<Tensor> = (0..chunk.len() as u64)
            .map(|i| initial_noise(&shape, sampler.seed, start + i))
            .collect();
        let z = Tensor::stack(&noise)?;
        let cond = ConditionBatch::from_sets(chunk)?;
        let cfg = SamplerConfig {
            seed: sampler.seed ^ (chunk_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*sampler
        };
        let z0 = sample(model, &z, &cond, &cfg, guidance)?;
        for i in 0..chunk.len() {
            images.push(decode_image(&z0.index_first(i))?);
        }
    }
    Ok(images)
}

#[derive(Clone, Debug)]
pub struct TranslationRequest {
    /// `[3, H, W]` in [0, 1].
    pub source: Tensor,
    pub source_prompt: String,
    pub target_prompt: String,
    pub steps: usize,
    /// Layers whose self-attention is taken from the source reconstruction pass.
    pub inject_layers: Vec<usize>,
    pub guidance: GuidanceSchedule,
    /// Optional semantic CLS condition shared by both prompts.
    pub z_cls: Option<Vec<f64>>,
}

impl TranslationRequest {
    /// Upper half of the layers, `depth/2 .. depth`.
    pub fn default_layers(depth: usize) -> Vec<usize> {
        (depth / 2..depth).collect()
    }

    pub fn new(source: Tensor, source_prompt: &str, target_prompt: &str, steps: usize, depth: usize) -> Self {
        TranslationRequest {
            source,
            source_prompt: source_prompt.to_string(),
            target_prompt: target_prompt.to_string(),
            steps,
            inject_layers: Self::default_layers(depth),
            guidance: GuidanceSchedule::constant(1.0),
            z_cls: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Translation {
    /// Target-prompt output.
    pub image: Tensor,
    /// Source-prompt reconstruction computed alongside.
    pub reconstruction: Tensor,
    /// Latent after inversion.
    pub z_t: Tensor,
}

fn prompt_condition(vocab: &TextVocab, prompt: &str, z_cls: &Option<Vec<f64>>) -> Result<ConditionSet> {
    let ids = vocab.tokenize(prompt);
    if ids.is_empty() {
        return Err(MupadError::Invalid(format!("prompt `{prompt}` has no tokens")));
    }
    let mut c = ConditionSet::empty().with_text(ids);
    if let Some(z) = z_cls {
        c = c.with_z_cls(z.clone());
    }
    Ok(c)
}

fn check_finite(z: Tensor, step: usize) -> Result<Tensor> {
    if z.all_finite() {
        Ok(z)
    } else {
        Err(MupadError::Diverged { step })
    }
}

/// Inverts the source under its prompt, then runs a source reconstruction and the target
/// pass in lock-step, feeding the reconstruction's self-attention maps into the target pass
/// at `inject_layers`.
pub fn translate(model: &Denoiser, vocab: &TextVocab, req: &TranslationRequest) -> Result<Translation> {
    let depth = model.config.depth;
    if let Some(&l) = req.inject_layers.iter().find(|&&l| l >= depth) {
        return Err(MupadError::Invalid(format!("inject layer {l} >= depth {depth}")));
    }
    if req.steps == 0 {
        return Err(MupadError::Invalid("translation needs at least one step".into()));
    }
    let src = ConditionBatch::from_sets(&[prompt_condition(vocab, &req.source_prompt, &req.z_cls)?])?;
    let tgt = ConditionBatch::from_sets(&[prompt_condition(vocab, &req.target_prompt, &req.z_cls)?])?;
    let z0 = Tensor::stack(&[encode_image(&req.source)?])?;
    let z_t = ddim_invert(model, &z0, &src, req.steps)?;

    let capture = ForwardOptions {
        capture_attention: true,
        ..ForwardOptions::default()
    };
    let grid = time_grid(req.steps);
    let (mut rec, mut out) = (z_t.clone(), z_t.clone());
    for i in 0..req.steps {
        let (t, dt) = (grid[i], grid[i] - grid[i + 1]);
        let (v_rec, maps) = model.predict(&rec, t, &src, &capture)?;
        let recorded: Vec<Option<Tensor>> = maps
            .into_iter()
            .enumerate()
            .map(|(l, m)| req.inject_layers.contains(&l).then_some(m))
            .collect();
        let w = req.guidance.at_step(i, req.steps);
        let v_c = model.inject_attention(&out, t, &tgt, &recorded)?;
        let v_out = if w == 1.0 {
            v_c
        } else {
            let v_u = model.inject_attention(&out, t, &model.null_condition(&tgt), &recorded)?;
            guided_velocity(&v_c, &v_u, w)?
        };
        rec = check_finite(rec.axpy(-dt, &v_rec)?, i)?;
        out = check_finite(out.axpy(-dt, &v_out)?, i)?;
    }
    Ok(Translation {
        image: decode_image(&out.index_first(0))?,
        reconstruction: decode_image(&rec.index_first(0))?,
        z_t,
    })
}

#[derive(Clone, Debug)]
pub struct StainRequest {
    /// Source-stain image `[3, H, W]` in [0, 1].
    pub structure: Tensor,
    pub group: usize,
    /// Semantic image tokens `[n, d]` of the source.
    pub semantic: Tensor,
}

fn stain_condition(model: &Denoiser, req: &StainRequest) -> Result<ConditionSet> {
    let groups = model.config.num_groups;
    if groups == 0 || model.config.struct_channels == 0 {
        return Err(MupadError::Invalid("model has no structural conditioning path".into()));
    }
    if req.group >= groups {
        return Err(MupadError::Invalid(format!("group {} >= group count {groups}", req.group)));
    }
    let z = encode_image(&req.structure)?;
    if z.shape()[0] != model.config.struct_channels {
        return Err(MupadError::Invalid(format!(
            "structural latent has {} channels, model expects {}",
            z.shape()[0],
            model.config.struct_channels
        )));
    }
    Ok(ConditionSet::empty()
        .with_image(req.semantic.clone())
        .with_structure(z)
        .with_group(req.group))
}

/// Generates the `[3, H, W]` marker group for each request.
pub fn stain(
    model: &Denoiser,
    reqs: &[StainRequest],
    sampler: &SamplerConfig,
    guidance: &GuidanceSchedule,
) -> Result<Vec<Tensor>> {
    let sets = reqs
        .iter()
        .map(|r| stain_condition(model, r))
        .collect::<Result<Vec<_>>>()?;
    generate(model, &sets, sampler, guidance)
}

/// All `channels` marker channels `[K, H, W]` for one source image, one group at a time.
pub fn stain_all(
    model: &Denoiser,
    structure: &Tensor,
    semantic: &Tensor,
    channels: usize,
    sampler: &SamplerConfig,
    guidance: &GuidanceSchedule,
) -> Result<Tensor> {
    let reqs: Vec<StainRequest> = (0..group_count(channels))
        .map(|group| StainRequest {
            structure: structure.clone(),
            group,
            semantic: semantic.clone(),
        })
        .collect();
    let groups = stain(model, &reqs, sampler, guidance)?;
    ungroup_channels(&groups, channels)
}

/// Transports source embeddings `[B, dim]` along the learned field in [`EMBED_STEPS`] steps.
pub fn embed_translate(net: &EmbeddingFlowNet, z_source: &Tensor) -> Result<Tensor> {
    let z = net.transport(z_source, EMBED_STEPS)?;
    if !z.all_finite() {
        return Err(MupadError::Diverged { step: EMBED_STEPS });
    }
    Ok(z)
}
