//! The denoising transformer.
//!
//! Token pipeline per forward pass:
//! patch-embed -> [self-attention -> cross-modal attention -> feed-forward] x depth -> head.
//! Every residual branch is scaled by an adaLN gate driven by the timestep
//! embedding; gates start at zero so an untrained block is the identity. A learned
//! CLS token is prepended to the patch tokens and read out as `v_cls`. With `token_skip`, the
//! head adds a time-gated linear map of each input token; its gate also starts at zero.

use mupad_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{
    dca_forward, multi_head_attention, shared_attention_forward, CondStream, DcaWeights,
    EmbeddedConditions, SharedWeights, MASKED,
};
use super::condition::{ConditionBatch, Modality};
use super::config::{CrossAttnVariant, ModelConfig};
use super::patch::{patchify_var, unpatchify_var};
use crate::error::{MupadError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const TIME_FREQ_DIM: usize = 64;
/// Timesteps in [0, 1] are stretched by this factor before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
enum CrossIds {
    Dca {
        wq: ParamId,
        wk: [ParamId; 3],
        wv: [ParamId; 3],
        wo: ParamId,
    },
    Shared {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        type_emb: ParamId,
    },
}

#[derive(Clone, Debug)]
struct BlockIds {
    ada_w: ParamId,
    ada_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    sa_o_w: ParamId,
    sa_o_b: ParamId,
    cross: CrossIds,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    patch_w: ParamId,
    patch_b: ParamId,
    cls_token: ParamId,
    z_cls_w: Option<ParamId>,
    t_w1: ParamId,
    t_b1: ParamId,
    t_w2: ParamId,
    t_b2: ParamId,
    group_emb: Option<ParamId>,
    img_w: ParamId,
    img_b: ParamId,
    text_table: ParamId,
    text_pos: ParamId,
    rna_w: ParamId,
    rna_b: ParamId,
    blocks: Vec<BlockIds>,
    final_ada_w: ParamId,
    final_ada_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    skip: Option<SkipIds>,
}

#[derive(Clone, Debug)]
struct SkipIds {
    w_in: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    w_out: ParamId,
}

/// Per-layer self-attention maps recorded at each solver step.
///
/// `steps[s][l]` is the `[B*heads, N+1, N+1]` probability map of layer `l` at step `s`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockActivations {
    pub steps: Vec<Vec<Tensor>>,
}

impl BlockActivations {
    /// Every map row must be a probability distribution.
    pub fn validate(&self) -> Result<()> {
        for (s, layers) in self.steps.iter().enumerate() {
            for (l, map) in layers.iter().enumerate() {
                let n = *map.shape().last().unwrap_or(&0);
                if n == 0 {
                    return Err(MupadError::Invalid(format!("empty map at step {s} layer {l}")));
                }
                for row in map.data().chunks(n) {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                        return Err(MupadError::Invalid(format!(
                            "attention row at step {s} layer {l} is not a distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Recorded maps to substitute for self-attention, per layer (`None` keeps the
/// layer's own attention).
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub maps: &'a [Option<Tensor>],
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub keep_features: bool,
    pub capture_attention: bool,
    pub inject: Option<Injection<'a>>,
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// Velocity prediction shaped like the input latent.
    pub v_patch: Var,
    /// CLS read-out `[B, cls_dim]`.
    pub v_cls: Var,
    /// Patch-token features after each block, `[B, N, dim]` (when requested).
    pub features: Vec<Var>,
    /// Self-attention maps per layer (when requested).
    pub attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub params: ParamStore,
    pos: Tensor,
    ids: Ids,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(&[fan_in, fan_out], -a, a, rng)
}

/// Fixed 2-D sine-cosine position table `[gh*gw, dim]`.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = vec![0.0; gh * gw * dim];
    for i in 0..gh {
        for j in 0..gw {
            let row = &mut out[(i * gw + j) * dim..(i * gw + j + 1) * dim];
            for (axis, pos) in [(0, i as f64), (1, j as f64)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    row[axis * half + k] = (pos * omega).sin();
                    row[axis * half + quarter + k] = (pos * omega).cos();
                }
            }
        }
    }
    Tensor::new(&[gh * gw, dim], out).expect("sized above")
}

/// Sinusoidal timestep features `[len(t), TIME_FREQ_DIM]`.
pub fn timestep_features(t: &[f64]) -> Tensor {
    let half = TIME_FREQ_DIM / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FREQ_DIM);
    for &ti in t {
        let x = ti * TIME_SCALE;
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push((x * f).cos());
        }
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push((x * f).sin());
        }
    }
    Tensor::new(&[t.len(), TIME_FREQ_DIM], out).expect("sized above")
}

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = tape.add_scalar(scale, 1.0)?;
    let y = tape.mul(x, s1)?;
    Ok(tape.add(y, shift)?)
}

impl Denoiser {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let cd = d;
        let zeros = |shape: &[usize]| Tensor::zeros(shape);

        let patch_w = p.add("patch.w", xavier(&mut rng, config.patch_in(), d));
        let patch_b = p.add("patch.b", zeros(&[d]));
        let cls_token = p.add("cls.token", Tensor::randn(&[1, 1, d], 0.02, &mut rng));
        let z_cls_w = config
            .use_z_cls
            .then(|| p.add("cls.z.w", xavier(&mut rng, config.cls_dim, d)));
        let t_w1 = p.add("t.w1", xavier(&mut rng, TIME_FREQ_DIM, d));
        let t_b1 = p.add("t.b1", zeros(&[d]));
        let t_w2 = p.add("t.w2", xavier(&mut rng, d, d));
        let t_b2 = p.add("t.b2", zeros(&[d]));
        let group_emb = (config.num_groups > 0)
            .then(|| p.add("group.emb", Tensor::randn(&[config.num_groups, d], 0.02, &mut rng)));
        let img_w = p.add("cond.image.w", xavier(&mut rng, config.image_cond_dim, cd));
        let img_b = p.add("cond.image.b", zeros(&[cd]));
        let text_table = p.add(
            "cond.text.table",
            Tensor::randn(&[config.text_vocab, cd], 0.1, &mut rng),
        );
        let text_pos = p.add(
            "cond.text.pos",
            Tensor::randn(&[config.text_max_len, cd], 0.02, &mut rng),
        );
        let rna_w = p.add(
            "cond.rna.w",
            xavier(&mut rng, config.rna_dim, config.rna_tokens * cd),
        );
        let rna_b = p.add("cond.rna.b", zeros(&[config.rna_tokens * cd]));

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = |s: &str| format!("blocks.{i}.{s}");
            let ada_w = p.add(name("ada.w"), zeros(&[d, 9 * d]));
            let ada_b = p.add(name("ada.b"), zeros(&[9 * d]));
            let qkv_w = p.add(name("sa.qkv.w"), xavier(&mut rng, d, 3 * d));
            let qkv_b = p.add(name("sa.qkv.b"), zeros(&[3 * d]));
            let sa_o_w = p.add(name("sa.o.w"), xavier(&mut rng, d, d));
            let sa_o_b = p.add(name("sa.o.b"), zeros(&[d]));
            let cross = match config.variant {
                CrossAttnVariant::Dca => {
                    let wq = p.add(name("ca.q"), xavier(&mut rng, d, d));
                    let mut wk = Vec::new();
                    let mut wv = Vec::new();
                    for m in Modality::ALL {
                        wk.push(p.add(name(&format!("ca.k.{}", m.as_str())), xavier(&mut rng, cd, d)));
                        wv.push(p.add(name(&format!("ca.v.{}", m.as_str())), xavier(&mut rng, cd, d)));
                    }
                    let wo = p.add(name("ca.o"), xavier(&mut rng, d, d));
                    CrossIds::Dca {
                        wq,
                        wk: [wk[0], wk[1], wk[2]],
                        wv: [wv[0], wv[1], wv[2]],
                        wo,
                    }
                }
                CrossAttnVariant::Shared => {
                    let wq = p.add(name("ca.q"), xavier(&mut rng, d, d));
                    let wk = p.add(name("ca.k"), xavier(&mut rng, cd, d));
                    let wv = p.add(name("ca.v"), xavier(&mut rng, cd, d));
                    let wo = p.add(name("ca.o"), xavier(&mut rng, d, d));
                    let type_emb = p.add(name("ca.type"), Tensor::randn(&[3, cd], 0.02, &mut rng));
                    CrossIds::Shared {
                        wq,
                        wk,
                        wv,
                        wo,
                        type_emb,
                    }
                }
            };
            let hidden = config.mlp_ratio * d;
            let mlp_w1 = p.add(name("mlp.w1"), xavier(&mut rng, d, hidden));
            let mlp_b1 = p.add(name("mlp.b1"), zeros(&[hidden]));
            let mlp_w2 = p.add(name("mlp.w2"), xavier(&mut rng, hidden, d));
            let mlp_b2 = p.add(name("mlp.b2"), zeros(&[d]));
            blocks.push(BlockIds {
                ada_w,
                ada_b,
                qkv_w,
                qkv_b,
                sa_o_w,
                sa_o_b,
                cross,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_ada_w = p.add("final.ada.w", zeros(&[d, 2 * d]));
        let final_ada_b = p.add("final.ada.b", zeros(&[2 * d]));
        let out_w = p.add("final.out.w", zeros(&[d, config.patch_out()]));
        let out_b = p.add("final.out.b", zeros(&[config.patch_out()]));
        let cls_w = p.add("final.cls.w", zeros(&[d, config.cls_dim]));
        let cls_b = p.add("final.cls.b", zeros(&[config.cls_dim]));
        let skip = config.token_skip.then(|| {
            let po = config.patch_out();
            SkipIds {
                w_in: p.add("skip.in", xavier(&mut rng, config.patch_in(), po)),
                gate_w: p.add("skip.gate.w", zeros(&[d, po])),
                gate_b: p.add("skip.gate.b", zeros(&[po])),
                w_out: p.add("skip.out", xavier(&mut rng, po, po)),
            }
        });

        let (gh, gw) = config.grid();
        Ok(Denoiser {
            pos: sincos_2d(gh, gw, d),
            config,
            params: p,
            ids: Ids {
                patch_w,
                patch_b,
                cls_token,
                z_cls_w,
                t_w1,
                t_b1,
                t_w2,
                t_b2,
                group_emb,
                img_w,
                img_b,
                text_table,
                text_pos,
                rna_w,
                rna_b,
                blocks,
                final_ada_w,
                final_ada_b,
                out_w,
                out_b,
                cls_w,
                cls_b,
                skip,
            },
        })
    }

    /// Same architecture with a different parameter set (e.g. EMA weights).
    pub fn with_params(&self, tensors: &[Tensor]) -> Result<Self> {
        let named = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(tensors.iter().cloned())
            .collect();
        let mut out = self.clone();
        out.params.load(named)?;
        Ok(out)
    }

    /// Time conditioning vector `[B, dim]`.
    pub fn time_embedding(&self, tape: &mut Tape, p: &Bound, t: &[f64]) -> Result<Var> {
        let feats = tape.constant(timestep_features(t));
        let h = tape.linear(feats, p.get(self.ids.t_w1), Some(p.get(self.ids.t_b1)))?;
        let h = tape.silu(h)?;
        Ok(tape.linear(h, p.get(self.ids.t_w2), Some(p.get(self.ids.t_b2)))?)
    }

    /// Embeds the batch's condition payloads into per-modality token streams.
    pub fn embed_conditions(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cond: &ConditionBatch,
    ) -> Result<EmbeddedConditions> {
        let cfg = &self.config;
        let b = cond.batch;
        let d = cfg.dim;
        let mut out = EmbeddedConditions::default();

        if let Some((tokens, gates)) = &cond.image {
            if tokens.shape()[2] != cfg.image_cond_dim {
                return Err(MupadError::Condition(format!(
                    "image tokens have width {}, model expects {}",
                    tokens.shape()[2],
                    cfg.image_cond_dim
                )));
            }
            let x = tape.constant(tokens.clone());
            let y = tape.linear(x, p.get(self.ids.img_w), Some(p.get(self.ids.img_b)))?;
            out.streams[Modality::Image.index()] = Some(CondStream {
                tokens: y,
                key_bias: None,
                gates: gates.clone(),
            });
        }

        if let Some((ids, lens, gates)) = &cond.text {
            let len = ids[0].len();
            if len > cfg.text_max_len {
                return Err(MupadError::Condition(format!(
                    "caption of {len} tokens exceeds limit {}",
                    cfg.text_max_len
                )));
            }
            if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= cfg.text_vocab) {
                return Err(MupadError::Condition(format!("token id {bad} outside vocabulary")));
            }
            let flat: Vec<usize> = ids.iter().flatten().copied().collect();
            let e = tape.gather_rows(p.get(self.ids.text_table), &flat)?;
            let e = tape.reshape(e, &[b, len, d])?;
            let pos = tape.slice(p.get(self.ids.text_pos), 0, 0, len)?;
            let e = tape.add(e, pos)?;
            let padded = lens.iter().any(|&l| l < len);
            let key_bias = padded.then(|| {
                let mut bias = vec![0.0; b * len];
                for (i, &l) in lens.iter().enumerate() {
                    let valid = if l == 0 { len } else { l };
                    for j in valid..len {
                        bias[i * len + j] = MASKED;
                    }
                }
                Tensor::new(&[b, len], bias).expect("sized above")
            });
            out.streams[Modality::Text.index()] = Some(CondStream {
                tokens: e,
                key_bias,
                gates: gates.clone(),
            });
        }

        if let Some((scores, gates)) = &cond.rna {
            if scores.shape()[1] != cfg.rna_dim {
                return Err(MupadError::Condition(format!(
                    "pathway vector has length {}, model expects {}",
                    scores.shape()[1],
                    cfg.rna_dim
                )));
            }
            let x = tape.constant(scores.clone());
            let y = tape.linear(x, p.get(self.ids.rna_w), Some(p.get(self.ids.rna_b)))?;
            let y = tape.reshape(y, &[b, cfg.rna_tokens, d])?;
            out.streams[Modality::Rna.index()] = Some(CondStream {
                tokens: y,
                key_bias: None,
                gates: gates.clone(),
            });
        }
        Ok(out)
    }

    fn cross(&self, tape: &mut Tape, p: &Bound, block: &BlockIds, x: Var, conds: &EmbeddedConditions) -> Result<Var> {
        let heads = self.config.heads;
        match &block.cross {
            CrossIds::Dca { wq, wk, wv, wo } => {
                let w = DcaWeights {
                    wq: p.get(*wq),
                    wk: wk.map(|i| p.get(i)),
                    wv: wv.map(|i| p.get(i)),
                    wo: p.get(*wo),
                };
                dca_forward(tape, x, conds, &w, heads)
            }
            CrossIds::Shared {
                wq,
                wk,
                wv,
                wo,
                type_emb,
            } => {
                let w = SharedWeights {
                    wq: p.get(*wq),
                    wk: p.get(*wk),
                    wv: p.get(*wv),
                    wo: p.get(*wo),
                    type_emb: p.get(*type_emb),
                };
                shared_attention_forward(tape, x, conds, &w, heads)
            }
        }
    }

    /// Full forward pass on `z_t: [B, C, H, W]` at per-sample times `t`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z_t: Var,
        t: &[f64],
        cond: &ConditionBatch,
        opts: &ForwardOptions,
    ) -> Result<DenoiserOutput> {
        let cfg = &self.config;
        let [c, h, w] = cfg.latent_shape;
        let shape = tape.shape(z_t).to_vec();
        let b = t.len();
        if shape != [b, c, h, w] || cond.batch != b {
            return Err(MupadError::Invalid(format!(
                "latent {shape:?} with {b} timesteps and condition batch {}; model expects [B, {c}, {h}, {w}]",
                cond.batch
            )));
        }
        if let Some(&bad) = t.iter().find(|&&ti| !(0.0..=1.0).contains(&ti)) {
            return Err(MupadError::Invalid(format!("timestep {bad} outside [0, 1]")));
        }
        if let Some(inj) = &opts.inject {
            if inj.maps.len() != cfg.depth {
                return Err(MupadError::Invalid(format!(
                    "injection covers {} layers, model has {}",
                    inj.maps.len(),
                    cfg.depth
                )));
            }
        }
        let d = cfg.dim;
        let n = cfg.num_patches();

        let x = match (&cond.structure, cfg.struct_channels) {
            (None, 0) => z_t,
            (Some(s), cs) if cs > 0 && s.shape() == [b, cs, h, w] => {
                let sv = tape.constant(s.clone());
                tape.concat(&[z_t, sv], 1)?
            }
            (s, cs) => {
                return Err(MupadError::Condition(format!(
                    "model expects {cs} structural channels, got {:?}",
                    s.as_ref().map(|s| s.shape().to_vec())
                )))
            }
        };

        let tokens = patchify_var(tape, x, cfg.patch)?;
        let hp = tape.linear(tokens, p.get(self.ids.patch_w), Some(p.get(self.ids.patch_b)))?;
        let pos = tape.constant(self.pos.clone());
        let hp = tape.add(hp, pos)?;

        let base = tape.constant(Tensor::zeros(&[b, 1, d]));
        let mut cls = tape.add(base, p.get(self.ids.cls_token))?;
        if let (Some(zw), Some((z, gates))) = (self.ids.z_cls_w, &cond.z_cls) {
            if z.shape()[1] != cfg.cls_dim {
                return Err(MupadError::Condition(format!(
                    "z_cls has width {}, model expects {}",
                    z.shape()[1],
                    cfg.cls_dim
                )));
            }
            let zv = tape.constant(z.clone());
            let zp = tape.matmul(zv, p.get(zw))?;
            let g = tape.constant(Tensor::new(&[b, 1], gates.clone())?);
            let zp = tape.mul(zp, g)?;
            let zp = tape.reshape(zp, &[b, 1, d])?;
            cls = tape.add(cls, zp)?;
        }
        let mut hcur = tape.concat(&[cls, hp], 1)?;

        let mut temb = self.time_embedding(tape, p, t)?;
        match (self.ids.group_emb, &cond.group) {
            (Some(ge), Some(groups)) => {
                if let Some(&bad) = groups.iter().find(|&&g| g >= cfg.num_groups) {
                    return Err(MupadError::Condition(format!("group {bad} >= {}", cfg.num_groups)));
                }
                let gv = tape.gather_rows(p.get(ge), groups)?;
                temb = tape.add(temb, gv)?;
            }
            (None, Some(_)) => {
                return Err(MupadError::Condition("model has no channel groups".into()));
            }
            (Some(_), None) => {
                return Err(MupadError::Condition("group index required".into()));
            }
            (None, None) => {}
        }
        let sc = tape.silu(temb)?;
        let conds = self.embed_conditions(tape, p, cond)?;

        let mut features = Vec::new();
        let mut attn = Vec::new();
        for (li, blk) in self.ids.blocks.iter().enumerate() {
            let mods = tape.linear(sc, p.get(blk.ada_w), Some(p.get(blk.ada_b)))?;
            let mods = tape.reshape(mods, &[b, 9, d])?;
            let mut chunk = Vec::with_capacity(9);
            for j in 0..9 {
                chunk.push(tape.slice(mods, 1, j, 1)?);
            }

            let x = tape.layer_norm(hcur, LN_EPS)?;
            let x = modulate(tape, x, chunk[0], chunk[1])?;
            let qkv = tape.linear(x, p.get(blk.qkv_w), Some(p.get(blk.qkv_b)))?;
            let q = tape.slice(qkv, 2, 0, d)?;
            let k = tape.slice(qkv, 2, d, d)?;
            let v = tape.slice(qkv, 2, 2 * d, d)?;
            let injected = opts.inject.and_then(|inj| inj.maps[li].as_ref());
            let (sa, probs) = multi_head_attention(tape, q, k, v, cfg.heads, None, injected)?;
            let sa = tape.linear(sa, p.get(blk.sa_o_w), Some(p.get(blk.sa_o_b)))?;
            let sa = tape.mul(sa, chunk[2])?;
            hcur = tape.add(hcur, sa)?;

            let x = tape.layer_norm(hcur, LN_EPS)?;
            let x = modulate(tape, x, chunk[3], chunk[4])?;
            let ca = self.cross(tape, p, blk, x, &conds)?;
            let ca = tape.mul(ca, chunk[5])?;
            hcur = tape.add(hcur, ca)?;

            let x = tape.layer_norm(hcur, LN_EPS)?;
            let x = modulate(tape, x, chunk[6], chunk[7])?;
            let f = tape.linear(x, p.get(blk.mlp_w1), Some(p.get(blk.mlp_b1)))?;
            let f = tape.gelu(f)?;
            let f = tape.linear(f, p.get(blk.mlp_w2), Some(p.get(blk.mlp_b2)))?;
            let f = tape.mul(f, chunk[8])?;
            hcur = tape.add(hcur, f)?;

            if opts.keep_features {
                features.push(tape.slice(hcur, 1, 1, n)?);
            }
            if opts.capture_attention {
                attn.push(probs);
            }
        }

        let mods = tape.linear(sc, p.get(self.ids.final_ada_w), Some(p.get(self.ids.final_ada_b)))?;
        let mods = tape.reshape(mods, &[b, 2, d])?;
        let shift = tape.slice(mods, 1, 0, 1)?;
        let scale = tape.slice(mods, 1, 1, 1)?;
        let x = tape.layer_norm(hcur, LN_EPS)?;
        let x = modulate(tape, x, shift, scale)?;
        let patch_tokens = tape.slice(x, 1, 1, n)?;
        let mut out = tape.linear(patch_tokens, p.get(self.ids.out_w), Some(p.get(self.ids.out_b)))?;
        if let Some(sk) = &self.ids.skip {
            let po = cfg.patch_out();
            let s = tape.linear(tokens, p.get(sk.w_in), None)?;
            let g = tape.linear(sc, p.get(sk.gate_w), Some(p.get(sk.gate_b)))?;
            let g = tape.reshape(g, &[b, 1, po])?;
            let s = tape.mul(s, g)?;
            let s = tape.linear(s, p.get(sk.w_out), None)?;
            out = tape.add(out, s)?;
        }
        let v_patch = unpatchify_var(tape, out, cfg.patch, cfg.latent_shape)?;
        let cls_tok = tape.slice(x, 1, 0, 1)?;
        let cls_tok = tape.reshape(cls_tok, &[b, d])?;
        let v_cls = tape.linear(cls_tok, p.get(self.ids.cls_w), Some(p.get(self.ids.cls_b)))?;

        Ok(DenoiserOutput {
            v_patch,
            v_cls,
            features,
            attn,
        })
    }

    /// Inference-only forward returning the velocity and, optionally, the attention maps.
    pub fn predict(
        &self,
        z: &Tensor,
        t: f64,
        cond: &ConditionBatch,
        opts: &ForwardOptions,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let ts = vec![t; z.shape()[0]];
        let out = self.forward(&mut tape, &p, zv, &ts, cond, opts)?;
        let maps = out.attn.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((tape.value(out.v_patch).clone(), maps))
    }

    /// Pass whose self-attention maps are replaced by `recorded` at the layers where
    /// it holds a map.
    pub fn inject_attention(
        &self,
        z: &Tensor,
        t: f64,
        cond: &ConditionBatch,
        recorded: &[Option<Tensor>],
    ) -> Result<Tensor> {
        for m in recorded.iter().flatten() {
            BlockActivations {
                steps: vec![vec![m.clone()]],
            }
            .validate()?;
        }
        let opts = ForwardOptions {
            inject: Some(Injection { maps: recorded }),
            ..ForwardOptions::default()
        };
        Ok(self.predict(z, t, cond, &opts)?.0)
    }
}

impl crate::flow::VelocityModel for Denoiser {
    type Cond = ConditionBatch;

    fn velocity(&self, z: &Tensor, t: f64, cond: &ConditionBatch) -> Result<Tensor> {
        Ok(self.predict(z, t, cond, &ForwardOptions::default())?.0)
    }

    fn null_condition(&self, cond: &ConditionBatch) -> ConditionBatch {
        cond.null()
    }

    fn has_condition(&self, cond: &ConditionBatch) -> bool {
        cond.any_modality() || cond.z_cls.is_some()
    }
}
