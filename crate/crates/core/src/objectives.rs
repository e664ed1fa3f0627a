//! Training losses, condition dropout and the embedding-space flow network.

use mupad_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MupadError, Result};
use crate::model::{ConditionSet, DenoiserOutput, Modality};

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub patch: f64,
    pub cls: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            patch: 1.0,
            cls: 0.1,
            align: 0.5,
        }
    }
}

/// Which representation-alignment term is added to the denoising loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignVariant {
    /// Convolutional projector on the feature grid.
    Mupad,
    /// Token-wise perceptron projector.
    Repa,
    /// No alignment term.
    Naive,
}

impl AlignVariant {
    pub const ALL: [AlignVariant; 3] = [AlignVariant::Mupad, AlignVariant::Repa, AlignVariant::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignVariant::Mupad => "mupad",
            AlignVariant::Repa => "repa",
            AlignVariant::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mupad" => Ok(AlignVariant::Mupad),
            "repa" => Ok(AlignVariant::Repa),
            "naive" => Ok(AlignVariant::Naive),
            other => Err(MupadError::Config(format!("unknown alignment variant `{other}`"))),
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

/// `[B, N, D]` tokens on a `gh x gw` grid to `[B, D, gh, gw]`.
fn tokens_to_grid(tape: &mut Tape, x: Var, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(MupadError::Invalid(format!(
            "{s:?} tokens do not tile a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let y = tape.permute(x, &[0, 2, 1])?;
    Ok(tape.reshape(y, &[s[0], s[2], grid.0, grid.1])?)
}

/// `[B, C, H, W]` grid to `[B, H*W, C]` tokens.
pub fn grid_to_tokens(g: &Tensor) -> Result<Tensor> {
    let s = g.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; b * n * c];
    for i in 0..b {
        for ch in 0..c {
            for p in 0..n {
                out[(i * n + p) * c + ch] = g.data()[(i * c + ch) * n + p];
            }
        }
    }
    Ok(Tensor::new(&[b, n, c], out)?)
}

/// conv3x3 -> GELU -> conv1x1 from the denoiser feature grid to the teacher grid.
#[derive(Clone, Debug)]
pub struct AlignProjector {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl AlignProjector {
    pub fn new(store: &mut ParamStore, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AlignProjector {
            w1: store.add("align.cnn.w1", xavier(&mut rng, &[in_dim, in_dim, 3, 3], 9 * in_dim, 9 * in_dim)),
            b1: store.add("align.cnn.b1", Tensor::zeros(&[1, in_dim, 1, 1])),
            w2: store.add("align.cnn.w2", xavier(&mut rng, &[out_dim, in_dim, 1, 1], in_dim, out_dim)),
            b2: store.add("align.cnn.b2", Tensor::zeros(&[1, out_dim, 1, 1])),
        }
    }

    /// Features `[B, N, D]` to `[B, out, gh, gw]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, feats: Var, grid: (usize, usize)) -> Result<Var> {
        let x = tokens_to_grid(tape, feats, grid)?;
        let x = tape.conv2d(x, p.get(self.w1), 1, 1)?;
        let x = tape.add(x, p.get(self.b1))?;
        let x = tape.gelu(x)?;
        let x = tape.conv2d(x, p.get(self.w2), 1, 0)?;
        Ok(tape.add(x, p.get(self.b2))?)
    }
}

/// Token-wise two-layer perceptron (ablation projector).
#[derive(Clone, Debug)]
pub struct RepaProjector {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl RepaProjector {
    pub fn new(store: &mut ParamStore, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RepaProjector {
            w1: store.add("align.mlp.w1", xavier(&mut rng, &[in_dim, in_dim], in_dim, in_dim)),
            b1: store.add("align.mlp.b1", Tensor::zeros(&[in_dim])),
            w2: store.add("align.mlp.w2", xavier(&mut rng, &[in_dim, out_dim], in_dim, out_dim)),
            b2: store.add("align.mlp.b2", Tensor::zeros(&[out_dim])),
        }
    }

    /// Features `[B, N, D]` to `[B, N, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, feats: Var) -> Result<Var> {
        let x = tape.linear(feats, p.get(self.w1), Some(p.get(self.b1)))?;
        let x = tape.gelu(x)?;
        Ok(tape.linear(x, p.get(self.w2), Some(p.get(self.b2)))?)
    }
}

/// Alignment head for one variant, with its own parameter store.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub variant: AlignVariant,
    pub params: ParamStore,
    /// Block whose output features are aligned.
    pub layer: usize,
    grid: (usize, usize),
    cnn: Option<AlignProjector>,
    mlp: Option<RepaProjector>,
}

impl Aligner {
    pub fn new(
        variant: AlignVariant,
        feat_dim: usize,
        teacher_dim: usize,
        grid: (usize, usize),
        layer: usize,
        seed: u64,
    ) -> Self {
        let mut params = ParamStore::new();
        let (cnn, mlp) = match variant {
            AlignVariant::Mupad => (Some(AlignProjector::new(&mut params, feat_dim, teacher_dim, seed)), None),
            AlignVariant::Repa => (None, Some(RepaProjector::new(&mut params, feat_dim, teacher_dim, seed))),
            AlignVariant::Naive => (None, None),
        };
        Aligner {
            variant,
            params,
            layer,
            grid,
            cnn,
            mlp,
        }
    }

    /// Middle block of a `depth`-block model.
    pub fn middle_layer(depth: usize) -> usize {
        (depth.saturating_sub(1)) / 2
    }

    /// MSE between projected features and the teacher grid `[B, C, gh, gw]`.
    /// Returns `None` for the naive variant.
    pub fn loss(&self, tape: &mut Tape, p: &Bound, features: &[Var], teacher: &Tensor) -> Result<Option<Var>> {
        if self.variant == AlignVariant::Naive {
            return Ok(None);
        }
        let f = *features.get(self.layer).ok_or_else(|| {
            MupadError::Invalid(format!(
                "alignment layer {} but only {} feature grids kept",
                self.layer,
                features.len()
            ))
        })?;
        let (pred, target) = match (&self.cnn, &self.mlp) {
            (Some(c), _) => (c.forward(tape, p, f, self.grid)?, teacher.clone()),
            (_, Some(m)) => (m.forward(tape, p, f)?, grid_to_tokens(teacher)?),
            _ => unreachable!("projector exists for aligned variants"),
        };
        if tape.shape(pred) != target.shape() {
            return Err(MupadError::Invalid(format!(
                "projected grid {:?} vs teacher {:?}",
                tape.shape(pred),
                target.shape()
            )));
        }
        let t = tape.constant(target);
        Ok(Some(tape.mse(pred, t)?))
    }
}

/// Named scalar terms of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub patch: Var,
    pub cls: Var,
    pub align: Option<Var>,
}

/// `lambda_patch * MSE(v_patch, v*) + lambda_cls * MSE(v_cls, v*_cls)`.
pub fn denoise_loss(
    tape: &mut Tape,
    out: &DenoiserOutput,
    v_star_patch: &Tensor,
    v_star_cls: &Tensor,
    w: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let vp = tape.constant(v_star_patch.clone());
    let vc = tape.constant(v_star_cls.clone());
    let patch = tape.mse(out.v_patch, vp)?;
    let cls = tape.mse(out.v_cls, vc)?;
    let a = tape.scale(patch, w.patch)?;
    let b = tape.scale(cls, w.cls)?;
    Ok((tape.add(a, b)?, patch, cls))
}

/// Denoising loss plus the weighted alignment term of `aligner` (absent for naive).
pub fn total_loss(
    tape: &mut Tape,
    out: &DenoiserOutput,
    v_star_patch: &Tensor,
    v_star_cls: &Tensor,
    w: &LossWeights,
    aligner: &Aligner,
    aligner_params: &Bound,
    teacher: &Tensor,
) -> Result<LossTerms> {
    let (mut total, patch, cls) = denoise_loss(tape, out, v_star_patch, v_star_cls, w)?;
    let align = aligner.loss(tape, aligner_params, &out.features, teacher)?;
    if let Some(a) = align {
        let s = tape.scale(a, w.align)?;
        total = tape.add(total, s)?;
    }
    Ok(LossTerms {
        total,
        patch,
        cls,
        align,
    })
}

/// Deactivates each present modality independently with probability `p`.
pub fn condition_dropout<R: Rng + ?Sized>(c: &ConditionSet, p: f64, rng: &mut R) -> Result<ConditionSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MupadError::Invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    let mut out = c.clone();
    for m in Modality::ALL {
        // draw for every modality so the stream of random numbers does not depend on availability
        let drop = rng.random::<f64>() < p;
        if drop && out.is_active(m) {
            out.deactivate(m);
        }
    }
    Ok(out)
}

pub const FLOW_NET_LAYERS: usize = 6;
const FLOW_TIME_FEATURES: usize = 8;

fn flow_time_features(t: &[f64]) -> Tensor {
    let mut out = Vec::with_capacity(t.len() * FLOW_TIME_FEATURES);
    for &ti in t {
        out.push(ti);
        out.push(1.0 - ti);
        for k in 0..3 {
            let f = std::f64::consts::PI * (1 << k) as f64;
            out.push((f * ti).sin());
            out.push((f * ti).cos());
        }
    }
    Tensor::new(&[t.len(), FLOW_TIME_FEATURES], out).expect("sized above")
}

/// Six-layer SiLU perceptron `v(z_t, t)` on embedding vectors. The last layer starts at zero.
#[derive(Clone, Debug)]
pub struct EmbeddingFlowNet {
    pub dim: usize,
    pub width: usize,
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl EmbeddingFlowNet {
    pub fn new(dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = dim + FLOW_TIME_FEATURES;
        for i in 0..FLOW_NET_LAYERS {
            let last = i + 1 == FLOW_NET_LAYERS;
            let fan_out = if last { dim } else { width };
            let w = if last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                xavier(&mut rng, &[fan_in, fan_out], fan_in, fan_out)
            };
            let wid = params.add(format!("flow.{i}.w"), w);
            let bid = params.add(format!("flow.{i}.b"), Tensor::zeros(&[fan_out]));
            layers.push((wid, bid));
            fan_in = width;
        }
        EmbeddingFlowNet {
            dim,
            width,
            params,
            layers,
        }
    }

    /// `z: [B, dim]` to velocities `[B, dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, t: &[f64]) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.dim || s[0] != t.len() {
            return Err(MupadError::Invalid(format!(
                "flow net expects [{}, {}], got {s:?}",
                t.len(),
                self.dim
            )));
        }
        let tf = tape.constant(flow_time_features(t));
        let mut x = tape.concat(&[z, tf], 1)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.linear(x, p.get(w), Some(p.get(b)))?;
            if i + 1 < self.layers.len() {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let ts = vec![t; z.shape()[0]];
        let v = self.forward(&mut tape, &p, zv, &ts)?;
        Ok(tape.value(v).clone())
    }

    /// Euler integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1`.
    pub fn transport(&self, z0: &Tensor, steps: usize) -> Result<Tensor> {
        if steps == 0 {
            return Err(MupadError::Invalid("transport needs at least one step".into()));
        }
        let dt = 1.0 / steps as f64;
        let mut z = z0.clone();
        for i in 0..steps {
            let v = self.velocity(&z, i as f64 * dt)?;
            z = z.add(&v.scale(dt))?;
        }
        Ok(z)
    }
}

/// `MSE(v(z_t, t), z1 - z0)` with `z_t = (1 - t) z0 + t z1`, rows batched.
pub fn embedding_flow_loss(
    tape: &mut Tape,
    net: &EmbeddingFlowNet,
    p: &Bound,
    z0: &Tensor,
    z1: &Tensor,
    t: &[f64],
) -> Result<Var> {
    if z0.shape() != z1.shape() || z0.rank() != 2 || z0.shape()[1] != net.dim {
        return Err(MupadError::Invalid(format!(
            "embedding pair shapes {:?} and {:?} for width {}",
            z0.shape(),
            z1.shape(),
            net.dim
        )));
    }
    let d = net.dim;
    let mut zt = z0.clone();
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..d {
            let k = i * d + j;
            zt.data_mut()[k] = (1.0 - ti) * z0.data()[k] + ti * z1.data()[k];
        }
    }
    let target = tape.constant(z1.sub(z0)?);
    let zv = tape.constant(zt);
    let v = net.forward(tape, p, zv, t)?;
    Ok(tape.mse(v, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weights_default() {
        let w = LossWeights::default();
        assert_eq!((w.patch, w.cls, w.align), (1.0, 0.1, 0.5));
    }

    #[test]
    fn dropout_extremes() {
        let c = ConditionSet::empty().with_text(vec![2]).with_rna(vec![0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(condition_dropout(&c, 0.0, &mut rng).unwrap(), c);
        assert!(!condition_dropout(&c, 1.0, &mut rng).unwrap().any_active());
        assert!(condition_dropout(&c, 1.5, &mut rng).is_err());
    }

    #[test]
    fn untrained_flow_net_is_zero() {
        let net = EmbeddingFlowNet::new(4, 16, 3);
        let v = net.velocity(&Tensor::ones(&[2, 4]), 0.3).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_tokens_layout() {
        let g = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(grid_to_tokens(&g).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
