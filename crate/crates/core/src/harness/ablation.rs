//! The {dca, shared} x {mupad, repa, naive} ablation matrix, scored on image-conditioned
//! generation in teacher feature space.

use mupad_tensor::Tensor;

use super::config::RunConfig;
use super::prepare::{Encoders, TrainingRecord};
use super::train::{RunOutput, Trainer};
use crate::data::SyntheticSample;
use crate::error::{MupadError, Result};
use crate::flow::{GuidanceSchedule, SamplerConfig};
use crate::metrics::{cosine_similarity_mean, fid};
use crate::model::{ConditionSet, CrossAttnVariant, Denoiser};
use crate::objectives::AlignVariant;
use crate::pipelines::generate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub variant: CrossAttnVariant,
    pub align: AlignVariant,
}

impl Arm {
    /// All six arms, dca first.
    pub fn matrix() -> Vec<Arm> {
        let mut out = Vec::new();
        for variant in [CrossAttnVariant::Dca, CrossAttnVariant::Shared] {
            for align in [AlignVariant::Mupad, AlignVariant::Repa, AlignVariant::Naive] {
                out.push(Arm { variant, align });
            }
        }
        out
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.variant.as_str(), self.align.as_str())
    }

    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.model.variant = self.variant;
        c.align = self.align;
        c.seed = seed;
        c
    }
}

/// Held-out references: image conditions and their teacher features.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub conditions: Vec<ConditionSet>,
    /// Pooled teacher features `[n, TEACHER_WIDTH]` of the reference images.
    pub features: Tensor,
}

impl EvalSet {
    /// Each reference conditions one sample through its image tokens and CLS only.
    pub fn image_conditioned(encoders: &Encoders, refs: &[SyntheticSample]) -> Result<Self> {
        if refs.len() < 2 {
            return Err(MupadError::Invalid("evaluation needs at least two references".into()));
        }
        let conditions = refs
            .iter()
            .map(|s| {
                let e = encoders.condition.encode(&s.image)?;
                Ok(ConditionSet::empty().with_image(e.tokens).with_z_cls(e.cls))
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<Tensor> = refs.iter().map(|s| s.image.clone()).collect();
        let features = encoders.teacher.pooled(&Tensor::stack(&images)?)?;
        Ok(EvalSet { conditions, features })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    /// Frechet distance between generated and reference teacher features.
    pub fid: f64,
    /// Mean cosine similarity between each sample and its reference.
    pub similarity: f64,
}

pub fn score_images(encoders: &Encoders, eval: &EvalSet, images: &[Tensor]) -> Result<Score> {
    if images.len() != eval.len() {
        return Err(MupadError::Invalid(format!("{} images for {} references", images.len(), eval.len())));
    }
    let fake = encoders.teacher.pooled(&Tensor::stack(images)?)?;
    let d = eval.features.shape()[1];
    Ok(Score {
        fid: fid(eval.features.data(), fake.data(), d)?,
        similarity: cosine_similarity_mean(fake.data(), eval.features.data(), d)?,
    })
}

pub fn evaluate(
    model: &Denoiser,
    encoders: &Encoders,
    eval: &EvalSet,
    sampler: &SamplerConfig,
    guidance: &GuidanceSchedule,
) -> Result<Score> {
    let images = generate(model, &eval.conditions, sampler, guidance)?;
    score_images(encoders, eval, &images)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub score: Score,
    /// Mean flow loss over the last tenth of training.
    pub final_loss: f64,
}

/// Trains one arm from scratch and scores its EMA model. Sampling uses the run seed, so arms
/// sharing a seed also share their initial noise.
pub fn run_arm(
    base: &RunConfig,
    arm: Arm,
    seed: u64,
    records: &[TrainingRecord],
    encoders: &Encoders,
    eval: &EvalSet,
) -> Result<ArmResult> {
    let cfg = arm.config(base, seed);
    let mut tr = Trainer::new(cfg.clone())?;
    let logs = tr.run(records, &RunOutput::default())?;
    let n = (logs.len() / 10).max(1).min(logs.len());
    let final_loss = mean(&logs[logs.len() - n..].iter().map(|l| l.patch).collect::<Vec<_>>());
    let score = evaluate(
        &tr.ema_model()?,
        encoders,
        eval,
        &cfg.sampler.sampler(seed),
        &cfg.sampler.guidance(),
    )?;
    Ok(ArmResult { arm, seed, score, final_loss })
}

/// Per-arm summary over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub fids: Vec<f64>,
    pub similarities: Vec<f64>,
}

impl AblationRow {
    pub fn mean_fid(&self) -> f64 {
        mean(&self.fids)
    }

    pub fn mean_similarity(&self) -> f64 {
        mean(&self.similarities)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub results: Vec<ArmResult>,
}

impl AblationTable {
    /// One row per arm present, in matrix order; seeds in run order.
    pub fn rows(&self) -> Vec<AblationRow> {
        Arm::matrix()
            .into_iter()
            .filter_map(|arm| {
                let rs: Vec<&ArmResult> = self.results.iter().filter(|r| r.arm == arm).collect();
                (!rs.is_empty()).then(|| AblationRow {
                    arm,
                    fids: rs.iter().map(|r| r.score.fid).collect(),
                    similarities: rs.iter().map(|r| r.score.similarity).collect(),
                })
            })
            .collect()
    }

    pub fn get(&self, arm: Arm, seed: u64) -> Option<&ArmResult> {
        self.results.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Seeds on which `a` beats `b` under `better`, out of seeds both arms ran.
    pub fn wins(&self, a: Arm, b: Arm, better: impl Fn(&Score, &Score) -> bool) -> (usize, usize) {
        let mut won = 0;
        let mut total = 0;
        for r in self.results.iter().filter(|r| r.arm == a) {
            if let Some(o) = self.get(b, r.seed) {
                total += 1;
                won += usize::from(better(&r.score, &o.score));
            }
        }
        (won, total)
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("arm\tmean_fid\tmean_similarity\tfid_per_seed\n");
        for r in self.rows() {
            let per: Vec<String> = r.fids.iter().map(|f| format!("{f:.4}")).collect();
            s.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{}\n",
                r.arm.name(),
                r.mean_fid(),
                r.mean_similarity(),
                per.join(",")
            ));
        }
        s
    }
}

/// Runs every arm on every seed; `progress` sees each result as it lands.
pub fn run_ablation(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    records: &[TrainingRecord],
    encoders: &Encoders,
    eval: &EvalSet,
    mut progress: impl FnMut(&ArmResult),
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        for &arm in arms {
            let r = run_arm(base, arm, seed, records, encoders, eval)?;
            progress(&r);
            table.results.push(r);
        }
    }
    Ok(table)
}
