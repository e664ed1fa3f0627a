//! Frozen-encoder preprocessing of dataset samples into training records.

use mupad_tensor::Tensor;

use super::config::Task;
use crate::conditioning::{encode_image, group_channels, teacher_features, StubEncoder, TextVocab};
use crate::data::SyntheticSample;
use crate::error::Result;
use crate::model::ConditionSet;

/// Everything the training step needs for one example, computed once.
#[derive(Clone, Debug)]
pub struct TrainingRecord {
    /// Clean target latent in model space.
    pub x0: Tensor,
    /// Full condition set; dropout is applied per step.
    pub cond: ConditionSet,
    /// Condition-encoder CLS of the clean image (`v*_cls`).
    pub cls_target: Vec<f64>,
    /// Teacher feature grid of the target image `[C, gh, gw]`.
    pub teacher: Tensor,
}

/// Frozen encoders shared by preparation, sampling and evaluation.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub condition: StubEncoder,
    pub teacher: StubEncoder,
    pub vocab: TextVocab,
}

impl Default for Encoders {
    fn default() -> Self {
        Encoders {
            condition: StubEncoder::condition(),
            teacher: StubEncoder::teacher(),
            vocab: TextVocab::standard(),
        }
    }
}

impl Encoders {
    pub fn hashes(&self) -> (String, String) {
        (self.condition.weights_hash(), self.teacher.weights_hash())
    }

    fn teacher_grid(&self, img: &Tensor) -> Result<Tensor> {
        let batch = Tensor::stack(std::slice::from_ref(img))?;
        Ok(teacher_features(&self.teacher, &batch)?.index_first(0))
    }

    /// Condition set built from whichever modalities the sample provides.
    pub fn condition_for(&self, s: &SyntheticSample) -> Result<ConditionSet> {
        let mut c = ConditionSet::empty();
        if s.available[0] {
            let e = self.condition.encode(&s.image)?;
            c = c.with_image(e.tokens).with_z_cls(e.cls);
        }
        if s.available[1] {
            c = c.with_text(self.vocab.tokenize(&s.caption));
        }
        if s.available[2] {
            c = c.with_rna(s.pathway.clone());
        }
        Ok(c)
    }

    /// Image-token semantic condition of an H&E patch, used for staining.
    pub fn semantic_condition(&self, he: &Tensor) -> Result<ConditionSet> {
        Ok(ConditionSet::empty().with_image(self.condition.encode(he)?.tokens))
    }

    pub fn records(&self, task: Task, samples: &[SyntheticSample]) -> Result<Vec<TrainingRecord>> {
        let mut out = Vec::new();
        for s in samples {
            let cls = self.condition.encode(&s.image)?.cls;
            match task {
                Task::Generate => out.push(TrainingRecord {
                    x0: encode_image(&s.image)?,
                    cond: self.condition_for(s)?,
                    cls_target: cls,
                    teacher: self.teacher_grid(&s.image)?,
                }),
                Task::Stain => {
                    let structure = encode_image(&s.image)?;
                    let sem = self.semantic_condition(&s.image)?;
                    for (g, group) in group_channels(&s.markers)?.iter().enumerate() {
                        out.push(TrainingRecord {
                            x0: encode_image(group)?,
                            cond: sem.clone().with_structure(structure.clone()).with_group(g),
                            cls_target: cls.clone(),
                            teacher: self.teacher_grid(group)?,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}
