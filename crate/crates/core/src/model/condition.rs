use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

/// The three conditioning modalities summed by decoupled cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Text,
    Rna,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Rna];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Rna => "rna",
        }
    }
}

/// Conditioning for one sample.
///
/// `active[m]` is the indicator I(m). A modality is active exactly when its
/// payload is present; [`ConditionSet::validate`] enforces this.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionSet {
    /// Frozen image-encoder tokens, `[n, image_cond_dim]`.
    pub image_tokens: Option<Tensor>,
    /// Caption token ids; embedded by the model.
    pub text_ids: Option<Vec<usize>>,
    /// Pathway score vector.
    pub rna: Option<Vec<f64>>,
    /// Semantic CLS conditioning token.
    pub z_cls: Option<Vec<f64>>,
    pub active: [bool; 3],
    /// Clean structural latent `[C_s, H, W]`, concatenated with the noisy input.
    pub structure: Option<Tensor>,
    /// Output channel group for multiplex generation.
    pub group: Option<usize>,
}

impl ConditionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_image(mut self, tokens: Tensor) -> Self {
        self.image_tokens = Some(tokens);
        self.active[Modality::Image.index()] = true;
        self
    }

    /// Sets the caption ids; an empty caption leaves text inactive.
    pub fn with_text(mut self, ids: Vec<usize>) -> Self {
        if ids.is_empty() {
            self.text_ids = None;
            self.active[Modality::Text.index()] = false;
        } else {
            self.text_ids = Some(ids);
            self.active[Modality::Text.index()] = true;
        }
        self
    }

    pub fn with_rna(mut self, scores: Vec<f64>) -> Self {
        self.rna = Some(scores);
        self.active[Modality::Rna.index()] = true;
        self
    }

    pub fn with_z_cls(mut self, z: Vec<f64>) -> Self {
        self.z_cls = Some(z);
        self
    }

    pub fn with_structure(mut self, s: Tensor) -> Self {
        self.structure = Some(s);
        self
    }

    pub fn with_group(mut self, g: usize) -> Self {
        self.group = Some(g);
        self
    }

    pub fn is_active(&self, m: Modality) -> bool {
        self.active[m.index()]
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }

    /// Sets I(m) = 0 and removes the payload. Dropping the image also drops `z_cls`,
    /// which is derived from the same image.
    pub fn deactivate(&mut self, m: Modality) {
        self.active[m.index()] = false;
        match m {
            Modality::Image => {
                self.image_tokens = None;
                self.z_cls = None;
            }
            Modality::Text => self.text_ids = None,
            Modality::Rna => self.rna = None,
        }
    }

    /// The classifier-free-guidance null: no modality, no semantic token, but the
    /// structural latent and group are kept.
    pub fn null(&self) -> Self {
        ConditionSet {
            structure: self.structure.clone(),
            group: self.group,
            ..ConditionSet::default()
        }
    }

    fn present(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image_tokens.is_some(),
            Modality::Text => self.text_ids.is_some(),
            Modality::Rna => self.rna.is_some(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            match (self.is_active(m), self.present(m)) {
                (true, false) => {
                    return Err(MupadError::Condition(format!(
                        "{} flagged active but its embedding is absent",
                        m.as_str()
                    )))
                }
                (false, true) => {
                    return Err(MupadError::Condition(format!(
                        "{} embedding present but flagged inactive",
                        m.as_str()
                    )))
                }
                _ => {}
            }
        }
        if let Some(ids) = &self.text_ids {
            if ids.is_empty() {
                return Err(MupadError::Condition("empty text id sequence".into()));
            }
        }
        Ok(())
    }
}

/// A batch of condition sets stacked for one forward pass.
///
/// Modalities absent from every sample are `None`; otherwise missing samples are
/// zero-filled and carry a zero gate.
#[derive(Clone, Debug)]
pub struct ConditionBatch {
    pub batch: usize,
    /// `[B, n, d]` and per-sample gates.
    pub image: Option<(Tensor, Vec<f64>)>,
    /// Padded ids `[B][L]`, per-sample valid lengths, and gates.
    pub text: Option<(Vec<Vec<usize>>, Vec<usize>, Vec<f64>)>,
    /// `[B, rna_dim]` and gates.
    pub rna: Option<(Tensor, Vec<f64>)>,
    /// `[B, cls_dim]` and gates.
    pub z_cls: Option<(Tensor, Vec<f64>)>,
    pub structure: Option<Tensor>,
    pub group: Option<Vec<usize>>,
}

fn gates(sets: &[ConditionSet], f: impl Fn(&ConditionSet) -> bool) -> Vec<f64> {
    sets.iter().map(|s| if f(s) { 1.0 } else { 0.0 }).collect()
}

impl ConditionBatch {
    pub fn from_sets(sets: &[ConditionSet]) -> Result<Self> {
        let batch = sets.len();
        if batch == 0 {
            return Err(MupadError::Condition("empty batch".into()));
        }
        for s in sets {
            s.validate()?;
        }

        let image = match sets.iter().find_map(|s| s.image_tokens.as_ref()) {
            None => None,
            Some(first) => {
                let shape = first.shape().to_vec();
                let mut rows = Vec::with_capacity(batch);
                for s in sets {
                    match &s.image_tokens {
                        Some(t) if t.shape() == shape.as_slice() => rows.push(t.clone()),
                        Some(t) => {
                            return Err(MupadError::Condition(format!(
                                "image token shapes differ in batch: {:?} vs {:?}",
                                shape,
                                t.shape()
                            )))
                        }
                        None => rows.push(Tensor::zeros(&shape)),
                    }
                }
                Some((Tensor::stack(&rows)?, gates(sets, |s| s.is_active(Modality::Image))))
            }
        };

        let text = if sets.iter().any(|s| s.text_ids.is_some()) {
            let max_len = sets
                .iter()
                .filter_map(|s| s.text_ids.as_ref().map(Vec::len))
                .max()
                .unwrap_or(0);
            let mut ids = Vec::with_capacity(batch);
            let mut lens = Vec::with_capacity(batch);
            for s in sets {
                let mut row = s.text_ids.clone().unwrap_or_default();
                lens.push(row.len());
                row.resize(max_len, 0);
                ids.push(row);
            }
            Some((ids, lens, gates(sets, |s| s.is_active(Modality::Text))))
        } else {
            None
        };

        let rna = stack_vectors(sets, |s| s.rna.as_ref(), "rna")?
            .map(|t| (t, gates(sets, |s| s.is_active(Modality::Rna))));
        let z_cls = stack_vectors(sets, |s| s.z_cls.as_ref(), "z_cls")?
            .map(|t| (t, gates(sets, |s| s.z_cls.is_some())));

        let structure = if sets.iter().any(|s| s.structure.is_some()) {
            let items: Option<Vec<Tensor>> = sets.iter().map(|s| s.structure.clone()).collect();
            let items = items.ok_or_else(|| {
                MupadError::Condition("structural latent missing for part of the batch".into())
            })?;
            Some(Tensor::stack(&items)?)
        } else {
            None
        };

        let group = if sets.iter().any(|s| s.group.is_some()) {
            let g: Option<Vec<usize>> = sets.iter().map(|s| s.group).collect();
            Some(g.ok_or_else(|| {
                MupadError::Condition("group index missing for part of the batch".into())
            })?)
        } else {
            None
        };

        Ok(ConditionBatch {
            batch,
            image,
            text,
            rna,
            z_cls,
            structure,
            group,
        })
    }

    /// Repeats a single condition set `n` times.
    pub fn repeat(set: &ConditionSet, n: usize) -> Result<Self> {
        Self::from_sets(&vec![set.clone(); n])
    }

    /// Guidance null: every modality and `z_cls` removed, structure and group kept.
    pub fn null(&self) -> Self {
        ConditionBatch {
            batch: self.batch,
            image: None,
            text: None,
            rna: None,
            z_cls: None,
            structure: self.structure.clone(),
            group: self.group.clone(),
        }
    }

    pub fn any_modality(&self) -> bool {
        self.image.is_some() || self.text.is_some() || self.rna.is_some()
    }
}

fn stack_vectors<'a>(
    sets: &'a [ConditionSet],
    get: impl Fn(&'a ConditionSet) -> Option<&'a Vec<f64>>,
    what: &str,
) -> Result<Option<Tensor>> {
    let Some(len) = sets.iter().find_map(|s| get(s).map(Vec::len)) else {
        return Ok(None);
    };
    let mut data = Vec::with_capacity(sets.len() * len);
    for s in sets {
        match get(s) {
            Some(v) if v.len() == len => data.extend_from_slice(v),
            Some(v) => {
                return Err(MupadError::Condition(format!(
                    "{what} lengths differ in batch: {len} vs {}",
                    v.len()
                )))
            }
            None => data.extend(std::iter::repeat_n(0.0, len)),
        }
    }
    Ok(Some(Tensor::new(&[sets.len(), len], data)?))
}
