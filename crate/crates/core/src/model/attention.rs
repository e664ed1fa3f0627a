//! Multi-head attention and the two cross-modal fusion variants.

use mupad_tensor::{Tape, Tensor, Var};

use super::condition::Modality;
use crate::error::{MupadError, Result};

/// Additive key bias used to exclude padded or inactive keys.
pub const MASKED: f64 = -1e9;

/// Embedded condition tokens of one modality for a batch.
#[derive(Clone, Debug)]
pub struct CondStream {
    /// `[B, M, D_c]`.
    pub tokens: Var,
    /// Additive key bias `[B, M]` (0 or [`MASKED`]); `None` when every key is valid.
    pub key_bias: Option<Tensor>,
    /// Per-sample indicator I(m).
    pub gates: Vec<f64>,
}

impl CondStream {
    pub fn all_active(&self) -> bool {
        self.gates.iter().all(|&g| g == 1.0)
    }
}

/// Per-modality condition streams, indexed by [`Modality::index`].
#[derive(Clone, Debug, Default)]
pub struct EmbeddedConditions {
    pub streams: [Option<CondStream>; 3],
}

impl EmbeddedConditions {
    pub fn get(&self, m: Modality) -> Option<&CondStream> {
        self.streams[m.index()].as_ref()
    }

    /// Copy restricted to one modality set; used to compare partial sums.
    pub fn only(&self, keep: &[Modality]) -> Self {
        let mut out = EmbeddedConditions::default();
        for &m in keep {
            out.streams[m.index()] = self.streams[m.index()].clone();
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DcaWeights {
    pub wq: Var,
    pub wk: [Var; 3],
    pub wv: [Var; 3],
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SharedWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// `[3, D_c]` modality-type embeddings.
    pub type_emb: Var,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, &[b, l, heads, d / heads])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    Ok(tape.reshape(y, &[b * heads, l, d / heads])?)
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (l, dh) = (s[1], s[2]);
    let y = tape.reshape(x, &[batch, heads, l, dh])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    Ok(tape.reshape(y, &[batch, l, heads * dh])?)
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q: [B, N, D]`, `k, v: [B, M, D]`. Returns the merged output `[B, N, D]` and the
/// probability maps `[B*heads, N, M]`. With `injected`, the given maps replace the
/// softmax before value aggregation.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_bias: Option<&Tensor>,
    injected: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || qs[2] % heads != 0 {
        return Err(MupadError::Invalid(format!(
            "attention shapes q {qs:?}, k {ks:?} with {heads} heads"
        )));
    }
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    let vh = split_heads(tape, v, heads)?;
    let probs = match injected {
        Some(maps) => {
            if maps.shape() != [b * heads, n, m] {
                return Err(MupadError::Invalid(format!(
                    "injected map shape {:?}, expected {:?}",
                    maps.shape(),
                    [b * heads, n, m]
                )));
            }
            tape.constant(maps.clone())
        }
        None => {
            let qh = split_heads(tape, q, heads)?;
            let qh = tape.scale(qh, 1.0 / ((d / heads) as f64).sqrt())?;
            let kh = split_heads(tape, k, heads)?;
            let mut scores = tape.bmm(qh, kh, false, true)?;
            if let Some(bias) = key_bias {
                if bias.shape() != [b, m] {
                    return Err(MupadError::Invalid(format!(
                        "key bias shape {:?}, expected {:?}",
                        bias.shape(),
                        [b, m]
                    )));
                }
                let mut expanded = Vec::with_capacity(b * heads * m);
                for i in 0..b {
                    let row = &bias.data()[i * m..(i + 1) * m];
                    for _ in 0..heads {
                        expanded.extend_from_slice(row);
                    }
                }
                let bias = tape.constant(Tensor::new(&[b * heads, 1, m], expanded)?);
                scores = tape.add(scores, bias)?;
            }
            tape.softmax(scores)?
        }
    };
    let out = tape.bmm(probs, vh, false, false)?;
    let out = merge_heads(tape, out, b, heads)?;
    Ok((out, probs))
}

fn gate_var(tape: &mut Tape, gates: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::new(&[gates.len(), 1, 1], gates.to_vec())?))
}

fn zeros_like_queries(tape: &mut Tape, h: Var, wq: Var) -> Var {
    let s = tape.shape(h);
    let out_dim = tape.shape(wq)[1];
    let shape = [s[0], s[1], out_dim];
    tape.constant(Tensor::zeros(&shape))
}

/// Plain single-source cross-attention `Attention(h W^Q, c W^K, c W^V) W^O`.
pub fn cross_attention(
    tape: &mut Tape,
    h: Var,
    stream: &CondStream,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(stream.tokens, wk)?;
    let v = tape.matmul(stream.tokens, wv)?;
    let (a, _) = multi_head_attention(tape, q, k, v, heads, stream.key_bias.as_ref(), None)?;
    Ok(tape.matmul(a, wo)?)
}

/// Decoupled cross-attention: `sum_m I(m) * Attention(h W^Q, c_m W^K_m, c_m W^V_m)`,
/// followed by the output projection. Inactive modalities contribute exactly zero.
pub fn dca_forward(
    tape: &mut Tape,
    h: Var,
    conds: &EmbeddedConditions,
    w: &DcaWeights,
    heads: usize,
) -> Result<Var> {
    if conds.streams.iter().all(Option::is_none) {
        return Ok(zeros_like_queries(tape, h, w.wo));
    }
    let q = tape.matmul(h, w.wq)?;
    let mut sum: Option<Var> = None;
    for m in Modality::ALL {
        let Some(s) = conds.get(m) else { continue };
        let k = tape.matmul(s.tokens, w.wk[m.index()])?;
        let v = tape.matmul(s.tokens, w.wv[m.index()])?;
        let (mut a, _) = multi_head_attention(tape, q, k, v, heads, s.key_bias.as_ref(), None)?;
        if !s.all_active() {
            let g = gate_var(tape, &s.gates)?;
            a = tape.mul(a, g)?;
        }
        sum = Some(match sum {
            None => a,
            Some(acc) => tape.add(acc, a)?,
        });
    }
    let sum = sum.expect("at least one stream present");
    Ok(tape.matmul(sum, w.wo)?)
}

/// Shared cross-attention ablation over modalities in canonical order.
pub fn shared_attention_forward(
    tape: &mut Tape,
    h: Var,
    conds: &EmbeddedConditions,
    w: &SharedWeights,
    heads: usize,
) -> Result<Var> {
    shared_attention_forward_ordered(tape, h, conds, w, heads, &Modality::ALL)
}

/// Shared cross-attention with an explicit concatenation order.
pub fn shared_attention_forward_ordered(
    tape: &mut Tape,
    h: Var,
    conds: &EmbeddedConditions,
    w: &SharedWeights,
    heads: usize,
    order: &[Modality],
) -> Result<Var> {
    let present: Vec<(Modality, &CondStream)> = order
        .iter()
        .filter_map(|&m| conds.get(m).map(|s| (m, s)))
        .collect();
    if present.is_empty() {
        return Ok(zeros_like_queries(tape, h, w.wo));
    }
    let batch = tape.shape(h)[0];
    let mut parts = Vec::with_capacity(present.len());
    let mut bias_rows: Vec<Vec<f64>> = vec![Vec::new(); batch];
    let mut any_active = vec![0.0; batch];
    let mut needs_bias = false;
    for &(m, s) in &present {
        let emb = tape.gather_rows(w.type_emb, &[m.index()])?;
        parts.push(tape.add(s.tokens, emb)?);
        let len = tape.shape(s.tokens)[1];
        for (i, row) in bias_rows.iter_mut().enumerate() {
            let active = s.gates[i] == 1.0;
            if active {
                any_active[i] = 1.0;
            }
            for j in 0..len {
                let b = if !active {
                    MASKED
                } else {
                    s.key_bias.as_ref().map_or(0.0, |kb| kb.data()[i * len + j])
                };
                needs_bias |= b != 0.0;
                row.push(b);
            }
        }
    }
    let tokens = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    let total = bias_rows[0].len();
    let bias = if needs_bias {
        Some(Tensor::new(&[batch, total], bias_rows.concat())?)
    } else {
        None
    };
    let q = tape.matmul(h, w.wq)?;
    let k = tape.matmul(tokens, w.wk)?;
    let v = tape.matmul(tokens, w.wv)?;
    let (mut a, _) = multi_head_attention(tape, q, k, v, heads, bias.as_ref(), None)?;
    if any_active.iter().any(|&g| g != 1.0) {
        let g = gate_var(tape, &any_active)?;
        a = tape.mul(a, g)?;
    }
    Ok(tape.matmul(a, w.wo)?)
}
