//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and the parent handles it
//! needs for the vector-Jacobian product. Node order is execution order, so a
//! single reverse sweep visits each node exactly once in topological order.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, a_t: bool, b_t: bool },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu { x: Var, th: Vec<f64> },
    Silu(Var),
    Tanh(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed ops. One tape per forward pass and per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Per-output-axis strides into an input that broadcasts to `out`.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        for j in 0..inner {
            f(i + j, oa + j * ia, ob + j * ib);
        }
        i += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == out.as_slice() && is_suffix(b.shape(), &out) && !bd.is_empty() {
        let mut data = Vec::with_capacity(ad.len());
        for row in ad.chunks_exact(bd.len()) {
            data.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        data
    } else if b.shape() == out.as_slice() && is_suffix(a.shape(), &out) && !ad.is_empty() {
        let mut data = Vec::with_capacity(bd.len());
        for row in bd.chunks_exact(ad.len()) {
            data.extend(ad.iter().zip(row).map(|(&x, &y)| f(x, y)));
        }
        data
    } else {
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let mut data = vec![0.0; numel(&out)];
        for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
        data
    };
    Tensor::new(&out, data)
}

/// Sums `grad` (shaped like the broadcast output) down to `input` shape.
fn reduce_to(grad: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    if out == input {
        return grad.to_vec();
    }
    let n = numel(input);
    let mut acc = vec![0.0; n];
    if is_suffix(input, out) && n > 0 {
        for row in grad.chunks_exact(n) {
            acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        return acc;
    }
    let s = broadcast_strides(input, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |i, ia, _| acc[ia] += grad[i]);
    acc
}

/// Broadcast-multiplies `grad` by `other` and reduces onto `input` shape.
fn reduce_product(
    grad: &[f64],
    out: &[usize],
    other: &Tensor,
    input: &[usize],
) -> Vec<f64> {
    let od = other.data();
    if other.shape() == out {
        let prod: Vec<f64> = grad.iter().zip(od).map(|(g, o)| g * o).collect();
        return reduce_to(&prod, out, input);
    }
    let so = broadcast_strides(other.shape(), out);
    if input == out {
        let zero = vec![0; out.len()];
        let mut res = vec![0.0; grad.len()];
        for_each_broadcast(out, &so, &zero, |i, io, _| res[i] = grad[i] * od[io]);
        return res;
    }
    let si = broadcast_strides(input, out);
    let mut acc = vec![0.0; numel(input)];
    for_each_broadcast(out, &si, &so, |i, ii, io| acc[ii] += grad[i] * od[io]);
    acc
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let zero = vec![0; rank];
    for_each_broadcast(&out_shape, &strides, &zero, |i, src, _| out[i] = data[src]);
    (out_shape, out)
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.wo + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                x[(c * self.h + ii as usize) * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + ii as usize) * self.w + jj as usize] +=
                                src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, name)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Batched product `op(a)[B, m, k] @ op(b)[B, k, n]`, where `op` transposes the
    /// last two axes when the matching flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (m, k) = if a_t { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                a_t,
                &bd[i * k * n..(i + 1) * k * n],
                b_t,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm { a, b, a_t, b_t },
            rg,
            "bmm",
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "rank-0 input"))?;
        if d == 0 {
            return Err(TensorError::invalid("softmax", "empty last axis"));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        if d == 0 {
            return Err(TensorError::invalid("layer_norm", "empty last axis"));
        }
        let mut out = x.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, rstd }, rg, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let th: Vec<f64> = x
            .data()
            .iter()
            .map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
            .collect();
        let data = x.data().iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Gelu { x: a, th }, rg, "gelu")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    /// 2-D convolution (cross-correlation) of `x[B, C, H, W]` with `w[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", &sx, &sw));
        }
        let geom = self.conv_geom(&sx, &sw, stride, pad)?;
        let (b, o) = (sx[0], sw[0]);
        let ckk = geom.c * geom.kh * geom.kw;
        let hw = geom.ho * geom.wo;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; b * o * hw];
        let xin = self.value(x).data();
        let wd = self.value(w).data();
        let in_len = geom.c * geom.h * geom.w;
        for i in 0..b {
            geom.im2col(&xin[i * in_len..(i + 1) * in_len], &mut cols);
            gemm(o, ckk, hw, wd, false, &cols, false, 0.0, &mut out[i * o * hw..(i + 1) * o * hw]);
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(&[b, o, geom.ho, geom.wo], out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
            "conv2d",
        )
    }

    fn conv_geom(&self, sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
        let ho = conv_out(sx[2], sw[2], stride, pad);
        let wo = conv_out(sx[3], sw[3], stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(ConvGeom {
                c: sx[1],
                h: sx[2],
                w: sx[3],
                kh: sw[2],
                kw: sw[3],
                ho,
                wo,
                stride,
                pad,
            }),
            _ => Err(TensorError::shape("conv2d", sx, sw)),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, out)?, Op::Permute(a, perm.to_vec()), rg, "permute")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} of axis {axis} in {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(&out_shape, data)?, Op::Slice { x: a, axis, start }, rg, "slice")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::invalid("mean", "empty input"));
        }
        let out = Tensor::scalar(x.mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("gather_rows", "table must be rank 2"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid("gather_rows", format!("id {bad} >= {}", s[0])));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Mean squared error between two equally-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x @ w + b` for `x[..., in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::new(out_shape, g)?);
                }
                Op::Add(a, b) => {
                    for p in [a, b] {
                        if self.rg(*p) {
                            let r = reduce_to(&g, out_shape, self.shape(*p));
                            accumulate(&mut grads, *p, r);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, reduce_to(&g, out_shape, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        let mut r = reduce_to(&g, out_shape, self.shape(*b));
                        r.iter_mut().for_each(|v| *v = -*v);
                        accumulate(&mut grads, *b, r);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let r = reduce_product(&g, out_shape, self.value(*b), self.shape(*a));
                        accumulate(&mut grads, *a, r);
                    }
                    if self.rg(*b) {
                        let r = reduce_product(&g, out_shape, self.value(*a), self.shape(*b));
                        accumulate(&mut grads, *b, r);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let sb = self.shape(*b);
                    let (k, n) = (sb[0], sb[1]);
                    let m = g.len() / n.max(1);
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, self.value(*b).data(), true, 0.0, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Bmm { a, b, a_t, b_t } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let batch = sa[0];
                    let (m, k) = if *a_t { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                    let n = if *b_t { sb[1] } else { sb[2] };
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        let mut da = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bd[i * k * n..(i + 1) * k * n];
                            let dst = &mut da[i * m * k..(i + 1) * m * k];
                            if *a_t {
                                gemm(k, n, m, bi, *b_t, gi, true, 0.0, dst);
                            } else {
                                gemm(m, n, k, gi, false, bi, !*b_t, 0.0, dst);
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ad[i * m * k..(i + 1) * m * k];
                            let dst = &mut db[i * k * n..(i + 1) * k * n];
                            if *b_t {
                                gemm(n, m, k, gi, true, ai, *a_t, 0.0, dst);
                            } else {
                                gemm(k, m, n, ai, !*a_t, gi, false, 0.0, dst);
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let d = *out_shape.last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.data();
                    let d = *out_shape.last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((yr, gr), dr)) in
                        y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x: a, th } => {
                    let x = self.value(*a).data();
                    let dx = x
                        .iter()
                        .zip(th)
                        .zip(&g)
                        .map(|((&x, &th), &g)| {
                            let d = 0.5 * (1.0 + th)
                                + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * d
                        })
                        .collect();
                    accumulate(&mut grads, *a, dx);
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let dx = x
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, dx);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let dx = y.iter().zip(&g).map(|(&y, &g)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, dx);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (sx, sw) = (self.shape(*x), self.shape(*w));
                    let geom = self.conv_geom(sx, sw, *stride, *pad)?;
                    let (b, o) = (sx[0], sw[0]);
                    let ckk = geom.c * geom.kh * geom.kw;
                    let hw = geom.ho * geom.wo;
                    let in_len = geom.c * geom.h * geom.w;
                    let xd = self.value(*x).data();
                    let wd = self.value(*w).data();
                    let mut cols = vec![0.0; ckk * hw];
                    let mut dw = vec![0.0; o * ckk];
                    let mut dx = if self.rg(*x) { vec![0.0; b * in_len] } else { Vec::new() };
                    for i in 0..b {
                        let gi = &g[i * o * hw..(i + 1) * o * hw];
                        if self.rg(*w) {
                            geom.im2col(&xd[i * in_len..(i + 1) * in_len], &mut cols);
                            gemm(o, hw, ckk, gi, false, &cols, true, 1.0, &mut dw);
                        }
                        if self.rg(*x) {
                            gemm(ckk, o, hw, wd, true, gi, false, 0.0, &mut cols);
                            geom.col2im(&cols, &mut dx[i * in_len..(i + 1) * in_len]);
                        }
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, dx) = permute_data(&g, out_shape, &inv);
                    accumulate(&mut grads, *a, dx);
                }
                Op::Concat { parts, axis } => {
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis] * inner;
                        if self.rg(p) {
                            let mut dp = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let base = o * total + offset;
                                dp.extend_from_slice(&g[base..base + len]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let in_shape = self.shape(*x);
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = out_shape[*axis] * inner;
                    let mut dx = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Gather { table, ids } => {
                    let s = self.shape(*table);
                    let d = s[1];
                    let mut dt = vec![0.0; s[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(&contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let a = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax(a).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(s).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_last_dim_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(tape.softmax(a).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(a, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let y = tape.gelu(a).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn conv_of_delta_reproduces_kernel() {
        let mut img = Tensor::zeros(&[1, 1, 7, 7]);
        img.data_mut()[3 * 7 + 3] = 1.0;
        let k: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 7, 7]);
        // cross-correlation flips the kernel around the delta
        for di in 0..3 {
            for dj in 0..3 {
                let v = out.data()[(2 + di) * 7 + (2 + dj)];
                assert_eq!(v, k[(2 - di) * 3 + (2 - dj)]);
            }
        }
        assert_eq!(out.sum(), k.iter().sum::<f64>());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let r = tape.mul(x, x);
        if cfg!(debug_assertions) {
            assert!(matches!(r, Err(TensorError::NonFinite { .. })));
        }
    }
}
