//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records one node per operation whose inputs carry tape
//! edges. Inside [`Graph::no_grad`] nothing is recorded, so every value
//! produced there is a constant for the backward pass. [`Var::detach`]
//! cuts a value off the tape explicitly.
//!
//! Operations are coarse (linear map, RMSNorm, fused attention, ...) and
//! each has a hand-written adjoint.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::recursion::CallCounters;
use crate::tensor::{matmul, Scalar, Tensor};

pub type NodeId = usize;

/// A value flowing through the graph, optionally attached to a tape node.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    /// A value with no tape edges.
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            value: Arc::new(t),
            node: None,
        }
    }

    pub fn from_arc(value: Arc<Tensor<T>>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape edges.
    pub fn detach(&self) -> Self {
        Var {
            value: Arc::clone(&self.value),
            node: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node={:?})", self.value, self.node)
    }
}

/// Precomputed rotary angles for `[seq_len, d_head / 2]` pairs.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub seq_len: usize,
    pub d_head: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(seq_len: usize, d_head: usize, base: f64) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::Shape(format!("rotary head dim {d_head} is odd")));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Ok(RopeTable {
            seq_len,
            d_head,
            cos,
            sin,
        })
    }

    /// Rotates one head row `x[d_head]` at `pos`; `inverse` rotates by the negative angle.
    pub fn rotate(&self, pos: usize, x: &mut [T], inverse: bool) {
        let half = self.d_head / 2;
        let base = pos * half;
        for i in 0..half {
            let (c, mut s) = (self.cos[base + i], self.sin[base + i]);
            if inverse {
                s = -s;
            }
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

struct AttnSaved<T> {
    batch: usize,
    seq: usize,
    heads: usize,
    d_head: usize,
    // [B, H, L, dh] after rotation
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    // [B, H, L, L]
    probs: Vec<T>,
    rope: Arc<RopeTable<T>>,
}

enum Op<T> {
    Leaf,
    Sum(Vec<Option<NodeId>>),
    Scale(NodeId, T),
    Reshape(NodeId, Vec<usize>),
    Linear {
        x: Var<T>,
        w: Var<T>,
    },
    Embedding {
        table: NodeId,
        rows: usize,
        tokens: Vec<usize>,
    },
    AddBroadcast {
        x: Option<NodeId>,
        v: Option<NodeId>,
        seq: usize,
    },
    RmsNorm {
        x: Var<T>,
        w: Var<T>,
        inv_rms: Vec<T>,
    },
    SwiGlu(Var<T>),
    SeqMix {
        x: Var<T>,
        w: Var<T>,
    },
    Attention {
        qkv: NodeId,
        saved: Box<AttnSaved<T>>,
    },
    MeanSeq {
        x: NodeId,
        seq: usize,
    },
    StablemaxCe {
        logits: Var<T>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    BceLogits {
        q: Var<T>,
        col: usize,
        targets: Vec<T>,
    },
}

/// Tape of recorded operations for one forward/backward evaluation.
pub struct Graph<T> {
    nodes: Vec<Op<T>>,
    recording: bool,
    pub counters: CallCounters,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` when no tracked path reached it.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient for `v`, materialising zeros where nothing flowed.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: Option<NodeId>, g: Tensor<T>) {
    if let Some(id) = id {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn silu_parts<T: Scalar>(a: T) -> (T, T) {
    let sig = T::one() / (T::one() + (-a).exp());
    (a * sig, sig)
}

fn stablemax_s<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        u + T::one()
    } else {
        T::one() / (T::one() - u)
    }
}

fn stablemax_ds<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one()
    } else {
        let d = T::one() - u;
        T::one() / (d * d)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            counters: CallCounters::default(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with recording disabled; values produced inside carry no tape edges.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = prev;
        out
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, t: Arc<Tensor<T>>) -> Var<T> {
        self.nodes.push(Op::Leaf);
        Var {
            value: t,
            node: Some(self.nodes.len() - 1),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        self.nodes.push(op);
        Var {
            value: Arc::new(value),
            node: Some(self.nodes.len() - 1),
        }
    }

    fn tracks(&self, inputs: &[&Var<T>]) -> bool {
        self.recording && inputs.iter().any(|v| v.node.is_some())
    }

    /// Element-wise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("sum of zero inputs".into()))?;
        let mut out = first.value().clone();
        for p in &parts[1..] {
            if p.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "sum operands {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            out.add_assign(p.value());
        }
        if self.tracks(parts) {
            Ok(self.push(Op::Sum(parts.iter().map(|p| p.node).collect()), out))
        } else {
            Ok(Var::constant(out))
        }
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.sum(&[a, b])
    }

    pub fn scale(&mut self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value().map(|v| v * c);
        match a.node {
            Some(id) if self.recording => self.push(Op::Scale(id, c), out),
            _ => Var::constant(out),
        }
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value().clone().reshape(shape)?;
        match a.node {
            Some(id) if self.recording => Ok(self.push(Op::Reshape(id, a.shape().to_vec()), out)),
            _ => Ok(Var::constant(out)),
        }
    }

    /// `x[..., din] · w[din, dout]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let ws = w.shape();
        if ws.len() != 2 || x.value().last_dim() != ws[0] {
            return Err(Error::Shape(format!(
                "linear input {:?} with weight {:?}",
                x.shape(),
                ws
            )));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = x.value().rows();
        let data = matmul(x.value().data(), w.value().data(), rows, din, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::from_vec(&shape, data)?;
        if self.tracks(&[x, w]) {
            Ok(self.push(
                Op::Linear {
                    x: x.clone(),
                    w: w.clone(),
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Row gather `table[tokens[i]]`, shaped `prefix + [D]`.
    pub fn embedding(&mut self, table: &Var<T>, tokens: &[usize], prefix: &[usize]) -> Result<Var<T>> {
        let ts = table.shape();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if prefix.iter().product::<usize>() != tokens.len() {
            return Err(Error::Shape(format!("{} tokens for prefix {prefix:?}", tokens.len())));
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= rows {
                return Err(Error::Vocab(format!("token {t} outside table of {rows}")));
            }
            data.extend_from_slice(&table.value().data()[t * d..(t + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let out = Tensor::from_vec(&shape, data)?;
        match table.node {
            Some(id) if self.recording => Ok(self.push(
                Op::Embedding {
                    table: id,
                    rows,
                    tokens: tokens.to_vec(),
                },
                out,
            )),
            _ => Ok(Var::constant(out)),
        }
    }

    /// `x[b, l, :] + v[b, :]` for every position `l`.
    pub fn add_broadcast(&mut self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let (xs, vs) = (x.shape(), v.shape());
        if xs.len() != 3 || vs.len() != 2 || xs[0] != vs[0] || xs[2] != vs[1] {
            return Err(Error::Shape(format!("broadcast add {xs:?} + {vs:?}")));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let mut out = x.value().clone();
        let od = out.data_mut();
        let vd = v.value().data();
        for bi in 0..b {
            for li in 0..l {
                let row = &mut od[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &a) in row.iter_mut().zip(&vd[bi * d..(bi + 1) * d]) {
                    *o += a;
                }
            }
        }
        if self.tracks(&[x, v]) {
            Ok(self.push(
                Op::AddBroadcast {
                    x: x.node,
                    v: v.node,
                    seq: l,
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Row-wise `w ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: &Var<T>, w: &Var<T>, eps: T) -> Result<Var<T>> {
        let d = x.value().last_dim();
        if w.shape() != [d] {
            return Err(Error::Shape(format!("rmsnorm weight {:?} for width {d}", w.shape())));
        }
        let rows = x.value().rows();
        let xd = x.value().data();
        let wd = w.value().data();
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(wd) {
                *o = g * v * inv;
            }
            inv_rms.push(inv);
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        if self.tracks(&[x, w]) {
            Ok(self.push(
                Op::RmsNorm {
                    x: x.clone(),
                    w: w.clone(),
                    inv_rms,
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// `silu(a) ⊙ b` where `gu = [a | b]` along the last axis.
    pub fn swiglu(&mut self, gu: &Var<T>) -> Result<Var<T>> {
        let two_h = gu.value().last_dim();
        if two_h % 2 != 0 {
            return Err(Error::Shape(format!("swiglu width {two_h} is odd")));
        }
        let h = two_h / 2;
        let rows = gu.value().rows();
        let gd = gu.value().data();
        let mut out = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = &gd[r * two_h..(r + 1) * two_h];
            let (a, b) = row.split_at(h);
            out.extend(a.iter().zip(b).map(|(&a, &b)| silu_parts(a).0 * b));
        }
        let mut shape = gu.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let out = Tensor::from_vec(&shape, out)?;
        if self.tracks(&[gu]) {
            Ok(self.push(Op::SwiGlu(gu.clone()), out))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Token mixing: `out[b, i, :] = Σ_j w[i, j] x[b, j, :]`.
    pub fn seq_mix(&mut self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape();
        if xs.len() != 3 || w.shape() != [xs[1], xs[1]] {
            return Err(Error::Shape(format!("sequence mixer {:?} on input {xs:?}", w.shape())));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            T::gemm(
                l,
                l,
                d,
                T::one(),
                w.value().data(),
                l as isize,
                1,
                &x.value().data()[bi * l * d..],
                d as isize,
                1,
                T::zero(),
                &mut out[bi * l * d..],
                d as isize,
                1,
            );
        }
        let out = Tensor::from_vec(xs, out)?;
        if self.tracks(&[x, w]) {
            Ok(self.push(
                Op::SeqMix {
                    x: x.clone(),
                    w: w.clone(),
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Non-causal multi-head self-attention with rotary positions.
    ///
    /// `qkv` is `[B, L, 3D]` holding the projected queries, keys and values;
    /// the result is `[B, L, D]` before the output projection.
    pub fn attention(&mut self, qkv: &Var<T>, heads: usize, rope: &Arc<RopeTable<T>>) -> Result<Var<T>> {
        let s = qkv.shape();
        if s.len() != 3 || s[2] % 3 != 0 {
            return Err(Error::Shape(format!("attention input {s:?}")));
        }
        let (b, l, d3) = (s[0], s[1], s[2]);
        let d = d3 / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        if rope.d_head != dh || rope.seq_len < l {
            return Err(Error::Shape(format!(
                "rotary table [{}, {}] for [{l}, {dh}]",
                rope.seq_len, rope.d_head
            )));
        }
        let src = qkv.value().data();
        let per = b * heads * l * dh;
        let (mut q, mut k, mut v) = (vec![T::zero(); per], vec![T::zero(); per], vec![T::zero(); per]);
        for bi in 0..b {
            for li in 0..l {
                let row = &src[(bi * l + li) * d3..(bi * l + li + 1) * d3];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * l + li) * dh;
                    q[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                    k[dst..dst + dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
                    v[dst..dst + dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
                    rope.rotate(li, &mut q[dst..dst + dh], false);
                    rope.rotate(li, &mut k[dst..dst + dh], false);
                }
            }
        }
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); b * heads * l * l];
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            for h in 0..heads {
                let bh = bi * heads + h;
                let qo = bh * l * dh;
                let po = bh * l * l;
                // scores = q kᵀ * scale
                T::gemm(
                    l,
                    dh,
                    l,
                    scale,
                    &q[qo..],
                    dh as isize,
                    1,
                    &k[qo..],
                    1,
                    dh as isize,
                    T::zero(),
                    &mut probs[po..],
                    l as isize,
                    1,
                );
                for row in probs[po..po + l * l].chunks_mut(l) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for p in row.iter_mut() {
                        *p = (*p - m).exp();
                        z += *p;
                    }
                    for p in row.iter_mut() {
                        *p = *p / z;
                    }
                }
                T::gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    &probs[po..],
                    l as isize,
                    1,
                    &v[qo..],
                    dh as isize,
                    1,
                    T::zero(),
                    &mut out[bi * l * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }
        let out = Tensor::from_vec(&[b, l, d], out)?;
        match qkv.node {
            Some(id) if self.recording => Ok(self.push(
                Op::Attention {
                    qkv: id,
                    saved: Box::new(AttnSaved {
                        batch: b,
                        seq: l,
                        heads,
                        d_head: dh,
                        q,
                        k,
                        v,
                        probs,
                        rope: Arc::clone(rope),
                    }),
                },
                out,
            )),
            _ => Ok(Var::constant(out)),
        }
    }

    /// Mean over the sequence axis: `[B, L, D] -> [B, D]`.
    pub fn mean_seq(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Shape(format!("mean over sequence of {s:?}")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let inv = T::one() / T::from_usize(l).unwrap();
        let xd = x.value().data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for li in 0..l {
                for (acc, &v) in o.iter_mut().zip(&xd[(bi * l + li) * d..(bi * l + li + 1) * d]) {
                    *acc += v;
                }
            }
            for acc in o.iter_mut() {
                *acc *= inv;
            }
        }
        let out = Tensor::from_vec(&[b, d], out)?;
        match x.node {
            Some(id) if self.recording => Ok(self.push(Op::MeanSeq { x: id, seq: l }, out)),
            _ => Ok(Var::constant(out)),
        }
    }

    /// Mean stablemax cross-entropy over unmasked rows of `logits[..., V]`.
    ///
    /// `mask[i] == true` keeps row `i`. Errors when every row is masked.
    pub fn stablemax_ce(&mut self, logits: &Var<T>, targets: &[usize], mask: Option<&[bool]>) -> Result<Var<T>> {
        let v = logits.value().last_dim();
        let rows = logits.value().rows();
        if targets.len() != rows || mask.is_some_and(|m| m.len() != rows) {
            return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let mask: Vec<bool> = mask.map_or_else(|| vec![true; rows], |m| m.to_vec());
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("every position is masked".into()));
        }
        let ld = logits.value().data();
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Vocab(format!("target {t} outside vocab {v}")));
            }
            let row = &ld[r * v..(r + 1) * v];
            let z: T = row.iter().map(|&u| stablemax_s(u)).sum();
            total += z.ln() - stablemax_s(row[t]).ln();
        }
        let loss = total / T::from_usize(count).unwrap();
        let out = Tensor::scalar(loss);
        if self.tracks(&[logits]) {
            Ok(self.push(
                Op::StablemaxCe {
                    logits: logits.clone(),
                    targets: targets.to_vec(),
                    mask,
                    count,
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Mean sigmoid binary cross-entropy of column `col` of `q[B, C]` against `targets[B]`.
    pub fn bce_logits(&mut self, q: &Var<T>, col: usize, targets: &[T]) -> Result<Var<T>> {
        let s = q.shape();
        if s.len() != 2 || col >= s[1] || targets.len() != s[0] || s[0] == 0 {
            return Err(Error::Shape(format!(
                "bce column {col} of {s:?} with {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        let qd = q.value().data();
        let mut total = T::zero();
        for (bi, &t) in targets.iter().enumerate() {
            let x = qd[bi * c + col];
            total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let out = Tensor::scalar(total / T::from_usize(s[0]).unwrap());
        if self.tracks(&[q]) {
            Ok(self.push(
                Op::BceLogits {
                    q: q.clone(),
                    col,
                    targets: targets.to_vec(),
                },
                out,
            ))
        } else {
            Ok(Var::constant(out))
        }
    }

    /// Back-propagates from a scalar and returns gradients for all leaves.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", loss.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=root).rev() {
            if matches!(self.nodes[id], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: NodeId, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[id] {
            Op::Leaf => {}
            Op::Sum(parts) => {
                let tracked: Vec<NodeId> = parts.iter().flatten().copied().collect();
                if let Some((&last, rest)) = tracked.split_last() {
                    for &p in rest {
                        accumulate(grads, Some(p), g.clone());
                    }
                    accumulate(grads, Some(last), g);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, Some(*a), g.map(|v| v * c));
            }
            Op::Reshape(a, shape) => {
                accumulate(grads, Some(*a), g.reshape(shape)?);
            }
            Op::Linear { x, w } => {
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let rows = x.value().rows();
                if x.node.is_some() {
                    // dx = g · wᵀ
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g.data(),
                        dout as isize,
                        1,
                        w.value().data(),
                        1,
                        dout as isize,
                        T::zero(),
                        &mut dx,
                        din as isize,
                        1,
                    );
                    accumulate(grads, x.node, Tensor::from_vec(x.shape(), dx)?);
                }
                if w.node.is_some() {
                    // dw = xᵀ · g
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(
                        din,
                        rows,
                        dout,
                        T::one(),
                        x.value().data(),
                        1,
                        din as isize,
                        g.data(),
                        dout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        dout as isize,
                        1,
                    );
                    accumulate(grads, w.node, Tensor::from_vec(w.shape(), dw)?);
                }
            }
            Op::Embedding { table, rows, tokens } => {
                let d = g.last_dim();
                let mut dt = vec![T::zero(); rows * d];
                for (i, &t) in tokens.iter().enumerate() {
                    for (acc, &v) in dt[t * d..(t + 1) * d].iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *acc += v;
                    }
                }
                accumulate(grads, Some(*table), Tensor::from_vec(&[*rows, d], dt)?);
            }
            Op::AddBroadcast { x, v, seq } => {
                if v.is_some() {
                    let s = g.shape();
                    let (b, d) = (s[0], s[2]);
                    let mut dv = vec![T::zero(); b * d];
                    for bi in 0..b {
                        for li in 0..*seq {
                            let row = &g.data()[(bi * seq + li) * d..(bi * seq + li + 1) * d];
                            for (acc, &val) in dv[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                                *acc += val;
                            }
                        }
                    }
                    accumulate(grads, *v, Tensor::from_vec(&[b, d], dv)?);
                }
                accumulate(grads, *x, g);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let d = x.value().last_dim();
                let xd = x.value().data();
                let wd = w.value().data();
                let gd = g.data();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    // xhat = x * inv; dxhat = g * w
                    let mut dot = T::zero();
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dw[j] += gr[j] * xhat;
                        dot += gr[j] * wd[j] * xhat;
                    }
                    let mean = dot * inv_d;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dx[r * d + j] = inv * (gr[j] * wd[j] - xhat * mean);
                    }
                }
                if x.node.is_some() {
                    accumulate(grads, x.node, Tensor::from_vec(x.shape(), dx)?);
                }
                if w.node.is_some() {
                    accumulate(grads, w.node, Tensor::from_vec(w.shape(), dw)?);
                }
            }
            Op::SwiGlu(gu) => {
                let two_h = gu.value().last_dim();
                let h = two_h / 2;
                let gd = gu.value().data();
                let mut dgu = vec![T::zero(); gd.len()];
                for (r, go) in g.data().chunks(h).enumerate() {
                    let row = &gd[r * two_h..(r + 1) * two_h];
                    let drow = &mut dgu[r * two_h..(r + 1) * two_h];
                    for j in 0..h {
                        let (a, b) = (row[j], row[h + j]);
                        let (silu, sig) = silu_parts(a);
                        let dsilu = sig * (T::one() + a * (T::one() - sig));
                        drow[j] = go[j] * b * dsilu;
                        drow[h + j] = go[j] * silu;
                    }
                }
                accumulate(grads, gu.node, Tensor::from_vec(gu.shape(), dgu)?);
            }
            Op::SeqMix { x, w } => {
                let s = x.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                if x.node.is_some() {
                    let mut dx = vec![T::zero(); b * l * d];
                    for bi in 0..b {
                        // dx_b = wᵀ · g_b
                        T::gemm(
                            l,
                            l,
                            d,
                            T::one(),
                            w.value().data(),
                            1,
                            l as isize,
                            &g.data()[bi * l * d..],
                            d as isize,
                            1,
                            T::zero(),
                            &mut dx[bi * l * d..],
                            d as isize,
                            1,
                        );
                    }
                    accumulate(grads, x.node, Tensor::from_vec(s, dx)?);
                }
                if w.node.is_some() {
                    let mut dw = vec![T::zero(); l * l];
                    for bi in 0..b {
                        // dw += g_b · x_bᵀ
                        T::gemm(
                            l,
                            d,
                            l,
                            T::one(),
                            &g.data()[bi * l * d..],
                            d as isize,
                            1,
                            &x.value().data()[bi * l * d..],
                            1,
                            d as isize,
                            T::one(),
                            &mut dw,
                            l as isize,
                            1,
                        );
                    }
                    accumulate(grads, w.node, Tensor::from_vec(&[l, l], dw)?);
                }
            }
            Op::Attention { qkv, saved } => {
                let dqkv = attention_backward(saved, &g);
                accumulate(grads, Some(*qkv), dqkv);
            }
            Op::MeanSeq { x, seq } => {
                let s = g.shape();
                let (b, d) = (s[0], s[1]);
                let inv = T::one() / T::from_usize(*seq).unwrap();
                let mut dx = vec![T::zero(); b * seq * d];
                for bi in 0..b {
                    let gr = &g.data()[bi * d..(bi + 1) * d];
                    for li in 0..*seq {
                        for (o, &v) in dx[(bi * seq + li) * d..(bi * seq + li + 1) * d].iter_mut().zip(gr) {
                            *o = v * inv;
                        }
                    }
                }
                accumulate(grads, Some(*x), Tensor::from_vec(&[b, *seq, d], dx)?);
            }
            Op::StablemaxCe {
                logits,
                targets,
                mask,
                count,
            } => {
                let v = logits.value().last_dim();
                let ld = logits.value().data();
                let scale = g.data()[0] / T::from_usize(*count).unwrap();
                let mut dl = vec![T::zero(); ld.len()];
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    let row = &ld[r * v..(r + 1) * v];
                    let z: T = row.iter().map(|&u| stablemax_s(u)).sum();
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        drow[j] = scale * stablemax_ds(row[j]) / z;
                    }
                    let t = targets[r];
                    drow[t] -= scale * stablemax_ds(row[t]) / stablemax_s(row[t]);
                }
                accumulate(grads, logits.node, Tensor::from_vec(logits.shape(), dl)?);
            }
            Op::BceLogits { q, col, targets } => {
                let s = q.shape();
                let (b, c) = (s[0], s[1]);
                let scale = g.data()[0] / T::from_usize(b).unwrap();
                let mut dq = vec![T::zero(); b * c];
                for (bi, &t) in targets.iter().enumerate() {
                    let x = q.value().data()[bi * c + col];
                    let sig = T::one() / (T::one() + (-x).exp());
                    dq[bi * c + col] = scale * (sig - t);
                }
                accumulate(grads, q.node, Tensor::from_vec(s, dq)?);
            }
        }
        Ok(())
    }
}

fn attention_backward<T: Scalar>(s: &AttnSaved<T>, g: &Tensor<T>) -> Tensor<T> {
    let (b, l, heads, dh) = (s.batch, s.seq, s.heads, s.d_head);
    let d = heads * dh;
    let d3 = 3 * d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let gd = g.data();
    let mut dqkv = vec![T::zero(); b * l * d3];
    let mut dp = vec![T::zero(); l * l];
    let mut dq = vec![T::zero(); l * dh];
    let mut dk = vec![T::zero(); l * dh];
    for bi in 0..b {
        for h in 0..heads {
            let bh = bi * heads + h;
            let qo = bh * l * dh;
            let po = bh * l * l;
            let probs = &s.probs[po..po + l * l];
            let go = &gd[bi * l * d + h * dh..];
            // dv = pᵀ · g, written straight into the value slot of dqkv
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                probs,
                1,
                l as isize,
                go,
                d as isize,
                1,
                T::zero(),
                &mut dqkv[bi * l * d3 + 2 * d + h * dh..],
                d3 as isize,
                1,
            );
            // dp = g · vᵀ
            T::gemm(
                l,
                dh,
                l,
                T::one(),
                go,
                d as isize,
                1,
                &s.v[qo..],
                1,
                dh as isize,
                T::zero(),
                &mut dp,
                l as isize,
                1,
            );
            for (prow, dprow) in probs.chunks(l).zip(dp.chunks_mut(l)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&p, &q)| p * q).sum();
                for (x, &p) in dprow.iter_mut().zip(prow) {
                    *x = p * (*x - dot) * scale;
                }
            }
            // dq = ds · k ; dk = dsᵀ · q
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                l as isize,
                1,
                &s.k[qo..],
                dh as isize,
                1,
                T::zero(),
                &mut dq,
                dh as isize,
                1,
            );
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                1,
                l as isize,
                &s.q[qo..],
                dh as isize,
                1,
                T::zero(),
                &mut dk,
                dh as isize,
                1,
            );
            for li in 0..l {
                let qrow = &mut dq[li * dh..(li + 1) * dh];
                s.rope.rotate(li, qrow, true);
                let krow = &mut dk[li * dh..(li + 1) * dh];
                s.rope.rotate(li, krow, true);
                let base = (bi * l + li) * d3;
                dqkv[base + h * dh..base + (h + 1) * dh].copy_from_slice(qrow);
                dqkv[base + d + h * dh..base + d + (h + 1) * dh].copy_from_slice(krow);
            }
        }
    }
    Tensor::from_vec(&[b, l, d3], dqkv).expect("attention gradient shape")
}
