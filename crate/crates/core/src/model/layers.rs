//! Block-level building pieces.

use std::sync::Arc;

use crate::autodiff::{Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::model::config::{NetConfig, NormPlacement};
use crate::tensor::{Scalar, Tensor};

/// `weight ⊙ v / sqrt(mean(v²) + eps)` for a single vector.
pub fn rmsnorm<T: Scalar>(v: &[T], weight: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() != weight.len() {
        return Err(Error::Shape(format!(
            "rmsnorm input {} vs weight {}",
            v.len(),
            weight.len()
        )));
    }
    if eps < T::zero() {
        return Err(Error::Config("rmsnorm eps must be non-negative".into()));
    }
    if v.iter().chain(weight).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rmsnorm input".into()));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let ms = v.iter().map(|&x| x * x).sum::<T>() / T::from_usize(v.len()).unwrap();
    let denom = (ms + eps).sqrt();
    if denom == T::zero() {
        // zero vector with eps = 0
        return Ok(vec![T::zero(); v.len()]);
    }
    Ok(v.iter().zip(weight).map(|(&x, &w)| w * x / denom).collect())
}

/// Applies rotary position encoding to `q` and `k`, both `[L, d_head]`.
pub fn rotary_apply<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, base: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.shape().len() != 2 || q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "rotary inputs {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (l, dh) = (q.shape()[0], q.shape()[1]);
    let table = RopeTable::<T>::new(l, dh, base)?;
    let rotate = |t: &Tensor<T>| {
        let mut out = t.clone();
        for (pos, row) in out.data_mut().chunks_mut(dh).enumerate() {
            table.rotate(pos, row, false);
        }
        out
    };
    Ok((rotate(q), rotate(k)))
}

/// Sequence-mixing weights of one block.
#[derive(Clone)]
pub enum MixWeights<T> {
    Attention { qkv: Var<T>, out: Var<T> },
    Mixer { w: Var<T> },
}

/// One block's parameters bound into a graph.
#[derive(Clone)]
pub struct BlockParams<T> {
    pub mix: MixWeights<T>,
    pub norm1: Var<T>,
    pub gate_up: Var<T>,
    pub down: Var<T>,
    pub norm2: Var<T>,
}

fn mix_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    h: &Var<T>,
    cfg: &NetConfig,
    p: &BlockParams<T>,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<Var<T>> {
    match &p.mix {
        MixWeights::Mixer { w } => g.seq_mix(h, w),
        MixWeights::Attention { qkv, out } => {
            let rope = rope.ok_or_else(|| Error::Config("attention block without rotary table".into()))?;
            let proj = g.linear(h, qkv)?;
            let a = g.attention(&proj, cfg.n_heads, rope)?;
            g.linear(&a, out)
        }
    }
}

fn mlp_sublayer<T: Scalar>(g: &mut Graph<T>, h: &Var<T>, p: &BlockParams<T>) -> Result<Var<T>> {
    let gu = g.linear(h, &p.gate_up)?;
    let act = g.swiglu(&gu)?;
    g.linear(&act, &p.down)
}

/// One residual block over `h[B, L, D]`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: &Var<T>,
    cfg: &NetConfig,
    p: &BlockParams<T>,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<Var<T>> {
    let s = h.shape();
    if s.len() != 3 || s[1] != cfg.seq_len || s[2] != cfg.hidden_d {
        return Err(Error::Shape(format!(
            "block input {s:?}, expected [B, {}, {}]",
            cfg.seq_len, cfg.hidden_d
        )));
    }
    let eps = T::from_f64_lossy(cfg.norm_eps);
    match cfg.norm {
        NormPlacement::Post => {
            let m = mix_sublayer(g, h, cfg, p, rope)?;
            let r = g.add(h, &m)?;
            let h = g.rmsnorm(&r, &p.norm1, eps)?;
            let f = mlp_sublayer(g, &h, p)?;
            let r = g.add(&h, &f)?;
            g.rmsnorm(&r, &p.norm2, eps)
        }
        NormPlacement::Pre => {
            let n = g.rmsnorm(h, &p.norm1, eps)?;
            let m = mix_sublayer(g, &n, cfg, p, rope)?;
            let h = g.add(h, &m)?;
            let n = g.rmsnorm(&h, &p.norm2, eps)?;
            let f = mlp_sublayer(g, &n, p)?;
            g.add(&h, &f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_examples() {
        assert_eq!(rmsnorm(&[0.0, 0.0], &[1.0, 1.0], 1e-6).unwrap(), vec![0.0, 0.0]);
        assert_eq!(rmsnorm(&[1.0, 1.0, 1.0, 1.0], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        // rms = sqrt(12.5)
        let r = 12.5f64.sqrt();
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] - 3.0 / r).abs() < 1e-12 && (out[1] - 4.0 / r).abs() < 1e-12);
        assert!((out[0] - 0.84853).abs() < 1e-5 && (out[1] - 1.13137).abs() < 1e-5);
        assert!(rmsnorm(&[f64::NAN, 1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn rotary_examples() {
        let q = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (qr, kr) = rotary_apply(&q, &q, 10000.0).unwrap();
        assert_eq!(&qr.data()[..2], &[1.0, 0.0]);
        assert!((qr.data()[2] - 1f64.cos()).abs() < 1e-12);
        assert!((qr.data()[3] - 1f64.sin()).abs() < 1e-12);
        assert!((qr.data()[2] - 0.54030).abs() < 1e-5 && (qr.data()[3] - 0.84147).abs() < 1e-5);
        assert_eq!(qr, kr);
        let odd = Tensor::<f64>::zeros(&[2, 3]);
        assert!(rotary_apply(&odd, &odd, 10000.0).is_err());
    }
}
