//! AdamW with parameter groups and linear warmup, plus weight EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate of the puzzle-id embedding table.
    pub embedding_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; applied to [`ParamGroup::Weight`] only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            embedding_lr: 1e-2,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1.0,
        }
    }
}

/// `base · min(1, step / warmup)`, with steps counted from 1.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * (step as f64 / warmup as f64).min(1.0)
    }
}

impl AdamConfig {
    pub fn group_lr(&self, group: ParamGroup, step: u64) -> f64 {
        let base = match group {
            ParamGroup::PuzzleEmbedding => self.embedding_lr,
            _ => self.lr,
        };
        warmup_lr(base, step, self.warmup_steps)
    }

    pub fn group_decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Weight => self.weight_decay,
            _ => 0.0,
        }
    }
}

/// Outcome of [`AdamW::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// First and second moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of applied updates (bias-correction exponent).
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update at training step `step` (1-based, drives warmup).
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        step: u64,
        cfg: &AdamConfig,
    ) -> Result<StepOutcome> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if grads[i].shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient shape for {}", p.name)));
            }
            let lr = cfg.group_lr(p.group, step);
            let shrink = 1.0 - lr * cfg.group_decay(p.group);
            let value = std::sync::Arc::make_mut(&mut p.value);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in value.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
                *w = T::from_f64_lossy(w.as_f64() * shrink - lr * update);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub shadow: ParamStore<T>,
    pub decay: f64,
}

impl<T: Scalar> Ema<T> {
    pub fn new(params: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
        }
        Ok(Ema {
            shadow: params.clone(),
            decay,
        })
    }

    /// `shadow ← decay · shadow + (1 − decay) · params`.
    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        if self.shadow.len() != params.len() {
            return Err(Error::Shape("ema shadow and parameters differ".into()));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            if s.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("ema shape for {}", p.name)));
            }
            let sv = std::sync::Arc::make_mut(&mut s.value);
            for (a, &b) in sv.data_mut().iter_mut().zip(p.value.data()) {
                *a = T::from_f64_lossy(d * a.as_f64() + (1.0 - d) * b.as_f64());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, group: ParamGroup) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", group, Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn warmup_schedule() {
        assert!((warmup_lr(1e-4, 1000, 2000) - 5e-5).abs() < 1e-18);
        assert_eq!(warmup_lr(1e-4, 5000, 2000), 1e-4);
        assert_eq!(warmup_lr(1e-4, 1, 0), 1e-4);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_steps: 0,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = scalar_store(2.0, ParamGroup::Weight);
        let mut opt = AdamW::new(&p);
        let g = [Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        opt.step(&mut p, &g, 1, &cfg).unwrap();
        // m = 0.1, v = 0.05; corrected both to 1
        let expect = 2.0 * (1.0 - 0.1 * 0.5) - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.by_index(0).value.data()[0] - expect).abs() < 1e-15);
        assert!((opt.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn decay_only_on_weights_and_embedding_lr() {
        let cfg = AdamConfig {
            lr: 0.1,
            embedding_lr: 0.5,
            warmup_steps: 0,
            weight_decay: 1.0,
            ..AdamConfig::default()
        };
        let zero = [Tensor::from_vec(&[1], vec![0.0]).unwrap()];
        for (group, expect) in [
            (ParamGroup::Weight, 0.9),
            (ParamGroup::Norm, 1.0),
            (ParamGroup::TokenEmbedding, 1.0),
            (ParamGroup::PuzzleEmbedding, 1.0),
        ] {
            let mut p = scalar_store(1.0, group);
            let mut opt = AdamW::new(&p);
            opt.step(&mut p, &zero, 1, &cfg).unwrap();
            assert!((p.by_index(0).value.data()[0] - expect).abs() < 1e-12, "{group:?}");
        }
        let g = [Tensor::from_vec(&[1], vec![3.0]).unwrap()];
        let mut p = scalar_store(0.0, ParamGroup::PuzzleEmbedding);
        AdamW::new(&p).step(&mut p, &g, 1, &cfg).unwrap();
        assert!((p.by_index(0).value.data()[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = scalar_store(1.0, ParamGroup::Weight);
        let mut opt = AdamW::new(&p);
        let g = [Tensor::from_vec(&[1], vec![f64::NAN]).unwrap()];
        let out = opt.step(&mut p, &g, 1, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p.by_index(0).value.data()[0], 1.0);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn ema_closed_form() {
        let mut ema = Ema::new(&scalar_store(0.0, ParamGroup::Weight), 0.999).unwrap();
        let p = scalar_store(1.0, ParamGroup::Weight);
        ema.update(&p).unwrap();
        assert!((ema.shadow.by_index(0).value.data()[0] - 0.001).abs() < 1e-15);
        let s0 = -3.0;
        let mut ema = Ema::new(&scalar_store(s0, ParamGroup::Weight), 0.97).unwrap();
        let p = scalar_store(2.5, ParamGroup::Weight);
        for k in 1..=200 {
            ema.update(&p).unwrap();
            let closed = 2.5 + (s0 - 2.5) * 0.97f64.powi(k);
            assert!((ema.shadow.by_index(0).value.data()[0] - closed).abs() < 1e-12);
        }
        let mut ema = Ema::new(&scalar_store(7.0, ParamGroup::Weight), 0.0).unwrap();
        ema.update(&p).unwrap();
        assert_eq!(ema.shadow.by_index(0).value.data()[0], 2.5);
        assert!(Ema::new(&p, 1.0).is_err());
    }
}
