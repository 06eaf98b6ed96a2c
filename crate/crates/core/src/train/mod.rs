//! Deep-supervision training with learned halting.

pub mod losses;
pub mod optim;
pub mod pool;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{decode, Bound, Model};
use crate::recursion::{self, check_memory, LatentState, RecursionSchedule, StepOutput, Variant};
use crate::tensor::Scalar;

pub use losses::{
    halting_decision, hrm_act_losses, sample_exact, sigmoid, stablemax, stablemax_cross_entropy, trm_halt_loss,
};
pub use optim::{warmup_lr, AdamConfig, AdamW, Ema, StepOutcome};
pub use pool::{Batch, SamplePool, SampleStream, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub embedding_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Let samples leave the pool early on a positive halting signal.
    pub halting: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Refuse schedules whose recorded tape is estimated above this size.
    pub memory_budget_bytes: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 768,
            lr: 1e-4,
            embedding_lr: 1e-2,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1.0,
            ema_decay: 0.999,
            max_steps: 1000,
            seed: 0,
            halting: true,
            checkpoint_every: 0,
            memory_budget_bytes: 8 << 30,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            embedding_lr: self.embedding_lr,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.lr >= 0.0 && self.embedding_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rates and weight decay must be non-negative".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_answer: f64,
    pub loss_halt: f64,
    /// Fraction of the batch whose prediction at this step is exactly right.
    pub train_exact_match: f64,
    /// Mean supervision steps of samples that left the pool at this step.
    pub mean_sup_steps: Option<f64>,
    pub samples_finished: usize,
    pub net_calls: u64,
    pub net_calls_tracked: u64,
    pub forward_passes: u64,
    /// The update was skipped because a gradient was not finite.
    pub skipped: bool,
    pub wall_ms: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub ema: Ema<T>,
    pub opt: AdamW<T>,
    pub pool: SamplePool<T>,
    pub schedule: RecursionSchedule,
    pub cfg: TrainConfig,
    pub step: u64,
}

/// Errors unless the data fits the model's sequence length, vocabulary and puzzle table.
pub fn check_compatible<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let c = &model.config;
    if data.seq_len != c.seq_len {
        return Err(Error::Vocab(format!(
            "dataset sequence length {} vs model {}",
            data.seq_len, c.seq_len
        )));
    }
    if data.vocab_size > c.vocab_size {
        return Err(Error::Vocab(format!(
            "dataset vocab {} exceeds model vocab {}",
            data.vocab_size, c.vocab_size
        )));
    }
    if c.puzzle_ids > 1 && data.num_puzzle_ids > c.puzzle_ids {
        return Err(Error::Vocab(format!(
            "dataset uses {} puzzle ids, model table has {}",
            data.num_puzzle_ids, c.puzzle_ids
        )));
    }
    Ok(())
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, schedule: RecursionSchedule, cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        if model.variant != schedule.variant {
            return Err(Error::Config(format!(
                "model built for {} but schedule is {}",
                model.variant.as_str(),
                schedule.variant.as_str()
            )));
        }
        check_compatible(&model, data)?;
        check_memory(
            &model.config,
            &schedule,
            cfg.batch_size,
            T::DTYPE.size(),
            cfg.memory_budget_bytes,
        )?;
        let pool = SamplePool::new(data.len(), cfg.batch_size, cfg.seed, &model, &schedule)?;
        Ok(Trainer {
            ema: Ema::new(&model.params, cfg.ema_decay)?,
            opt: AdamW::new(&model.params),
            pool,
            model,
            schedule,
            cfg,
            step: 0,
        })
    }

    /// The model with its parameters replaced by the EMA shadow.
    pub fn ema_model(&self) -> Model<T> {
        Model {
            params: self.ema.shadow.clone(),
            ..self.model.clone()
        }
    }

    /// One optimization step over the pool.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let started = Instant::now();
        let batch = self.pool.batch(data);
        let b = self.pool.slots.len();
        let variant = self.schedule.variant;

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true)?;
        let x = bound.embed_input(&mut g, &batch.tokens, &batch.puzzle_ids)?;
        let last: Vec<bool> = self
            .pool
            .slots
            .iter()
            .map(|s| s.steps + 1 >= self.schedule.n_sup)
            .collect();
        let parts = supervision_loss(&mut g, &bound, &x, &self.pool.state, &batch, &self.schedule, &last)?;
        let LossParts {
            total,
            answer: loss_answer,
            halt: loss_halt,
            out,
            exact,
            q,
        } = parts;
        let (la, lh) = (
            loss_answer.value().data()[0].as_f64(),
            loss_halt.value().data()[0].as_f64(),
        );
        if !(la.is_finite() && lh.is_finite()) {
            return Err(Error::Diverged {
                step: self.step + 1,
                reason: format!("loss not finite (answer {la}, halt {lh})"),
            });
        }
        let grads = g.backward(&total)?;
        let param_grads = bound.param_grads(&grads);
        let counters = g.counters;
        let next_state = out.state;
        drop((grads, bound, x, out.logits, out.halt, loss_answer, loss_halt, total));
        drop(g);

        self.step += 1;
        let adam = self.cfg.adam();
        let outcome = self.opt.step(&mut self.model.params, &param_grads, self.step, &adam)?;
        if outcome == StepOutcome::Applied {
            self.ema.update(&self.model.params)?;
        }

        let halted: Vec<bool> = (0..b)
            .map(|i| {
                let out_of_steps = self.pool.slots[i].steps + 1 >= self.schedule.n_sup;
                out_of_steps || (self.cfg.halting && halting_decision(variant, &q[i]))
            })
            .collect();
        let finished = self.pool.advance(&halted, next_state, &self.model);
        let mean_sup_steps =
            (!finished.is_empty()).then(|| finished.iter().sum::<usize>() as f64 / finished.len() as f64);

        Ok(StepMetrics {
            step: self.step,
            lr: warmup_lr(self.cfg.lr, self.step, self.cfg.warmup_steps),
            loss_answer: la,
            loss_halt: lh,
            train_exact_match: exact.iter().filter(|&&e| e).count() as f64 / b as f64,
            mean_sup_steps,
            samples_finished: finished.len(),
            net_calls: counters.net_calls_total,
            net_calls_tracked: counters.net_calls_tracked,
            forward_passes: counters.forward_passes,
            skipped: outcome == StepOutcome::SkippedNonFinite,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Loss of one supervision step and what the caller needs besides it.
pub struct LossParts<T> {
    pub total: Var<T>,
    pub answer: Var<T>,
    pub halt: Var<T>,
    pub out: StepOutput<T>,
    /// Per-sample exact match of the decoded answer.
    pub exact: Vec<bool>,
    /// Per-sample halting logits.
    pub q: Vec<Vec<f64>>,
}

/// Answer cross-entropy plus the halting loss for one supervision step.
/// `last[i]` marks samples on their final supervision step.
pub fn supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    batch: &Batch,
    schedule: &RecursionSchedule,
    last: &[bool],
) -> Result<LossParts<T>> {
    let b = batch.puzzle_ids.len();
    if b == 0 || batch.targets.len() % b != 0 || last.len() != b {
        return Err(Error::Shape(format!("{} flags for a batch of {b}", last.len())));
    }
    let l = batch.targets.len() / b;
    let out = recursion::forward(g, bound, x, state, schedule)?;
    let answer = g.stablemax_ce(&out.logits, &batch.targets, Some(&batch.mask))?;
    let preds = decode(out.logits.value());
    let exact: Vec<bool> = (0..b)
        .map(|i| {
            let s = i * l..(i + 1) * l;
            sample_exact(&preds[s.clone()], &batch.targets[s.clone()], Some(&batch.mask[s]))
        })
        .collect();
    let exact_t: Vec<T> = exact.iter().map(|&e| if e { T::one() } else { T::zero() }).collect();
    let q_cols = out.halt.shape()[1];
    let q: Vec<Vec<f64>> = out
        .halt
        .value()
        .data()
        .chunks(q_cols)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect();
    let halt = if schedule.variant == Variant::Hrm {
        let next = g.no_grad(|g| recursion::forward(g, bound, x, &out.state, schedule))?;
        let nq = next.halt.value().data();
        let cont: Vec<T> = (0..b)
            .map(|i| {
                let t = losses::continue_target([nq[2 * i].as_f64(), nq[2 * i + 1].as_f64()], last[i]);
                T::from_f64_lossy(t)
            })
            .collect();
        let halt = g.bce_logits(&out.halt, 0, &exact_t)?;
        let cont = g.bce_logits(&out.halt, 1, &cont)?;
        let both = g.add(&halt, &cont)?;
        g.scale(&both, T::from_f64_lossy(0.5))
    } else {
        g.bce_logits(&out.halt, 0, &exact_t)?
    };
    let total = g.add(&answer, &halt)?;
    Ok(LossParts {
        total,
        answer,
        halt,
        out,
        exact,
        q,
    })
}

/// Runs steps until `cfg.max_steps`, handing each step's metrics to `on_step`.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &Dataset,
    mut on_step: impl FnMut(&Trainer<T>, &StepMetrics) -> Result<()>,
) -> Result<()> {
    while trainer.step < trainer.cfg.max_steps {
        let m = trainer.train_step(data)?;
        on_step(trainer, &m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sudoku::{sudoku_splits, SudokuGenConfig};
    use crate::model::{MixerKind, NetConfig};

    fn setup(variant: Variant, n_sup: usize, halting: bool) -> (Trainer<f32>, Dataset) {
        let (train, _) = sudoku_splits(&SudokuGenConfig::new(4, 12, 1), 12, 1).unwrap();
        let cfg = NetConfig {
            hidden_d: 16,
            n_layers: 1,
            vocab_size: 6,
            seq_len: 16,
            ffn_multiple: 8,
            variant: MixerKind::Mixer,
            ..NetConfig::default()
        };
        let model = Model::new(cfg, variant, 0).unwrap();
        let sched = RecursionSchedule::new(variant, 2, 2, n_sup);
        let tc = TrainConfig {
            batch_size: 4,
            warmup_steps: 0,
            lr: 1e-3,
            halting,
            max_steps: 5,
            ..TrainConfig::default()
        };
        (Trainer::new(model, sched, tc, &train).unwrap(), train)
    }

    #[test]
    fn forward_passes_per_step() {
        let (mut t, data) = setup(Variant::Trm, 16, true);
        let m = t.train_step(&data).unwrap();
        assert_eq!((m.forward_passes, m.net_calls_tracked), (1, 3));
        let (mut t, data) = setup(Variant::Hrm, 16, true);
        let m = t.train_step(&data).unwrap();
        assert_eq!((m.forward_passes, m.net_calls_tracked), (2, 2));
        assert_eq!(m.net_calls, 12);
    }

    #[test]
    fn single_supervision_refreshes_every_slot() {
        let (mut t, data) = setup(Variant::Trm, 1, false);
        for _ in 0..3 {
            let m = t.train_step(&data).unwrap();
            assert_eq!(m.samples_finished, 4);
            assert_eq!(m.mean_sup_steps, Some(1.0));
        }
    }

    #[test]
    fn without_halting_samples_use_all_steps() {
        let (mut t, data) = setup(Variant::Trm, 16, false);
        for s in 1..=32 {
            let m = t.train_step(&data).unwrap();
            if s % 16 == 0 {
                assert_eq!((m.samples_finished, m.mean_sup_steps), (4, Some(16.0)));
            } else {
                assert_eq!(m.samples_finished, 0);
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let (mut t, data) = setup(Variant::Trm, 4, true);
            let mut ms = Vec::new();
            train_loop(&mut t, &data, |_, m| {
                let mut m = m.clone();
                m.wall_ms = 0.0;
                ms.push(m);
                Ok(())
            })
            .unwrap();
            (ms, t.model.params.digest(), t.ema.shadow.digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (t, mut data) = setup(Variant::Trm, 4, true);
        data.seq_len = 81;
        assert!(matches!(
            Trainer::new(t.model.clone(), t.schedule, t.cfg.clone(), &data),
            Err(Error::Vocab(_))
        ));
    }
}
