//! Persistent batch of samples under deep supervision.
//!
//! Each slot keeps its sample and carried state across optimization steps
//! until it halts or runs out of supervision steps, then takes the next
//! sample of a seeded, epoch-shuffled stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{InitState, Model};
use crate::recursion::{LatentState, RecursionSchedule};
use crate::tensor::Scalar;

/// Endless stream of record indices, reshuffled every epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStream {
    pub seed: u64,
    pub len: usize,
    pub epoch: u64,
    pub pos: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl SampleStream {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        Self::resume(len, seed, 0, 0)
    }

    pub fn resume(len: usize, seed: u64, epoch: u64, pos: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot stream an empty dataset".into()));
        }
        let mut s = SampleStream {
            seed,
            len,
            epoch,
            pos,
            order: Vec::new(),
        };
        s.order = s.epoch_order();
        Ok(s)
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.len {
            self.epoch += 1;
            self.pos = 0;
            self.order = self.epoch_order();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub record: usize,
    /// Supervision steps already spent on this sample.
    pub steps: usize,
}

/// Inputs of one optimization step, flattened over the batch.
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub puzzle_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SamplePool<T> {
    pub slots: Vec<Slot>,
    /// Carried state, batched as `[B, L, D]` per feature.
    pub state: LatentState<T>,
    pub stream: SampleStream,
}

impl<T: Scalar> SamplePool<T> {
    pub fn new(
        records: usize,
        batch: usize,
        seed: u64,
        model: &Model<T>,
        schedule: &RecursionSchedule,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut stream = SampleStream::new(records, seed)?;
        let slots = (0..batch)
            .map(|_| Slot {
                record: stream.next_index(),
                steps: 0,
            })
            .collect();
        Ok(SamplePool {
            slots,
            state: LatentState::initial(model, schedule, batch),
            stream,
        })
    }

    pub fn batch(&self, data: &Dataset) -> Batch {
        let l = data.seq_len;
        let mut b = Batch {
            tokens: Vec::with_capacity(self.slots.len() * l),
            targets: Vec::with_capacity(self.slots.len() * l),
            puzzle_ids: Vec::with_capacity(self.slots.len()),
            mask: Vec::with_capacity(self.slots.len() * l),
        };
        for s in &self.slots {
            let r = &data.records[s.record];
            b.tokens.extend_from_slice(&r.input);
            b.targets.extend_from_slice(&r.target);
            b.puzzle_ids.push(r.puzzle_id);
            b.mask.extend(r.mask());
        }
        b
    }

    /// Counts one more supervision step for every slot, adopts `next` as the
    /// carried state and refills the slots flagged in `halted`.
    /// Returns the supervision steps spent by each finished sample.
    pub fn advance(&mut self, halted: &[bool], next: LatentState<T>, model: &Model<T>) -> Vec<usize> {
        self.state = next;
        let (l, d) = (model.config.seq_len, model.config.hidden_d);
        let row = |which| {
            let v = model.init_state(which, 1);
            v.into_vec()
        };
        let (y0, z0) = (row(InitState::Y), row(InitState::Z));
        let mut finished = Vec::new();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            slot.steps += 1;
            if !halted[i] {
                continue;
            }
            finished.push(slot.steps);
            *slot = Slot {
                record: self.stream.next_index(),
                steps: 0,
            };
            let span = i * l * d..(i + 1) * l * d;
            if let Some(y) = self.state.y.as_mut() {
                y.data_mut()[span.clone()].copy_from_slice(&y0);
            }
            for z in &mut self.state.z {
                z.data_mut()[span.clone()].copy_from_slice(&z0);
            }
        }
        finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_a_permutation_per_epoch() {
        let mut s = SampleStream::new(10, 3).unwrap();
        let mut first: Vec<usize> = (0..10).map(|_| s.next_index()).collect();
        let mut second: Vec<usize> = (0..10).map(|_| s.next_index()).collect();
        assert_eq!(s.epoch, 1);
        assert_ne!(first, second);
        first.sort();
        second.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(second, first);
    }

    #[test]
    fn stream_resumes_mid_epoch() {
        let mut a = SampleStream::new(7, 9).unwrap();
        for _ in 0..11 {
            a.next_index();
        }
        let mut b = SampleStream::resume(7, 9, a.epoch, a.pos).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_index(), b.next_index());
        }
        assert!(SampleStream::new(0, 1).is_err());
    }
}
