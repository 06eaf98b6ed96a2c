//! The tiny backbone: embeddings, shared blocks, output and halting heads.

pub mod config;
pub mod layers;
pub mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::recursion::Variant;
use crate::tensor::{Scalar, Tensor};

pub use config::{MixerKind, NetConfig, NormPlacement};
pub use layers::{block_forward, rmsnorm, rotary_apply, BlockParams, MixWeights};
pub use params::{trunc_normal, Param, ParamGroup, ParamStore};

const INIT_STD: f64 = 0.02;

/// Number of backbone networks and halting logits a recursion variant needs.
pub fn layout(variant: Variant) -> (usize, usize) {
    match variant {
        Variant::Hrm => (2, 2),
        Variant::Trm | Variant::SingleZ | Variant::MultiZ => (1, 1),
    }
}

/// Exact learnable-parameter count for a TRM-style model (one network, one halting logit).
pub fn param_count(cfg: &NetConfig) -> usize {
    param_count_for(cfg, Variant::Trm)
}

pub fn param_count_for(cfg: &NetConfig, variant: Variant) -> usize {
    let (nets, halt) = layout(variant);
    let d = cfg.hidden_d;
    let inner = cfg.ffn_inner();
    let mix = match cfg.variant {
        MixerKind::Attention => d * 3 * d + d * d,
        MixerKind::Mixer => cfg.seq_len * cfg.seq_len,
    };
    let block = mix + 2 * d + d * 2 * inner + inner * d;
    cfg.vocab_size * d + cfg.puzzle_ids * d + nets * cfg.n_layers * block + d * cfg.vocab_size + d * halt
}

/// Parameters plus the frozen initial states.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: NetConfig,
    pub variant: Variant,
    pub params: ParamStore<T>,
    /// Frozen initial answer state `[D]`.
    pub y_init: Tensor<T>,
    /// Frozen initial latent state `[D]`.
    pub z_init: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: NetConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nets, halt) = layout(variant);
        let d = config.hidden_d;
        let inner = config.ffn_inner();
        let mut params = ParamStore::new();
        params.push(
            "embed.tokens",
            ParamGroup::TokenEmbedding,
            trunc_normal(&mut rng, &[config.vocab_size, d], INIT_STD),
        );
        if config.puzzle_ids > 0 {
            params.push(
                "embed.puzzle",
                ParamGroup::PuzzleEmbedding,
                trunc_normal(&mut rng, &[config.puzzle_ids, d], INIT_STD),
            );
        }
        for n in 0..nets {
            for b in 0..config.n_layers {
                let pre = format!("net{n}.block{b}");
                match config.variant {
                    MixerKind::Attention => {
                        params.push(
                            format!("{pre}.attn_qkv"),
                            ParamGroup::Weight,
                            trunc_normal(&mut rng, &[d, 3 * d], INIT_STD),
                        );
                        params.push(
                            format!("{pre}.attn_out"),
                            ParamGroup::Weight,
                            trunc_normal(&mut rng, &[d, d], INIT_STD),
                        );
                    }
                    MixerKind::Mixer => {
                        let l = config.seq_len;
                        params.push(
                            format!("{pre}.mix"),
                            ParamGroup::Weight,
                            trunc_normal(&mut rng, &[l, l], INIT_STD),
                        );
                    }
                }
                params.push(format!("{pre}.norm1"), ParamGroup::Norm, Tensor::full(&[d], T::one()));
                params.push(
                    format!("{pre}.mlp_gate_up"),
                    ParamGroup::Weight,
                    trunc_normal(&mut rng, &[d, 2 * inner], INIT_STD),
                );
                params.push(
                    format!("{pre}.mlp_down"),
                    ParamGroup::Weight,
                    trunc_normal(&mut rng, &[inner, d], INIT_STD),
                );
                params.push(format!("{pre}.norm2"), ParamGroup::Norm, Tensor::full(&[d], T::one()));
            }
        }
        params.push(
            "head.out",
            ParamGroup::Weight,
            trunc_normal(&mut rng, &[d, config.vocab_size], INIT_STD),
        );
        params.push(
            "head.halt",
            ParamGroup::Weight,
            trunc_normal(&mut rng, &[d, halt], INIT_STD),
        );
        let y_init = trunc_normal(&mut rng, &[d], 1.0);
        let z_init = trunc_normal(&mut rng, &[d], 1.0);
        let model = Model {
            config,
            variant,
            params,
            y_init,
            z_init,
        };
        debug_assert_eq!(model.params.numel(), param_count_for(&model.config, variant));
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Sets every block weight outside the residual path to zero.
    pub fn zero_block_weights(&mut self) {
        let names: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("net") && p.group == ParamGroup::Weight)
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (n, s) in names {
            self.params.set(&n, Tensor::zeros(&s)).expect("same shape");
        }
    }

    /// Converts every stored array to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.group, p.value.cast());
        }
        Model {
            config: self.config.clone(),
            variant: self.variant,
            params,
            y_init: self.y_init.cast(),
            z_init: self.z_init.cast(),
        }
    }

    /// Binds parameters into `g`; `track` registers them as differentiable leaves.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Result<Bound<T>> {
        let vars: Vec<Var<T>> = self
            .params
            .iter()
            .map(|p| {
                if track {
                    g.leaf(Arc::clone(&p.value))
                } else {
                    Var::from_arc(Arc::clone(&p.value))
                }
            })
            .collect();
        let find = |name: &str| -> Result<Var<T>> {
            self.params
                .index_of(name)
                .map(|i| vars[i].clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let (nets, _) = layout(self.variant);
        let mut bound_nets = Vec::with_capacity(nets);
        for n in 0..nets {
            let mut blocks = Vec::with_capacity(self.config.n_layers);
            for b in 0..self.config.n_layers {
                let pre = format!("net{n}.block{b}");
                let mix = match self.config.variant {
                    MixerKind::Attention => MixWeights::Attention {
                        qkv: find(&format!("{pre}.attn_qkv"))?,
                        out: find(&format!("{pre}.attn_out"))?,
                    },
                    MixerKind::Mixer => MixWeights::Mixer {
                        w: find(&format!("{pre}.mix"))?,
                    },
                };
                blocks.push(BlockParams {
                    mix,
                    norm1: find(&format!("{pre}.norm1"))?,
                    gate_up: find(&format!("{pre}.mlp_gate_up"))?,
                    down: find(&format!("{pre}.mlp_down"))?,
                    norm2: find(&format!("{pre}.norm2"))?,
                });
            }
            bound_nets.push(blocks);
        }
        let rope = match self.config.variant {
            MixerKind::Attention => Some(Arc::new(RopeTable::new(
                self.config.seq_len,
                self.config.head_dim(),
                self.config.rope_base,
            )?)),
            MixerKind::Mixer => None,
        };
        Ok(Bound {
            config: self.config.clone(),
            tokens: find("embed.tokens")?,
            puzzle: if self.config.puzzle_ids > 0 {
                Some(find("embed.puzzle")?)
            } else {
                None
            },
            nets: bound_nets,
            out: find("head.out")?,
            halt: find("head.halt")?,
            rope,
            vars,
        })
    }

    /// Initial state broadcast to `[B, L, D]`.
    pub fn init_state(&self, which: InitState, batch: usize) -> Tensor<T> {
        let v = match which {
            InitState::Y => &self.y_init,
            InitState::Z => &self.z_init,
        };
        let (l, d) = (self.config.seq_len, self.config.hidden_d);
        let mut data = Vec::with_capacity(batch * l * d);
        for _ in 0..batch * l {
            data.extend_from_slice(v.data());
        }
        Tensor::from_vec(&[batch, l, d], data).expect("sized")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitState {
    Y,
    Z,
}

/// Parameters bound into one graph, ready for forward evaluation.
pub struct Bound<T> {
    pub config: NetConfig,
    pub tokens: Var<T>,
    pub puzzle: Option<Var<T>>,
    pub nets: Vec<Vec<BlockParams<T>>>,
    pub out: Var<T>,
    pub halt: Var<T>,
    rope: Option<Arc<RopeTable<T>>>,
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Embeds `tokens[B * L]` (plus puzzle ids) into `[B, L, D]`.
    pub fn embed_input(&self, g: &mut Graph<T>, tokens: &[usize], puzzle_ids: &[usize]) -> Result<Var<T>> {
        let (l, d) = (self.config.seq_len, self.config.hidden_d);
        if tokens.len() % l != 0 || tokens.len() / l != puzzle_ids.len() {
            return Err(Error::Shape(format!(
                "{} tokens and {} puzzle ids for sequence length {l}",
                tokens.len(),
                puzzle_ids.len()
            )));
        }
        let b = puzzle_ids.len();
        let e = g.embedding(&self.tokens, tokens, &[b, l])?;
        let x = g.scale(&e, T::from_usize(d).unwrap().sqrt());
        match &self.puzzle {
            Some(table) => {
                let rows = table.shape()[0];
                let ids: Vec<usize> = if rows == 1 { vec![0; b] } else { puzzle_ids.to_vec() };
                if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
                    return Err(Error::Data(format!(
                        "puzzle id {bad} outside embedding table of {rows}"
                    )));
                }
                let p = g.embedding(table, &ids, &[b])?;
                g.add_broadcast(&x, &p)
            }
            None => Ok(x),
        }
    }

    /// One network evaluation: element-wise sum of 2 or 3 inputs, then the blocks.
    pub fn net(&self, g: &mut Graph<T>, which: usize, inputs: &[&Var<T>]) -> Result<Var<T>> {
        if !(2..=3).contains(&inputs.len()) {
            return Err(Error::Shape(format!(
                "network takes 2 or 3 inputs, got {}",
                inputs.len()
            )));
        }
        self.net_any(g, which, inputs)
    }

    /// Like [`Bound::net`] but accepts any number (≥ 2) of inputs.
    pub fn net_any(&self, g: &mut Graph<T>, which: usize, inputs: &[&Var<T>]) -> Result<Var<T>> {
        if inputs.len() < 2 {
            return Err(Error::Shape(format!(
                "network needs at least 2 inputs, got {}",
                inputs.len()
            )));
        }
        let blocks = self
            .nets
            .get(which)
            .ok_or_else(|| Error::Config(format!("no network {which}")))?;
        g.counters.net_calls_total += 1;
        if g.is_recording() {
            g.counters.net_calls_tracked += 1;
        }
        let mut h = g.sum(inputs)?;
        for p in blocks {
            h = block_forward(g, &h, &self.config, p, self.rope.as_ref())?;
        }
        Ok(h)
    }

    /// Vocabulary logits `[B, L, V]`.
    pub fn output_head(&self, g: &mut Graph<T>, y: &Var<T>) -> Result<Var<T>> {
        g.linear(y, &self.out)
    }

    /// Mean-pooled halting logits `[B, 1]` (or `[B, 2]` Q-values for HRM).
    pub fn halt_head(&self, g: &mut Graph<T>, y: &Var<T>) -> Result<Var<T>> {
        let pooled = g.mean_seq(y)?;
        g.linear(&pooled, &self.halt)
    }

    /// Gradients aligned with the model's parameter order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Per-position argmax; ties go to the lowest token id.
pub fn decode<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: MixerKind) -> NetConfig {
        NetConfig {
            n_layers: 2,
            hidden_d: 16,
            n_heads: 2,
            variant: kind,
            vocab_size: 6,
            seq_len: 8,
            ffn_multiple: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn counts_match_allocated_arrays() {
        for kind in [MixerKind::Attention, MixerKind::Mixer] {
            for variant in [Variant::Trm, Variant::Hrm] {
                let m = Model::<f32>::new(small(kind), variant, 0).unwrap();
                assert_eq!(m.param_count(), param_count_for(&m.config, variant));
            }
        }
    }

    #[test]
    fn decode_ties_and_shift_invariance() {
        let t = Tensor::from_vec(&[2, 2], vec![0.3f64, 0.3, -1.0, 2.0]).unwrap();
        assert_eq!(decode(&t), vec![0, 1]);
        let shifted = t.map(|v| v + 7.5);
        assert_eq!(decode(&shifted), decode(&t));
    }

    #[test]
    fn decode_all_zero_grid_when_logit0_dominates() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0f64, -1.0, 0.5, 0.1, 2.0, 1.0]).unwrap();
        assert_eq!(decode(&t), vec![0, 0, 0]);
    }

    #[test]
    fn head_shapes() {
        for variant in [Variant::Trm, Variant::Hrm] {
            let m = Model::<f64>::new(small(MixerKind::Mixer), variant, 1).unwrap();
            let mut g = Graph::new();
            let b = m.bind(&mut g, false).unwrap();
            let y = Var::constant(m.init_state(InitState::Y, 3));
            let logits = b.output_head(&mut g, &y).unwrap();
            assert_eq!(logits.shape(), &[3, 8, 6]);
            assert_eq!(decode(logits.value()).len(), 24);
            let q = b.halt_head(&mut g, &y).unwrap();
            assert_eq!(q.shape(), &[3, layout(variant).1]);
            // identical rows across the batch
            let c = q.shape()[1];
            for bi in 1..3 {
                assert_eq!(&q.value().data()[..c], &q.value().data()[bi * c..(bi + 1) * c]);
            }
        }
    }

    #[test]
    fn zero_halt_weights_give_zero_logits() {
        let mut m = Model::<f64>::new(small(MixerKind::Mixer), Variant::Trm, 2).unwrap();
        m.params.set("head.halt", Tensor::zeros(&[16, 1])).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let y = Var::constant(m.init_state(InitState::Y, 2));
        let q = b.halt_head(&mut g, &y).unwrap();
        assert_eq!(q.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn net_rejects_wrong_arity() {
        let m = Model::<f64>::new(small(MixerKind::Mixer), Variant::Trm, 3).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let y = Var::constant(m.init_state(InitState::Y, 1));
        assert!(b.net(&mut g, 0, &[&y]).is_err());
        assert!(b.net(&mut g, 0, &[&y, &y, &y, &y]).is_err());
        assert!(b.net_any(&mut g, 0, &[&y, &y, &y, &y]).is_ok());
    }
}
