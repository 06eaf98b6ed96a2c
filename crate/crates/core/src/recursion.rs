//! Recursion schedules: TRM latent/deep recursion, the HRM two-network
//! forward with a last-step gradient, and the single-z / multi-z variants.
//!
//! Every schedule detaches the incoming carried state, runs all but the final
//! cycle without recording, then records exactly one cycle. The returned state
//! is detached again so nothing flows into the next supervision step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, MixerKind, NetConfig};
use crate::tensor::{Scalar, Tensor};

/// Which recursion scheme drives the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Answer `y` plus latent `z`, one shared network.
    Trm,
    /// Two networks at two frequencies, gradient through the last L and H step only.
    Hrm,
    /// A single carried latent.
    SingleZ,
    /// `y` plus `n` separately carried latent slots.
    MultiZ,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Trm => "trm",
            Variant::Hrm => "hrm",
            Variant::SingleZ => "single_z",
            Variant::MultiZ => "multi_z",
        }
    }

    /// Full forward passes per optimization step when training with halting.
    pub fn forward_passes_per_step(self) -> u64 {
        match self {
            Variant::Hrm => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trm" => Ok(Variant::Trm),
            "hrm" => Ok(Variant::Hrm),
            "single_z" | "single-z" => Ok(Variant::SingleZ),
            "multi_z" | "multi-z" => Ok(Variant::MultiZ),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }
}

/// `(n, T, N_sup)` plus the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecursionSchedule {
    pub variant: Variant,
    /// Latent updates per cycle.
    pub n: usize,
    /// Cycles per supervision step.
    #[serde(rename = "T", alias = "t")]
    pub t: usize,
    /// Maximum supervision steps.
    #[serde(rename = "N_sup", alias = "n_sup")]
    pub n_sup: usize,
}

impl Default for RecursionSchedule {
    fn default() -> Self {
        RecursionSchedule {
            variant: Variant::Trm,
            n: 6,
            t: 3,
            n_sup: 16,
        }
    }
}

impl RecursionSchedule {
    pub fn new(variant: Variant, n: usize, t: usize, n_sup: usize) -> Self {
        RecursionSchedule { variant, n, t, n_sup }
    }

    pub fn validate(&self) -> Result<()> {
        let min_n = if self.variant == Variant::SingleZ { 0 } else { 1 };
        if self.n < min_n || self.t == 0 || self.n_sup == 0 {
            return Err(Error::Config(format!(
                "schedule needs n >= {min_n}, T >= 1, N_sup >= 1 (got n={}, T={}, N_sup={})",
                self.n, self.t, self.n_sup
            )));
        }
        Ok(())
    }

    /// Network evaluations recorded on the tape per supervision step.
    pub fn tracked_calls(&self) -> usize {
        match self.variant {
            Variant::Hrm => 2,
            _ => self.n + 1,
        }
    }

    /// Network evaluations per supervision step.
    pub fn total_calls(&self) -> usize {
        self.t * (self.n + 1)
    }

    /// Carried features (answer plus latents).
    pub fn features(&self) -> usize {
        match self.variant {
            Variant::Trm | Variant::Hrm => 2,
            Variant::SingleZ => 1,
            Variant::MultiZ => self.n + 1,
        }
    }
}

/// Layers emulated per supervision step: `T · (n + 1) · n_layers`.
pub fn effective_depth(t: usize, n: usize, n_layers: usize) -> usize {
    t * (n + 1) * n_layers
}

/// Instrumentation of network evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub net_calls_total: u64,
    pub net_calls_tracked: u64,
    pub forward_passes: u64,
}

/// State carried between supervision steps; always detached.
#[derive(Debug, Clone)]
pub struct LatentState<T> {
    /// Embedded answer (HRM's `z_H`); absent for the single-z variant.
    pub y: Option<Tensor<T>>,
    /// Latent slots (HRM's `z_L` is the only slot).
    pub z: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentState<T> {
    /// Initial state for `batch` samples.
    pub fn initial(model: &crate::model::Model<T>, schedule: &RecursionSchedule, batch: usize) -> Self {
        use crate::model::InitState;
        let y = model.init_state(InitState::Y, batch);
        let z = model.init_state(InitState::Z, batch);
        match schedule.variant {
            Variant::Trm | Variant::Hrm => LatentState { y: Some(y), z: vec![z] },
            Variant::SingleZ => LatentState { y: None, z: vec![z] },
            Variant::MultiZ => LatentState {
                y: Some(y),
                z: vec![z; schedule.n],
            },
        }
    }

    pub fn features(&self) -> usize {
        usize::from(self.y.is_some()) + self.z.len()
    }

    /// Every carried array, `y` first.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.y.iter().chain(self.z.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.y.iter_mut().chain(self.z.iter_mut())
    }
}

/// Result of one supervision step's forward pass.
pub struct StepOutput<T> {
    pub state: LatentState<T>,
    /// `[B, L, V]`, tracked.
    pub logits: Var<T>,
    /// `[B, 1]` (or `[B, 2]` for HRM), tracked.
    pub halt: Var<T>,
}

fn carried<T: Scalar>(t: &Tensor<T>) -> Var<T> {
    Var::constant(t.clone())
}

/// `n` latent updates `z = net(x, y, z)` then one answer update `y = net(y, z)`.
pub fn latent_recursion<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    y: &Var<T>,
    z: &Var<T>,
    n: usize,
) -> Result<(Var<T>, Var<T>)> {
    let mut z = z.clone();
    for _ in 0..n {
        z = net.net(g, 0, &[x, y, &z])?;
    }
    let y = net.net(g, 0, &[y, &z])?;
    Ok((y, z))
}

/// `T − 1` recursions without recording, one recorded recursion, heads on `y`.
pub fn deep_recursion<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    schedule: &RecursionSchedule,
) -> Result<StepOutput<T>> {
    if schedule.variant != Variant::Trm {
        return Err(Error::Config(format!(
            "deep_recursion runs the trm variant, got {}",
            schedule.variant.as_str()
        )));
    }
    let (y0, z0) = match (&state.y, state.z.as_slice()) {
        (Some(y), [z]) => (carried(y), carried(z)),
        _ => return Err(Error::Shape("trm state needs y and one z".into())),
    };
    g.counters.forward_passes += 1;
    let (y, z) = g.no_grad(|g| {
        let (mut y, mut z) = (y0, z0);
        for _ in 1..schedule.t {
            (y, z) = latent_recursion(g, net, x, &y, &z, schedule.n)?;
        }
        Ok::<_, Error>((y, z))
    })?;
    let (y, z) = latent_recursion(g, net, x, &y, &z, schedule.n)?;
    let logits = net.output_head(g, &y)?;
    let halt = net.halt_head(g, &y)?;
    Ok(StepOutput {
        state: LatentState {
            y: Some(y.value().clone()),
            z: vec![z.value().clone()],
        },
        logits,
        halt,
    })
}

const L_NET: usize = 0;
const H_NET: usize = 1;

/// HRM forward: `nT − 1` low-level and `T − 1` high-level updates without
/// recording (the high-level net after every `n`-th low-level step), then one
/// recorded low-level and one recorded high-level update.
pub fn hrm_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    n: usize,
    t: usize,
) -> Result<StepOutput<T>> {
    if net.nets.len() != 2 {
        return Err(Error::Config("hrm needs two networks".into()));
    }
    let (zh0, zl0) = match (&state.y, state.z.as_slice()) {
        (Some(y), [z]) => (carried(y), carried(z)),
        _ => return Err(Error::Shape("hrm state needs z_H and one z_L".into())),
    };
    g.counters.forward_passes += 1;
    let (zh, zl) = g.no_grad(|g| {
        let (mut zh, mut zl) = (zh0, zl0);
        for i in 0..(n * t).saturating_sub(1) {
            zl = net.net(g, L_NET, &[&zl, &zh, x])?;
            if (i + 1) % n == 0 {
                zh = net.net(g, H_NET, &[&zh, &zl])?;
            }
        }
        Ok::<_, Error>((zh, zl))
    })?;
    let zl = net.net(g, L_NET, &[&zl, &zh, x])?;
    let zh = net.net(g, H_NET, &[&zh, &zl])?;
    let logits = net.output_head(g, &zh)?;
    let halt = net.halt_head(g, &zh)?;
    Ok(StepOutput {
        state: LatentState {
            y: Some(zh.value().clone()),
            z: vec![zl.value().clone()],
        },
        logits,
        halt,
    })
}

/// Single carried latent: `n + 1` updates `z = net(x, z)` per cycle; heads read `z`.
pub fn single_z_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    n: usize,
    t: usize,
) -> Result<StepOutput<T>> {
    let z0 = match state.z.as_slice() {
        [z] => carried(z),
        _ => return Err(Error::Shape("single-z state needs exactly one slot".into())),
    };
    g.counters.forward_passes += 1;
    let cycle = |g: &mut Graph<T>, mut z: Var<T>| -> Result<Var<T>> {
        for _ in 0..=n {
            z = net.net(g, 0, &[x, &z])?;
        }
        Ok(z)
    };
    let z = g.no_grad(|g| {
        let mut z = z0;
        for _ in 1..t {
            z = cycle(g, z)?;
        }
        Ok::<_, Error>(z)
    })?;
    let z = cycle(g, z)?;
    let logits = net.output_head(g, &z)?;
    let halt = net.halt_head(g, &z)?;
    Ok(StepOutput {
        state: LatentState {
            y: None,
            z: vec![z.value().clone()],
        },
        logits,
        halt,
    })
}

/// `n` carried latent slots: slot `i = net(x, y, z_1..z_n)` in order, then
/// `y = net(y, z_1..z_n)`. Later slots see the fresh values of earlier ones.
pub fn multi_z_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    n: usize,
    t: usize,
) -> Result<StepOutput<T>> {
    let y0 = state
        .y
        .as_ref()
        .map(carried)
        .ok_or_else(|| Error::Shape("multi-z state needs y".into()))?;
    if state.z.len() != n {
        return Err(Error::Shape(format!(
            "multi-z needs {n} latent slots, got {}",
            state.z.len()
        )));
    }
    let z0: Vec<Var<T>> = state.z.iter().map(carried).collect();
    g.counters.forward_passes += 1;
    let cycle = |g: &mut Graph<T>, y: Var<T>, mut zs: Vec<Var<T>>| -> Result<(Var<T>, Vec<Var<T>>)> {
        for i in 0..n {
            let mut inputs: Vec<&Var<T>> = vec![x, &y];
            inputs.extend(zs.iter());
            let updated = net.net_any(g, 0, &inputs)?;
            zs[i] = updated;
        }
        let mut inputs: Vec<&Var<T>> = vec![&y];
        inputs.extend(zs.iter());
        let y = net.net_any(g, 0, &inputs)?;
        Ok((y, zs))
    };
    let (y, zs) = g.no_grad(|g| {
        let (mut y, mut zs) = (y0, z0);
        for _ in 1..t {
            (y, zs) = cycle(g, y, zs)?;
        }
        Ok::<_, Error>((y, zs))
    })?;
    let (y, zs) = cycle(g, y, zs)?;
    let logits = net.output_head(g, &y)?;
    let halt = net.halt_head(g, &y)?;
    Ok(StepOutput {
        state: LatentState {
            y: Some(y.value().clone()),
            z: zs.iter().map(|z| z.value().clone()).collect(),
        },
        logits,
        halt,
    })
}

/// Dispatches one supervision step's forward pass by variant.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &Bound<T>,
    x: &Var<T>,
    state: &LatentState<T>,
    schedule: &RecursionSchedule,
) -> Result<StepOutput<T>> {
    match schedule.variant {
        Variant::Trm => deep_recursion(g, net, x, state, schedule),
        Variant::Hrm => hrm_forward(g, net, x, state, schedule.n, schedule.t),
        Variant::SingleZ => single_z_forward(g, net, x, state, schedule.n, schedule.t),
        Variant::MultiZ => multi_z_forward(g, net, x, state, schedule.n, schedule.t),
    }
}

/// Bytes the tape is expected to hold for one recorded supervision step.
pub fn estimate_tape_bytes(cfg: &NetConfig, schedule: &RecursionSchedule, batch: usize, elem_bytes: usize) -> u64 {
    let (b, l, d) = (batch as u64, cfg.seq_len as u64, cfg.hidden_d as u64);
    let h = cfg.ffn_inner() as u64;
    // saved inputs/outputs of norms, residual sums, SwiGLU halves
    let mut per_block = 6 * d + 3 * h;
    if cfg.variant == MixerKind::Attention {
        per_block += 6 * d + cfg.n_heads as u64 * l;
    }
    let calls = schedule.tracked_calls() as u64 * cfg.n_layers as u64;
    calls * per_block * b * l * elem_bytes as u64
}

/// Refuses configurations whose tape would exceed `budget` bytes.
pub fn check_memory(
    cfg: &NetConfig,
    schedule: &RecursionSchedule,
    batch: usize,
    elem_bytes: usize,
    budget: u64,
) -> Result<()> {
    let needed = estimate_tape_bytes(cfg, schedule, batch, elem_bytes);
    if needed > budget {
        return Err(Error::OutOfMemory { needed, budget });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, NormPlacement};

    fn cfg(norm: NormPlacement) -> NetConfig {
        NetConfig {
            n_layers: 2,
            hidden_d: 8,
            n_heads: 2,
            variant: MixerKind::Mixer,
            vocab_size: 6,
            seq_len: 4,
            ffn_multiple: 8,
            puzzle_ids: 0,
            norm,
            ..NetConfig::default()
        }
    }

    fn run(variant: Variant, n: usize, t: usize) -> CallCounters {
        let sched = RecursionSchedule::new(variant, n, t, 16);
        let m = Model::<f64>::new(cfg(NormPlacement::Post), variant, 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true).unwrap();
        let x = b.embed_input(&mut g, &[1; 8], &[0, 0]).unwrap();
        let st = LatentState::initial(&m, &sched, 2);
        let out = forward(&mut g, &b, &x, &st, &sched).unwrap();
        assert_eq!(out.state.features(), sched.features());
        g.counters
    }

    #[test]
    fn call_counts_per_variant() {
        let c = run(Variant::Trm, 6, 3);
        assert_eq!((c.net_calls_total, c.net_calls_tracked, c.forward_passes), (21, 7, 1));
        let c = run(Variant::Trm, 1, 1);
        assert_eq!((c.net_calls_total, c.net_calls_tracked), (2, 2));
        let c = run(Variant::Hrm, 2, 2);
        assert_eq!((c.net_calls_total, c.net_calls_tracked), (6, 2));
        let c = run(Variant::SingleZ, 6, 3);
        assert_eq!((c.net_calls_total, c.net_calls_tracked), (21, 7));
        let c = run(Variant::SingleZ, 0, 1);
        assert_eq!((c.net_calls_total, c.net_calls_tracked), (1, 1));
        let c = run(Variant::MultiZ, 6, 3);
        assert_eq!((c.net_calls_total, c.net_calls_tracked), (21, 7));
    }

    #[test]
    fn depth_formula() {
        assert_eq!(effective_depth(3, 6, 2), 42);
        assert_eq!(effective_depth(2, 2, 4), 24);
        assert_eq!(effective_depth(6, 12, 2), 156);
        assert_eq!(16 * effective_depth(2, 2, 4), 384);
    }

    #[test]
    fn zero_weight_recursion_reduces_to_sums() {
        // With pre-norm blocks and zeroed sublayers the network is the input sum,
        // so z_n = z + n (x + y) and y' = y + z_n.
        let mut m = Model::<f64>::new(cfg(NormPlacement::Pre), Variant::Trm, 5).unwrap();
        m.zero_block_weights();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let x = b.embed_input(&mut g, &[2, 3, 4, 5], &[0]).unwrap();
        let y = Var::constant(m.init_state(crate::model::InitState::Y, 1));
        let z = Var::constant(m.init_state(crate::model::InitState::Z, 1));
        let (y2, z2) = latent_recursion(&mut g, &b, &x, &y, &z, 3).unwrap();
        for i in 0..x.value().len() {
            let (xv, yv, zv) = (x.value().data()[i], y.value().data()[i], z.value().data()[i]);
            let zn = zv + 3.0 * (xv + yv);
            assert!((z2.value().data()[i] - zn).abs() < 1e-12);
            assert!((y2.value().data()[i] - (yv + zn)).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_z_slot_mismatch_errors() {
        let sched = RecursionSchedule::new(Variant::MultiZ, 3, 1, 1);
        let m = Model::<f64>::new(cfg(NormPlacement::Post), Variant::MultiZ, 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let x = b.embed_input(&mut g, &[1; 4], &[0]).unwrap();
        let mut st = LatentState::initial(&m, &sched, 1);
        st.z.pop();
        assert!(multi_z_forward(&mut g, &b, &x, &st, 3, 1).is_err());
    }

    #[test]
    fn multi_z_with_one_slot_matches_latent_recursion() {
        let sched = RecursionSchedule::new(Variant::MultiZ, 1, 2, 1);
        let m = Model::<f64>::new(cfg(NormPlacement::Post), Variant::MultiZ, 9).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let x = b.embed_input(&mut g, &[1, 2, 3, 4], &[0]).unwrap();
        let st = LatentState::initial(&m, &sched, 1);
        let multi = multi_z_forward(&mut g, &b, &x, &st, 1, 2).unwrap();
        let trm = deep_recursion(&mut g, &b, &x, &st, &RecursionSchedule::new(Variant::Trm, 1, 2, 1)).unwrap();
        assert_eq!(multi.logits.value(), trm.logits.value());
        assert_eq!(multi.state.z[0], trm.state.z[0]);
    }

    #[test]
    fn memory_estimate_reproduces_large_n_refusal() {
        // batch 768 on a 40 GiB device: n = 6 fits, n = 12 does not
        let cfg = NetConfig::default();
        let budget = 40 * (1u64 << 30);
        let fits = RecursionSchedule::new(Variant::Trm, 6, 3, 16);
        let oom = RecursionSchedule::new(Variant::Trm, 12, 3, 16);
        assert!(check_memory(&cfg, &fits, 768, 4, budget).is_ok());
        assert!(matches!(
            check_memory(&cfg, &oom, 768, 4, budget),
            Err(Error::OutOfMemory { .. })
        ));
    }
}
