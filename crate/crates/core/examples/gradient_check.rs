//! Compares reverse-mode gradients of the last recursion cycle against
//! central finite differences in 64-bit arithmetic.
//!
//! cargo run --release --example gradient_check -- [seed]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trm::autodiff::{Graph, Var};
use trm::model::{MixerKind, Model, NetConfig};
use trm::recursion::{latent_recursion, LatentState, RecursionSchedule, Variant};

fn loss(
    model: &Model<f64>,
    tokens: &[usize],
    targets: &[usize],
    y0: &Var<f64>,
    z0: &Var<f64>,
    track: bool,
) -> (f64, Vec<trm::tensor::Tensor<f64>>) {
    let mut g = Graph::new();
    let b = model.bind(&mut g, track).unwrap();
    let x = b.embed_input(&mut g, tokens, &[0, 0]).unwrap();
    let (y, _) = latent_recursion(&mut g, &b, &x, y0, z0, 2).unwrap();
    let logits = b.output_head(&mut g, &y).unwrap();
    let l = g.stablemax_ce(&logits, targets, None).unwrap();
    let v = l.value().data()[0];
    let grads = if track {
        b.param_grads(&g.backward(&l).unwrap())
    } else {
        Vec::new()
    };
    (v, grads)
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = NetConfig {
        hidden_d: 8,
        n_heads: 2,
        vocab_size: 5,
        seq_len: 6,
        ffn_multiple: 4,
        variant: MixerKind::Attention,
        ..NetConfig::default()
    };
    let mut model = Model::<f64>::new(net, Variant::Trm, seed).unwrap();
    for p in model.params.iter_mut() {
        let mut t = (*p.value).clone();
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p.value = std::sync::Arc::new(t);
    }
    let tokens: Vec<usize> = (0..12).map(|_| rng.random_range(0..5)).collect();
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..5)).collect();
    let state = LatentState::initial(&model, &RecursionSchedule::new(Variant::Trm, 2, 1, 1), 2);
    let (y0, z0) = (
        Var::constant(state.y.clone().unwrap()),
        Var::constant(state.z[0].clone()),
    );

    let (_, grads) = loss(&model, &tokens, &targets, &y0, &z0, true);
    let h = 1e-5;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let base = (*model.params.by_index(i).value).clone();
        let mut worst = 0.0f64;
        for j in 0..base.len() {
            let mut at = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[j] += d;
                model.params.set(name, t).unwrap();
                loss(&model, &tokens, &targets, &y0, &z0, false).0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = grads[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        model.params.set(name, base).unwrap();
        println!("{name:<28} max relative error {worst:.2e}");
    }
}
