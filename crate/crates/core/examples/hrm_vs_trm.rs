//! Trains TRM and the two-network HRM baseline on the same small sudoku set
//! for a fixed number of steps and compares them.
//!
//! cargo run --release --example hrm_vs_trm -- [steps] [seed]

use std::time::Instant;

use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::eval::eval_run;
use trm::model::{MixerKind, Model, NetConfig};
use trm::recursion::{effective_depth, RecursionSchedule, Variant};
use trm::train::{train_loop, TrainConfig, Trainer};

fn main() -> trm::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (train, test) = sudoku_splits(&SudokuGenConfig::new(4, 800, 7), 400, 8)?;
    let cfg = TrainConfig {
        batch_size: 64,
        lr: 1e-3,
        warmup_steps: 100,
        weight_decay: 0.1,
        ema_decay: 0.99,
        max_steps: steps,
        seed,
        ..TrainConfig::default()
    };
    // (variant, n, T, layers per network)
    for (variant, n, t, layers) in [(Variant::Trm, 6, 3, 2), (Variant::Hrm, 2, 2, 4)] {
        let net = NetConfig {
            hidden_d: 64,
            n_layers: layers,
            variant: MixerKind::Mixer,
            vocab_size: train.vocab_size,
            seq_len: train.seq_len,
            ffn_multiple: 8,
            ..NetConfig::default()
        };
        let model = Model::<f32>::new(net, variant, seed)?;
        let params = model.param_count();
        let schedule = RecursionSchedule::new(variant, n, t, 16);
        let mut trainer = Trainer::new(model, schedule, cfg.clone(), &train)?;
        let start = Instant::now();
        let mut last = None;
        train_loop(&mut trainer, &train, |_, m| {
            last = Some(m.clone());
            Ok(())
        })?;
        let (report, _) = eval_run(&trainer.ema_model(), &test, &schedule, 200)?;
        let m = last.expect("at least one step");
        println!(
            "{:<4} params {params:>7}  depth {:>3}  forward passes/step {}  tracked calls {}  test exact-match {:.3}  ({:.0}s)",
            variant.as_str(),
            effective_depth(t, n, layers),
            m.forward_passes,
            m.net_calls_tracked,
            report.exact_match,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
