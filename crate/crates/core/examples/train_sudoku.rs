//! Trains a tiny recursive model on generated 4x4 sudoku and reports test accuracy.
//!
//! cargo run --release --example train_sudoku -- [steps] [hidden] [n] [T] [batch] [lr]

use std::time::Instant;

use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::eval::eval_run;
use trm::model::{MixerKind, Model, NetConfig};
use trm::recursion::{RecursionSchedule, Variant};
use trm::train::{train_loop, TrainConfig, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> trm::Result<()> {
    let steps: u64 = arg(1, 1500);
    let hidden: usize = arg(2, 64);
    let n: usize = arg(3, 6);
    let t: usize = arg(4, 3);
    let batch: usize = arg(5, 64);
    let lr: f64 = arg(6, 1e-3);

    let (train, test) = sudoku_splits(&SudokuGenConfig::new(4, 800, 7), 400, 8)?;
    let net = NetConfig {
        hidden_d: hidden,
        n_layers: 2,
        variant: MixerKind::Mixer,
        vocab_size: train.vocab_size,
        seq_len: train.seq_len,
        ffn_multiple: 8,
        ..NetConfig::default()
    };
    let schedule = RecursionSchedule::new(Variant::Trm, n, t, 16);
    let cfg = TrainConfig {
        batch_size: batch,
        lr,
        warmup_steps: 100,
        weight_decay: 0.1,
        ema_decay: 0.99,
        max_steps: steps,
        seed: 0,
        ..TrainConfig::default()
    };
    let model = Model::<f32>::new(net, Variant::Trm, 0)?;
    println!("{} parameters", model.param_count());
    let mut trainer = Trainer::new(model, schedule, cfg, &train)?;
    let start = Instant::now();
    train_loop(&mut trainer, &train, |tr, m| {
        if m.step % 50 == 0 {
            let (rep, _) = eval_run(&tr.ema_model(), &test, &tr.schedule, 200)?;
            println!(
                "step {:5} {:6.1}s loss {:.4}/{:.4} train_em {:.3} sup {:?} test_em {:.3} cell {:.3}",
                m.step,
                start.elapsed().as_secs_f64(),
                m.loss_answer,
                m.loss_halt,
                m.train_exact_match,
                m.mean_sup_steps,
                rep.exact_match,
                rep.per_cell_accuracy
            );
        }
        Ok(())
    })?;
    Ok(())
}
