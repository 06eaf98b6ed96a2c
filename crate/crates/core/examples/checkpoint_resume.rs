//! Writes a dataset, trains with periodic checkpoints, resumes from the middle
//! and confirms the resumed run ends on the same bytes.
//!
//! cargo run --release --example checkpoint_resume -- [steps]

use trm::checkpoint::read_header;
use trm::config::{DataConfig, RunConfig};
use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::data::write_splits;
use trm::model::NetConfig;
use trm::recursion::{RecursionSchedule, Variant};
use trm::run::{train_run, TrainOptions};
use trm::train::TrainConfig;

fn main() -> trm::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let root = std::env::temp_dir().join(format!("trm-resume-{}", std::process::id()));
    let data = root.join("data");
    let (train, test) = sudoku_splits(&SudokuGenConfig::new(4, 60, 3), 40, 2)?;
    write_splits(&data, 3, "example", &[("train", &train), ("test", &test)], true)?;

    let cfg = RunConfig {
        net: NetConfig {
            hidden_d: 32,
            vocab_size: train.vocab_size,
            seq_len: train.seq_len,
            ffn_multiple: 8,
            ..NetConfig::default()
        },
        schedule: RecursionSchedule::new(Variant::Trm, 3, 2, 8),
        train: TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 10,
            max_steps: steps,
            checkpoint_every: steps / 2,
            ..TrainConfig::default()
        },
        data: DataConfig {
            dir: data,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    };
    let quiet = &mut |_: &str| {};
    let straight = TrainOptions {
        out_dir: root.join("straight"),
        ..TrainOptions::default()
    };
    train_run(cfg.clone(), &straight, quiet)?;

    let mid = straight.out_dir.join(format!("checkpoints/step_{:06}.ckpt", steps / 2));
    let h = read_header(&mid)?;
    println!(
        "checkpoint at step {} with {} arrays, params {}",
        h.step,
        h.arrays.len(),
        &h.params_digest[..16]
    );

    let resumed = TrainOptions {
        out_dir: root.join("resumed"),
        resume: Some(mid),
        ..TrainOptions::default()
    };
    let summary = train_run(cfg, &resumed, quiet)?;
    let a = std::fs::read(straight.out_dir.join("final.ckpt")).map_err(|e| trm::Error::io(&root, e))?;
    let b = std::fs::read(&summary.final_checkpoint).map_err(|e| trm::Error::io(&root, e))?;
    println!(
        "resumed to step {}; final checkpoints identical: {}",
        summary.steps,
        a == b
    );
    if let Some(r) = summary.report {
        println!("test exact-match {:.3}", r.exact_match);
    }
    std::fs::remove_dir_all(&root).map_err(|e| trm::Error::io(&root, e))?;
    Ok(())
}
