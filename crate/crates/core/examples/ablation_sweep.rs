//! Plans an ablation grid at full scale (with memory-predicted skips), then
//! runs a scaled-down copy of it on 4x4 sudoku and prints the table.
//!
//! cargo run --release --example ablation_sweep -- [steps] [out_dir]

use trm::ablate::{markdown, plan, run, write_outputs, Cell, Grid};
use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::recursion::Variant;

fn main() -> trm::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let out = std::env::args().nth(2).unwrap_or_else(|| "ablation_out".into());
    let cells = vec![
        Cell {
            variant: Variant::Trm,
            n: 6,
            t: 3,
            layers: 2,
        },
        Cell {
            variant: Variant::Trm,
            n: 6,
            t: 1,
            layers: 2,
        },
        Cell {
            variant: Variant::SingleZ,
            n: 6,
            t: 3,
            layers: 2,
        },
        Cell {
            variant: Variant::MultiZ,
            n: 6,
            t: 3,
            layers: 2,
        },
        Cell {
            variant: Variant::Hrm,
            n: 2,
            t: 2,
            layers: 4,
        },
        Cell {
            variant: Variant::Trm,
            n: 12,
            t: 3,
            layers: 2,
        },
    ];

    let mut full = Grid {
        cells: cells.clone(),
        ..Grid::default()
    };
    full.base.train.memory_budget_bytes = 40 << 30;
    println!("full scale plan (D=512, L=81, batch 768):\n{}", markdown(&plan(&full)?));

    let (train, test) = sudoku_splits(&SudokuGenConfig::new(4, 600, 7), 300, 4)?;
    let mut small = Grid {
        cells,
        eval_batch: 200,
        ..Grid::default()
    };
    let b = &mut small.base;
    b.net.hidden_d = 32;
    b.net.ffn_multiple = 8;
    b.net.vocab_size = train.vocab_size;
    b.net.seq_len = train.seq_len;
    b.train.batch_size = 32;
    b.train.lr = 1e-3;
    b.train.warmup_steps = 20;
    b.train.weight_decay = 0.1;
    b.train.ema_decay = 0.99;
    b.train.max_steps = steps;
    let outcome = run(&small, &train, &test, |line| eprintln!("{line}"))?;
    println!("{}", markdown(&outcome.rows));
    write_outputs(std::path::Path::new(&out), &outcome)?;
    println!("wrote {out}/table.md, table.csv, loss_curves.svg");
    Ok(())
}
