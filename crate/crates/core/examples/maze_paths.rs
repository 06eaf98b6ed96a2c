//! Generates a few mazes and draws their inputs next to the solved paths.
//!
//! cargo run --release --example maze_paths -- [count] [seed]

use trm::data::maze::{marked_path_len, maze_generate, MazeGenConfig};
use trm::data::vocab::{EMPTY, END, PATH, START, WALL};
use trm::data::{encode, Grid};

fn draw(g: &Grid) -> Vec<String> {
    g.rows()
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| match c {
                    WALL => '#',
                    EMPTY => ' ',
                    START => 'S',
                    END => 'E',
                    PATH => '*',
                    _ => '?',
                })
                .collect()
        })
        .collect()
}

fn main() -> trm::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = MazeGenConfig::desk(count, seed);
    println!(
        "{}x{} mazes, shortest path at least {} moves",
        cfg.h, cfg.w, cfg.min_path_len
    );
    for (i, m) in maze_generate(&cfg)?.iter().enumerate() {
        let (x, y) = encode(m)?;
        println!(
            "\nmaze {i}: {} moves, {} tokens per side",
            marked_path_len(&m.target),
            x.len()
        );
        debug_assert_eq!(x.len(), y.len());
        for (l, r) in draw(&m.input).iter().zip(draw(&m.target)) {
            println!("  {l}   {r}");
        }
    }
    Ok(())
}
