//! Writes sudoku, maze and synthetic ARC datasets to disk and summarizes the
//! manifests.
//!
//! cargo run --release --example generate_datasets -- [out_dir]

use std::path::PathBuf;

use trm::data::arc::{arc_build_dataset, ArcPair, ArcTask};
use trm::data::maze::{maze_splits, MazeGenConfig};
use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::data::{write_splits, Grid, Manifest};

fn shifted(g: &Grid) -> Grid {
    g.map(|c| if c == 0 { 0 } else { c % 9 + 1 })
}

fn arc_task(id: usize) -> ArcTask {
    let grid = |k: usize| {
        let (h, w) = (2 + (id + k) % 4, 3 + k % 3);
        Grid::new(h, w, (0..h * w).map(|i| ((i * 7 + id + k) % 10) as u8).collect()).expect("sized")
    };
    let pair = |k: usize| ArcPair {
        input: grid(k),
        output: Some(shifted(&grid(k))),
    };
    ArcTask {
        id: format!("shift{id}"),
        train: (0..3).map(pair).collect(),
        test: vec![pair(3)],
    }
}

fn main() -> trm::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "datasets".into()));

    let (train, test) = sudoku_splits(&SudokuGenConfig::new(4, 200, 0), 100, 4)?;
    write_splits(
        &root.join("sudoku4"),
        0,
        "example",
        &[("train", &train), ("test", &test)],
        true,
    )?;

    let (train, test) = maze_splits(&MazeGenConfig::desk(60, 0), 40, 8)?;
    write_splits(
        &root.join("maze12"),
        0,
        "example",
        &[("train", &train), ("test", &test)],
        true,
    )?;

    let tasks: Vec<ArcTask> = (0..6).map(arc_task).collect();
    let (train, test) = arc_build_dataset(&tasks[..4], &tasks[4..], 8, 0, false)?;
    write_splits(
        &root.join("arc"),
        0,
        "example",
        &[("train", &train), ("test", &test)],
        true,
    )?;

    for name in ["sudoku4", "maze12", "arc"] {
        let dir = root.join(name);
        let m = Manifest::load(&dir)?;
        let splits: Vec<String> = m.splits.iter().map(|s| format!("{} {}", s.name, s.count)).collect();
        println!(
            "{:<8} seq_len {:>3}  vocab {:>2}  puzzle ids {:>3}  {}",
            name,
            m.seq_len,
            m.vocab_size,
            m.num_puzzle_ids,
            splits.join(", ")
        );
    }
    Ok(())
}
