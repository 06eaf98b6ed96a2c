//! Augments a small ARC-style task, maps each augmented prediction back to the
//! original frame and combines them by majority vote.
//!
//! cargo run --release --example arc_voting -- [augmentations] [seed]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trm::data::arc::{arc_augment, ArcPair, ArcTask};
use trm::data::Grid;
use trm::eval::{arc_score, majority_vote, rank_candidates};

/// The task's rule: mirror the grid left to right.
fn mirror(g: &Grid) -> Grid {
    let rows: Vec<Vec<u8>> = g.rows().into_iter().map(|r| r.into_iter().rev().collect()).collect();
    Grid::from_rows(&rows).expect("rectangular")
}

fn random_grid(rng: &mut ChaCha8Rng) -> Grid {
    let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
    Grid::new(h, w, (0..h * w).map(|_| rng.random_range(0..10)).collect()).expect("sized")
}

fn main() -> trm::Result<()> {
    let augs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |g: Grid| ArcPair {
        output: Some(mirror(&g)),
        input: g,
    };
    let task = ArcTask {
        id: "mirror".into(),
        train: (0..3).map(|_| pair(random_grid(&mut rng))).collect(),
        test: vec![pair(random_grid(&mut rng))],
    };
    let truth = task.test[0].output.clone().expect("labelled");

    // A stand-in solver that is right on most augmented views and wrong on some.
    let mut candidates = Vec::new();
    for (k, (t, view)) in arc_augment(&task, augs, seed, false).iter().enumerate() {
        let answer_in_view = t.apply(&truth);
        let guess = if k % 3 == 2 {
            view.test[0].input.clone()
        } else {
            answer_in_view
        };
        candidates.push(t.invert(&guess));
    }
    for (g, n) in rank_candidates(&candidates) {
        println!(
            "{n} votes for a {}x{} grid{}",
            g.height(),
            g.width(),
            if g == truth { " (correct)" } else { "" }
        );
    }
    let (winner, agreement) = majority_vote(&candidates)?;
    println!(
        "winner agrees with {:.0}% of views, correct: {}",
        100.0 * agreement,
        winner == truth
    );
    let ranked: Vec<Grid> = rank_candidates(&candidates).into_iter().map(|r| r.0).collect();
    let preds = vec![(ranked, truth)];
    println!("pass@1 {:.2}, pass@2 {:.2}", arc_score(&preds, 1), arc_score(&preds, 2));
    Ok(())
}
