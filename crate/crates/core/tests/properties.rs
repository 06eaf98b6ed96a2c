//! Property tests over data transforms, scoring and the recursion bookkeeping.

use proptest::prelude::*;

use trm::data::arc::{ArcPair, ArcTask, ArcTransform};
use trm::data::dihedral::{dihedral_compose, dihedral_inverse, dihedral_transform};
use trm::data::sudoku::{is_solution_of, sudoku_augment, sudoku_generate, SudokuGenConfig};
use trm::data::{decode, encode, Grid, PuzzleInstance, Task};
use trm::eval::{arc_score, exact_match, majority_vote, rank_candidates};
use trm::recursion::{effective_depth, RecursionSchedule, Variant};
use trm::train::warmup_lr;

fn grid(max: usize, colors: u8) -> impl Strategy<Value = Grid> {
    (1..=max, 1..=max).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..colors, h * w).prop_map(move |cells| Grid::new(h, w, cells).unwrap())
    })
}

fn permutation() -> impl Strategy<Value = Vec<u8>> {
    Just((0..10u8).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dihedral_inverse_undoes(g in grid(12, 10), k in 0..8u8) {
        let there = dihedral_transform(&g, k, false).unwrap();
        prop_assert_eq!(dihedral_transform(&there, dihedral_inverse(k), false).unwrap(), g.clone());
        let (a, b) = (k, (k * 3 + 1) % 8);
        let stepwise = dihedral_transform(&there, b, false).unwrap();
        prop_assert_eq!(dihedral_transform(&g, dihedral_compose(a, b), false).unwrap(), stepwise);
    }

    #[test]
    fn arc_transform_round_trips(g in grid(30, 10), colors in permutation(), dihedral in 0..8u8) {
        let t = ArcTransform { colors, dihedral, offset: (0, 0) };
        prop_assert_eq!(t.invert(&t.apply(&g)), g);
    }

    #[test]
    fn arc_encoding_round_trips(input in grid(30, 10), target in grid(30, 10)) {
        let p = PuzzleInstance::new(Task::Arc, input.clone(), target.clone());
        let (x, y) = encode(&p).unwrap();
        prop_assert_eq!(x.len(), 900);
        prop_assert_eq!(decode(&x, Task::Arc, (30, 30)).unwrap(), input);
        prop_assert_eq!(decode(&y, Task::Arc, (30, 30)).unwrap(), target);
    }

    #[test]
    fn arc_task_json_round_trips(train in prop::collection::vec((grid(6, 10), grid(6, 10)), 1..4), test in grid(6, 10)) {
        let task = ArcTask {
            id: "p".into(),
            train: train.into_iter().map(|(i, o)| ArcPair { input: i, output: Some(o) }).collect(),
            test: vec![ArcPair { input: test, output: None }],
        };
        prop_assert_eq!(ArcTask::from_json("p", &task.to_json()).unwrap(), task);
    }

    #[test]
    fn vote_ignores_order(mut c in prop::collection::vec(grid(2, 2), 1..30), seed in any::<u64>()) {
        let before = majority_vote(&c).unwrap();
        let k = (seed as usize) % c.len();
        c.rotate_left(k);
        c.reverse();
        prop_assert_eq!(majority_vote(&c).unwrap(), before.clone());
        let ranked = rank_candidates(&c);
        prop_assert_eq!(ranked.iter().map(|r| r.1).sum::<usize>(), c.len());
        prop_assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert!(before.1 > 0.0 && before.1 <= 1.0);
    }

    #[test]
    fn more_attempts_never_score_lower(
        preds in prop::collection::vec((prop::collection::vec(grid(2, 2), 0..5), grid(2, 2)), 0..10),
    ) {
        let scores: Vec<f64> = (1..=3).map(|a| arc_score(&preds, a)).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn exact_match_is_a_fraction(pred in prop::collection::vec(0..3usize, 12), target in prop::collection::vec(0..3usize, 12)) {
        let em = exact_match(&pred, &target, 4, None).unwrap();
        let direct = (0..3).filter(|&i| pred[i * 4..(i + 1) * 4] == target[i * 4..(i + 1) * 4]).count() as f64 / 3.0;
        prop_assert_eq!(em, direct);
        prop_assert_eq!(exact_match(&target, &target, 4, None).unwrap(), 1.0);
    }

    #[test]
    fn depth_counts_layers_per_call(t in 1..8usize, n in 1..16usize, layers in 1..6usize) {
        prop_assert_eq!(effective_depth(t, n, layers), t * (n + 1) * layers);
        let s = RecursionSchedule::new(Variant::Trm, n, t, 16);
        prop_assert_eq!(s.tracked_calls(), n + 1);
        prop_assert_eq!(s.total_calls(), t * (n + 1));
    }

    #[test]
    fn warmup_is_monotone_and_capped(base in 1e-6..1e-1f64, warmup in 0..5000u64, step in 0..10_000u64) {
        let lr = warmup_lr(base, step, warmup);
        prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
        prop_assert!(warmup_lr(base, step + 1, warmup) >= lr);
        if step >= warmup {
            prop_assert_eq!(lr, base);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sudoku_augmentation_keeps_solutions(seed in any::<u64>(), which in 0..6usize) {
        let puzzles = sudoku_generate(&SudokuGenConfig::new(4, 6, 17)).unwrap();
        let p = &puzzles[which];
        let a = sudoku_augment(p, seed).unwrap();
        prop_assert!(is_solution_of(&a.input, &a.target));
        let clues = |g: &Grid| g.cells().iter().filter(|&&c| c != 0).count();
        prop_assert_eq!(clues(&a.input), clues(&p.input));
    }
}
