//! Sudoku (4×4 and 9×9): solving, uniqueness counting, generation and
//! rule-preserving shuffles.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::sudoku_vocab;
use crate::data::{Dataset, Grid, PuzzleInstance, Record, Task};
use crate::error::{Error, Result};

/// Side of a box: 2 for 4×4, 3 for 9×9.
pub fn box_side(size: usize) -> Result<usize> {
    match size {
        4 => Ok(2),
        9 => Ok(3),
        _ => Err(Error::Config(format!("sudoku size must be 4 or 9, got {size}"))),
    }
}

/// Fewest clues a uniquely solvable puzzle can have.
pub fn min_clues(size: usize) -> usize {
    if size == 4 {
        4
    } else {
        17
    }
}

fn unit_ok(vals: impl Iterator<Item = u8>, size: usize, full: bool) -> bool {
    let mut seen = 0u32;
    for v in vals {
        if v == 0 {
            if full {
                return false;
            }
            continue;
        }
        if usize::from(v) > size || seen & (1 << v) != 0 {
            return false;
        }
        seen |= 1 << v;
    }
    true
}

fn units_ok(g: &Grid, full: bool) -> bool {
    let size = g.height();
    let Ok(b) = box_side(size) else { return false };
    if g.width() != size {
        return false;
    }
    (0..size).all(|i| {
        let bi = (i / b) * b;
        let bj = (i % b) * b;
        unit_ok((0..size).map(|j| g.get(i, j)), size, full)
            && unit_ok((0..size).map(|j| g.get(j, i)), size, full)
            && unit_ok((0..size).map(|j| g.get(bi + j / b, bj + j % b)), size, full)
    })
}

/// No digit repeats in any row, column or box; blanks allowed.
pub fn is_consistent(g: &Grid) -> bool {
    units_ok(g, false)
}

/// Completely filled and consistent.
pub fn is_solved(g: &Grid) -> bool {
    units_ok(g, true)
}

/// `target` is a solution agreeing with every clue of `input`.
pub fn is_solution_of(input: &Grid, target: &Grid) -> bool {
    input.height() == target.height()
        && input.width() == target.width()
        && is_solved(target)
        && input
            .cells()
            .iter()
            .zip(target.cells())
            .all(|(&a, &b)| a == 0 || a == b)
}

/// Candidate bookkeeping for backtracking.
struct Board {
    size: usize,
    b: usize,
    cells: Vec<u8>,
    rows: Vec<u32>,
    cols: Vec<u32>,
    boxes: Vec<u32>,
}

impl Board {
    fn new(g: &Grid) -> Option<Self> {
        let size = g.height();
        let b = box_side(size).ok()?;
        let mut board = Board {
            size,
            b,
            cells: g.cells().to_vec(),
            rows: vec![0; size],
            cols: vec![0; size],
            boxes: vec![0; size],
        };
        for i in 0..size * size {
            let v = board.cells[i];
            if v != 0 {
                let bit = 1u32 << v;
                let (r, c, x) = board.units(i);
                if usize::from(v) > size || (board.rows[r] | board.cols[c] | board.boxes[x]) & bit != 0 {
                    return None;
                }
                board.toggle(i, v);
            }
        }
        Some(board)
    }

    fn units(&self, i: usize) -> (usize, usize, usize) {
        let (r, c) = (i / self.size, i % self.size);
        (r, c, (r / self.b) * self.b + c / self.b)
    }

    fn toggle(&mut self, i: usize, v: u8) {
        let bit = 1u32 << v;
        let (r, c, x) = self.units(i);
        self.rows[r] ^= bit;
        self.cols[c] ^= bit;
        self.boxes[x] ^= bit;
    }

    fn candidates(&self, i: usize) -> u32 {
        let (r, c, x) = self.units(i);
        let all = ((1u32 << (self.size + 1)) - 1) & !1;
        all & !(self.rows[r] | self.cols[c] | self.boxes[x])
    }

    /// Blank cell with the fewest candidates.
    fn most_constrained(&self) -> Option<(usize, u32)> {
        let mut best: Option<(usize, u32)> = None;
        for i in 0..self.cells.len() {
            if self.cells[i] == 0 {
                let cand = self.candidates(i);
                if best.is_none_or(|(_, b)| cand.count_ones() < b.count_ones()) {
                    best = Some((i, cand));
                    if cand.count_ones() <= 1 {
                        break;
                    }
                }
            }
        }
        best
    }

    fn count(&mut self, limit: usize, found: &mut usize, first: &mut Option<Vec<u8>>) {
        let Some((i, cand)) = self.most_constrained() else {
            *found += 1;
            if first.is_none() {
                *first = Some(self.cells.clone());
            }
            return;
        };
        let mut m = cand;
        while m != 0 && *found < limit {
            let v = m.trailing_zeros() as u8;
            m &= m - 1;
            self.cells[i] = v;
            self.toggle(i, v);
            self.count(limit, found, first);
            self.toggle(i, v);
            self.cells[i] = 0;
        }
    }

    fn fill_random(&mut self, rng: &mut impl Rng) -> bool {
        let Some((i, cand)) = self.most_constrained() else {
            return true;
        };
        let mut digits: Vec<u8> = (1..=self.size as u8).filter(|&v| cand & (1 << v) != 0).collect();
        digits.shuffle(rng);
        for v in digits {
            self.cells[i] = v;
            self.toggle(i, v);
            if self.fill_random(rng) {
                return true;
            }
            self.toggle(i, v);
            self.cells[i] = 0;
        }
        false
    }
}

/// Number of solutions, stopping once `limit` are found.
pub fn count_solutions(g: &Grid, limit: usize) -> usize {
    let Some(mut board) = Board::new(g) else {
        return 0;
    };
    let mut found = 0;
    board.count(limit, &mut found, &mut None);
    found
}

/// Some solution, if one exists.
pub fn solve(g: &Grid) -> Option<Grid> {
    let mut board = Board::new(g)?;
    let (mut found, mut first) = (0, None);
    board.count(1, &mut found, &mut first);
    first.map(|cells| Grid::new(g.height(), g.width(), cells).expect("same shape"))
}

/// Uniformly shuffled complete grid.
pub fn random_solution(size: usize, rng: &mut impl Rng) -> Result<Grid> {
    box_side(size)?;
    let empty = Grid::filled(size, size, 0);
    let mut board = Board::new(&empty).expect("empty board is consistent");
    if !board.fill_random(rng) {
        return Err(Error::Data("no sudoku solution found".into()));
    }
    Grid::new(size, size, board.cells)
}

/// Whether naked and hidden singles alone complete the grid.
pub fn solves_by_singles(g: &Grid) -> bool {
    let Some(mut board) = Board::new(g) else {
        return false;
    };
    let size = board.size;
    let b = board.b;
    let units: Vec<Vec<usize>> = (0..size)
        .flat_map(|u| {
            let row = (0..size).map(|j| u * size + j).collect::<Vec<_>>();
            let col = (0..size).map(|j| j * size + u).collect::<Vec<_>>();
            let (bi, bj) = ((u / b) * b, (u % b) * b);
            let bx = (0..size).map(|j| (bi + j / b) * size + bj + j % b).collect::<Vec<_>>();
            [row, col, bx]
        })
        .collect();
    loop {
        let mut progress = false;
        for i in 0..size * size {
            if board.cells[i] == 0 {
                let cand = board.candidates(i);
                if cand == 0 {
                    return false;
                }
                if cand.count_ones() == 1 {
                    let v = cand.trailing_zeros() as u8;
                    board.cells[i] = v;
                    board.toggle(i, v);
                    progress = true;
                }
            }
        }
        for unit in &units {
            for v in 1..=size as u8 {
                let bit = 1u32 << v;
                if unit.iter().any(|&i| board.cells[i] == v) {
                    continue;
                }
                let spots: Vec<usize> = unit
                    .iter()
                    .copied()
                    .filter(|&i| board.cells[i] == 0 && board.candidates(i) & bit != 0)
                    .collect();
                if spots.len() == 1 {
                    board.cells[spots[0]] = v;
                    board.toggle(spots[0], v);
                    progress = true;
                }
            }
        }
        if board.cells.iter().all(|&c| c != 0) {
            return true;
        }
        if !progress {
            return false;
        }
    }
}

/// Parameters of [`sudoku_generate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuGenConfig {
    pub size: usize,
    pub count: usize,
    /// Inclusive range of clue counts.
    pub clue_range: (usize, usize),
    /// Also require that singles propagation alone cannot solve the puzzle.
    pub hard: bool,
    pub seed: u64,
}

impl SudokuGenConfig {
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        let clue_range = if size == 4 { (4, 8) } else { (22, 30) };
        SudokuGenConfig {
            size,
            count,
            clue_range,
            hard: false,
            seed,
        }
    }
}

const ATTEMPTS_PER_PUZZLE: usize = 2000;

/// Puzzles with exactly one solution, stored as the target. Inputs are distinct.
pub fn sudoku_generate(cfg: &SudokuGenConfig) -> Result<Vec<PuzzleInstance>> {
    let size = cfg.size;
    box_side(size)?;
    let (lo, hi) = cfg.clue_range;
    if lo > hi || lo < min_clues(size) || hi > size * size {
        return Err(Error::Config(format!(
            "clue range {lo}..={hi} infeasible for {size}x{size} (needs {}..={})",
            min_clues(size),
            size * size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while out.len() < cfg.count {
        attempts += 1;
        if attempts > ATTEMPTS_PER_PUZZLE * (cfg.count + 1) {
            return Err(Error::Data(format!(
                "gave up after {} attempts: clue range {lo}..={hi}{} too hard to hit",
                attempts - 1,
                if cfg.hard { " with the hard tier" } else { "" }
            )));
        }
        let solution = random_solution(size, &mut rng)?;
        let want = rng.random_range(lo..=hi);
        let mut puzzle = solution.clone();
        let mut order: Vec<usize> = (0..size * size).collect();
        order.shuffle(&mut rng);
        let mut clues = size * size;
        for i in order {
            if clues == want {
                break;
            }
            let (r, c) = (i / size, i % size);
            let v = puzzle.get(r, c);
            puzzle.set(r, c, 0);
            if count_solutions(&puzzle, 2) == 1 {
                clues -= 1;
            } else {
                puzzle.set(r, c, v);
            }
        }
        if clues > hi || (cfg.hard && solves_by_singles(&puzzle)) {
            continue;
        }
        if !seen.insert(puzzle.cells().to_vec()) {
            continue;
        }
        let mut p = PuzzleInstance::new(Task::Sudoku, puzzle, solution);
        p.puzzle_id = 0;
        out.push(p);
    }
    Ok(out)
}

/// A rule-preserving relabeling and reordering of a sudoku.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuTransform {
    /// `digits[d]` replaces digit `d`; index 0 (blank) maps to itself.
    pub digits: Vec<u8>,
    /// Output row `r` reads input row `rows[r]`.
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub transpose: bool,
}

impl SudokuTransform {
    pub fn identity(size: usize) -> Self {
        SudokuTransform {
            digits: (0..=size as u8).collect(),
            rows: (0..size).collect(),
            cols: (0..size).collect(),
            transpose: false,
        }
    }

    /// Uniform over digit permutations, band/stack orders, line orders within
    /// each band/stack, and transposition.
    pub fn random(size: usize, rng: &mut impl Rng) -> Result<Self> {
        let b = box_side(size)?;
        let mut digits: Vec<u8> = (1..=size as u8).collect();
        digits.shuffle(rng);
        digits.insert(0, 0);
        let lines = |rng: &mut dyn rand::RngCore| {
            let mut bands: Vec<usize> = (0..b).collect();
            bands.shuffle(rng);
            let mut order = Vec::with_capacity(size);
            for band in bands {
                let mut within: Vec<usize> = (0..b).collect();
                within.shuffle(rng);
                order.extend(within.into_iter().map(|i| band * b + i));
            }
            order
        };
        let rows = lines(rng);
        let cols = lines(rng);
        Ok(SudokuTransform {
            digits,
            rows,
            cols,
            transpose: rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, g: &Grid) -> Grid {
        let size = g.height();
        let mut out = Grid::filled(size, size, 0);
        for r in 0..size {
            for c in 0..size {
                let v = self.digits[usize::from(g.get(self.rows[r], self.cols[c]))];
                if self.transpose {
                    out.set(c, r, v);
                } else {
                    out.set(r, c, v);
                }
            }
        }
        out
    }
}

/// Applies one random transformation jointly to input and target.
pub fn sudoku_augment(p: &PuzzleInstance, seed: u64) -> Result<PuzzleInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = SudokuTransform::random(p.input.height(), &mut rng)?;
    Ok(PuzzleInstance {
        input: t.apply(&p.input),
        target: t.apply(&p.target),
        ..p.clone()
    })
}

/// Disjoint train/test splits. Each training puzzle appears `augmentations`
/// times (the original first); test puzzles are left as generated.
pub fn sudoku_splits(cfg: &SudokuGenConfig, train: usize, augmentations: usize) -> Result<(Dataset, Dataset)> {
    if train > cfg.count {
        return Err(Error::Config(format!("{train} training puzzles out of {}", cfg.count)));
    }
    let puzzles = sudoku_generate(cfg)?;
    let mut train_records = Vec::new();
    for (i, p) in puzzles[..train].iter().enumerate() {
        for a in 0..augmentations.max(1) {
            let mut q = if a == 0 {
                p.clone()
            } else {
                sudoku_augment(
                    p,
                    cfg.seed ^ ((i * 1_000_003 + a) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
                )?
            };
            q.augmentation_id = a;
            train_records.push(Record::from_instance(&q)?);
        }
    }
    let test_records = puzzles[train..]
        .iter()
        .map(Record::from_instance)
        .collect::<Result<Vec<_>>>()?;
    let shape = (cfg.size, cfg.size);
    let v = sudoku_vocab(cfg.size);
    Ok((
        Dataset::new(Task::Sudoku, shape, v, 1, train_records)?,
        Dataset::new(Task::Sudoku, shape, v, 1, test_records)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solver_counts_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_solution(9, &mut rng).unwrap();
        assert!(is_solved(&s));
        assert_eq!(count_solutions(&s, 2), 1);
        let empty4 = Grid::filled(4, 4, 0);
        assert_eq!(count_solutions(&empty4, 1000), 288);
        let mut bad = s.clone();
        bad.set(0, 0, s.get(0, 1));
        assert!(!is_consistent(&bad));
        assert_eq!(count_solutions(&bad, 2), 0);
    }

    #[test]
    fn twelve_clue_shidoku_is_almost_always_unique() {
        // only four blanks forming a swappable rectangle admit a second solution
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut unique = 0;
        for _ in 0..1000 {
            let s = random_solution(4, &mut rng).unwrap();
            let mut p = s.clone();
            let mut order: Vec<usize> = (0..16).collect();
            order.shuffle(&mut rng);
            for &i in &order[..4] {
                p.set(i / 4, i % 4, 0);
            }
            let n = count_solutions(&p, 3);
            assert!((1..=2).contains(&n));
            if n == 1 {
                unique += 1;
                assert_eq!(solve(&p).unwrap(), s);
            }
        }
        assert!(unique >= 950, "{unique} of 1000 unique");
    }

    #[test]
    fn generated_puzzles_are_unique_and_in_range() {
        let cfg = SudokuGenConfig {
            size: 4,
            count: 200,
            clue_range: (5, 7),
            hard: false,
            seed: 11,
        };
        let ps = sudoku_generate(&cfg).unwrap();
        assert_eq!(ps.len(), 200);
        for p in &ps {
            let clues = p.input.cells().iter().filter(|&&c| c != 0).count();
            assert!((5..=7).contains(&clues));
            assert!(is_solution_of(&p.input, &p.target));
            assert_eq!(count_solutions(&p.input, 2), 1);
        }
        assert_eq!(sudoku_generate(&cfg).unwrap(), ps);
    }

    #[test]
    fn infeasible_clue_range_errors() {
        let mut cfg = SudokuGenConfig::new(4, 1, 0);
        cfg.clue_range = (3, 5);
        assert!(sudoku_generate(&cfg).is_err());
        cfg.clue_range = (6, 5);
        assert!(sudoku_generate(&cfg).is_err());
        cfg.clue_range = (4, 17);
        assert!(sudoku_generate(&cfg).is_err());
    }

    #[test]
    fn hard_tier_defeats_singles() {
        let cfg = SudokuGenConfig {
            size: 9,
            count: 3,
            clue_range: (22, 28),
            hard: true,
            seed: 5,
        };
        for p in sudoku_generate(&cfg).unwrap() {
            assert!(!solves_by_singles(&p.input));
            assert_eq!(count_solutions(&p.input, 2), 1);
        }
    }

    #[test]
    fn splits_are_disjoint_and_augmented() {
        let cfg = SudokuGenConfig::new(4, 30, 2);
        let (train, test) = sudoku_splits(&cfg, 20, 4).unwrap();
        assert_eq!((train.len(), test.len()), (80, 10));
        let train_inputs: HashSet<_> = train.records.iter().map(|r| r.input.clone()).collect();
        assert!(test.records.iter().all(|r| !train_inputs.contains(&r.input)));
        for r in &train.records {
            let x = crate::data::decode(&r.input, Task::Sudoku, (4, 4)).unwrap();
            let y = crate::data::decode(&r.target, Task::Sudoku, (4, 4)).unwrap();
            assert!(is_solution_of(&x, &y));
        }
    }

    #[test]
    fn transforms_preserve_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_solution(9, &mut rng).unwrap();
        assert_eq!(SudokuTransform::identity(9).apply(&s), s);
        let mut swap = SudokuTransform::identity(9);
        swap.digits.swap(1, 2);
        assert!(is_solved(&swap.apply(&s)));
        for _ in 0..500 {
            let t = SudokuTransform::random(9, &mut rng).unwrap();
            assert!(is_solved(&t.apply(&s)));
        }
    }
}
