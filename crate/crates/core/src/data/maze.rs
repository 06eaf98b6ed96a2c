//! Perfect mazes carved as random spanning trees, with a marked shortest path.

use std::collections::{HashSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dihedral::dihedral_transform;
use crate::data::vocab::{EMPTY, END, MAZE_VOCAB, PATH, START, WALL};
use crate::data::{Dataset, Grid, PuzzleInstance, Record, Task};
use crate::error::{Error, Result};

/// Parameters of [`maze_generate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeGenConfig {
    pub h: usize,
    pub w: usize,
    /// Shortest START→END path must have at least this many moves.
    pub min_path_len: usize,
    pub count: usize,
    pub seed: u64,
    /// Mazes that may be discarded per kept maze before giving up.
    pub rejection_budget: usize,
}

impl MazeGenConfig {
    /// 12×12 with the long-path threshold scaled from 110 on 30×30.
    pub fn desk(count: usize, seed: u64) -> Self {
        MazeGenConfig {
            h: 12,
            w: 12,
            min_path_len: (110.0f64 * 12.0 / 30.0).ceil() as usize,
            count,
            seed,
            rejection_budget: 200,
        }
    }
}

/// Carves passages between lattice cells at even coordinates with a
/// randomized depth-first search.
pub fn carve(h: usize, w: usize, rng: &mut impl Rng) -> Grid {
    let mut g = Grid::filled(h, w, WALL);
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut visited = vec![false; nh * nw];
    let start = (rng.random_range(0..nh), rng.random_range(0..nw));
    let mut stack = vec![start];
    visited[start.0 * nw + start.1] = true;
    g.set(2 * start.0, 2 * start.1, EMPTY);
    while let Some(&(r, c)) = stack.last() {
        let mut next = Vec::with_capacity(4);
        if r > 0 && !visited[(r - 1) * nw + c] {
            next.push((r - 1, c));
        }
        if r + 1 < nh && !visited[(r + 1) * nw + c] {
            next.push((r + 1, c));
        }
        if c > 0 && !visited[r * nw + c - 1] {
            next.push((r, c - 1));
        }
        if c + 1 < nw && !visited[r * nw + c + 1] {
            next.push((r, c + 1));
        }
        match next.choose(rng) {
            Some(&(nr, nc)) => {
                visited[nr * nw + nc] = true;
                g.set(r + nr, c + nc, EMPTY);
                g.set(2 * nr, 2 * nc, EMPTY);
                stack.push((nr, nc));
            }
            None => {
                stack.pop();
            }
        }
    }
    g
}

fn neighbors(g: &Grid, i: usize) -> impl Iterator<Item = usize> + '_ {
    let (h, w) = (g.height(), g.width());
    let (r, c) = (i / w, i % w);
    let cand = [
        (r > 0).then(|| i - w),
        (r + 1 < h).then(|| i + w),
        (c > 0).then(|| i - 1),
        (c + 1 < w).then(|| i + 1),
    ];
    cand.into_iter().flatten().filter(move |&j| g.cells()[j] != WALL)
}

/// BFS distances (moves) from `from` over non-wall cells, plus parents.
pub fn bfs(g: &Grid, from: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let n = g.cells().len();
    let mut dist = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut q = VecDeque::new();
    dist[from] = Some(0);
    q.push_back(from);
    while let Some(i) = q.pop_front() {
        let d = dist[i].unwrap();
        for j in neighbors(g, i) {
            if dist[j].is_none() {
                dist[j] = Some(d + 1);
                parent[j] = i;
                q.push_back(j);
            }
        }
    }
    (dist, parent)
}

/// Position of the first cell holding `v`.
pub fn find(g: &Grid, v: u8) -> Option<usize> {
    g.cells().iter().position(|&c| c == v)
}

/// Number of PATH cells plus one, i.e. the moves along the marked path.
pub fn marked_path_len(target: &Grid) -> usize {
    target.cells().iter().filter(|&&c| c == PATH).count() + 1
}

/// Kept mazes whose START→END shortest path has at least `min_path_len` moves.
/// The target marks the cells strictly between START and END with PATH.
pub fn maze_generate(cfg: &MazeGenConfig) -> Result<Vec<PuzzleInstance>> {
    if cfg.h < 2 || cfg.w < 2 || cfg.min_path_len == 0 || cfg.min_path_len >= cfg.h * cfg.w {
        return Err(Error::Config(format!(
            "min path length {} unreachable in a {}x{} maze",
            cfg.min_path_len, cfg.h, cfg.w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    let mut seen = HashSet::new();
    let mut rejected = 0usize;
    while out.len() < cfg.count {
        if rejected > cfg.rejection_budget * (out.len() + 1) {
            return Err(Error::Data(format!(
                "rejected {rejected} mazes without reaching path length {} in {}x{}",
                cfg.min_path_len, cfg.h, cfg.w
            )));
        }
        let mut g = carve(cfg.h, cfg.w, &mut rng);
        let open: Vec<usize> = (0..g.cells().len()).filter(|&i| g.cells()[i] == EMPTY).collect();
        let start = *open.choose(&mut rng).expect("carving opens cells");
        let (dist, parent) = bfs(&g, start);
        let far: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&i| dist[i].is_some_and(|d| d >= cfg.min_path_len))
            .collect();
        let Some(&end) = far.choose(&mut rng) else {
            rejected += 1;
            continue;
        };
        let w = g.width();
        g.set(start / w, start % w, START);
        g.set(end / w, end % w, END);
        let mut target = g.clone();
        let mut i = parent[end];
        while i != start {
            target.set(i / w, i % w, PATH);
            i = parent[i];
        }
        if !seen.insert(g.cells().to_vec()) {
            rejected += 1;
            continue;
        }
        out.push(PuzzleInstance::new(Task::Maze, g, target));
    }
    Ok(out)
}

/// Disjoint train/test splits; training mazes are repeated under
/// `augmentations` distinct dihedral elements (identity first).
pub fn maze_splits(cfg: &MazeGenConfig, train: usize, augmentations: usize) -> Result<(Dataset, Dataset)> {
    if train > cfg.count || augmentations > 8 {
        return Err(Error::Config(format!(
            "{train} training mazes out of {} with {augmentations} of 8 symmetries",
            cfg.count
        )));
    }
    let mazes = maze_generate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let square = cfg.h == cfg.w;
    let mut train_records = Vec::new();
    for m in &mazes[..train] {
        let mut ks: Vec<u8> = (1..8).filter(|k| square || k % 2 == 0).collect();
        ks.shuffle(&mut rng);
        ks.insert(0, 0);
        for (a, &k) in ks.iter().take(augmentations.max(1)).enumerate() {
            let mut p = m.clone();
            p.input = dihedral_transform(&m.input, k, true)?;
            p.target = dihedral_transform(&m.target, k, true)?;
            p.augmentation_id = a;
            train_records.push(Record::from_instance(&p)?);
        }
    }
    let test_records = mazes[train..]
        .iter()
        .map(Record::from_instance)
        .collect::<Result<Vec<_>>>()?;
    let shape = (cfg.h, cfg.w);
    Ok((
        Dataset::new(Task::Maze, shape, MAZE_VOCAB, 1, train_records)?,
        Dataset::new(Task::Maze, shape, MAZE_VOCAB, 1, test_records)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent shortest-path oracle: Bellman-style relaxation to a fixed point.
    fn oracle_distance(g: &Grid, from: usize, to: usize) -> Option<usize> {
        let (h, w) = (g.height(), g.width());
        let n = h * w;
        let mut d = vec![usize::MAX; n];
        d[from] = 0;
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                if g.cells()[i] == WALL || d[i] == usize::MAX {
                    continue;
                }
                let (r, c) = (i / w, i % w);
                let adj = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in adj {
                    if nr < h && nc < w && g.get(nr, nc) != WALL && d[i] + 1 < d[nr * w + nc] {
                        d[nr * w + nc] = d[i] + 1;
                        changed = true;
                    }
                }
            }
        }
        (d[to] != usize::MAX).then_some(d[to])
    }

    #[test]
    fn desk_mazes_match_oracle() {
        let cfg = MazeGenConfig::desk(40, 4);
        assert_eq!(cfg.min_path_len, 44);
        let ms = maze_generate(&cfg).unwrap();
        for m in &ms {
            let count = |g: &Grid, v| g.cells().iter().filter(|&&c| c == v).count();
            assert_eq!((count(&m.input, START), count(&m.input, END)), (1, 1));
            assert_eq!(count(&m.input, PATH), 0);
            let s = find(&m.input, START).unwrap();
            let e = find(&m.input, END).unwrap();
            let d = oracle_distance(&m.input, s, e).unwrap();
            assert!(d >= 44);
            assert_eq!(marked_path_len(&m.target), d);
            // the marked cells form a connected walk from START to END
            let mut on_path = m.target.clone();
            for (i, c) in m.target.cells().iter().enumerate() {
                let v = if matches!(*c, PATH | START | END) { EMPTY } else { WALL };
                on_path.set(i / 12, i % 12, v);
            }
            assert_eq!(oracle_distance(&on_path, s, e), Some(d));
        }
        assert_eq!(maze_generate(&cfg).unwrap(), ms);
    }

    #[test]
    fn unreachable_threshold_errors() {
        let mut cfg = MazeGenConfig::desk(1, 0);
        cfg.min_path_len = 144;
        assert!(maze_generate(&cfg).is_err());
        cfg.min_path_len = 100;
        cfg.rejection_budget = 3;
        assert!(matches!(maze_generate(&cfg), Err(Error::Data(_))));
    }
}
