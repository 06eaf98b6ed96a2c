//! Token layouts.
//!
//! | task   | tokens                                                    |
//! |--------|-----------------------------------------------------------|
//! | sudoku | PAD 0, BLANK 1, digit `d` → `d + 1`                       |
//! | maze   | PAD 0, WALL 1, EMPTY 2, START 3, END 4, PATH 5            |
//! | arc    | PAD 0, color `c` → `c + 1`, on a 30×30 canvas             |

use crate::data::{Grid, PuzzleInstance, Task};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BLANK: usize = 1;

pub const WALL: u8 = 1;
pub const EMPTY: u8 = 2;
pub const START: u8 = 3;
pub const END: u8 = 4;
pub const PATH: u8 = 5;

pub const MAZE_VOCAB: usize = 6;
pub const ARC_VOCAB: usize = 11;
pub const ARC_CANVAS: usize = 30;

/// Vocabulary size of a sudoku of the given side length.
pub fn sudoku_vocab(size: usize) -> usize {
    size + 2
}

fn encode_grid(task: Task, g: &Grid, offset: (usize, usize)) -> Result<Vec<usize>> {
    match task {
        Task::Sudoku => {
            let size = g.height();
            g.cells()
                .iter()
                .map(|&c| {
                    if usize::from(c) > size {
                        Err(Error::Vocab(format!("sudoku cell {c} exceeds size {size}")))
                    } else {
                        Ok(usize::from(c) + 1)
                    }
                })
                .collect()
        }
        Task::Maze => g
            .cells()
            .iter()
            .map(|&c| {
                if (WALL..=PATH).contains(&c) {
                    Ok(usize::from(c))
                } else {
                    Err(Error::Vocab(format!("maze cell {c} is not a maze token")))
                }
            })
            .collect(),
        Task::Arc => {
            let (r0, c0) = offset;
            if r0 + g.height() > ARC_CANVAS || c0 + g.width() > ARC_CANVAS {
                return Err(Error::Data(format!(
                    "{}x{} grid at {offset:?} leaves the {ARC_CANVAS}x{ARC_CANVAS} canvas",
                    g.height(),
                    g.width()
                )));
            }
            let mut out = vec![PAD; ARC_CANVAS * ARC_CANVAS];
            for r in 0..g.height() {
                for c in 0..g.width() {
                    let v = g.get(r, c);
                    if v > 9 {
                        return Err(Error::Vocab(format!("arc color {v}")));
                    }
                    out[(r0 + r) * ARC_CANVAS + c0 + c] = usize::from(v) + 1;
                }
            }
            Ok(out)
        }
    }
}

/// Row-major tokens of an instance's input and target.
pub fn encode(p: &PuzzleInstance) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok((
        encode_grid(p.task, &p.input, p.offset)?,
        encode_grid(p.task, &p.target, p.offset)?,
    ))
}

/// Inverse of [`encode`] on the unpadded region.
///
/// `shape` is the grid shape for sudoku and maze; ARC grids are recovered
/// from the bounding box of non-PAD tokens.
pub fn decode(tokens: &[usize], task: Task, shape: (usize, usize)) -> Result<Grid> {
    match task {
        Task::Sudoku | Task::Maze => {
            let (h, w) = shape;
            if tokens.len() != h * w {
                return Err(Error::Shape(format!("{} tokens for {h}x{w}", tokens.len())));
            }
            let limit = if task == Task::Sudoku { h + 1 } else { usize::from(PATH) };
            let cells = tokens
                .iter()
                .map(|&t| {
                    if t == PAD || t > limit {
                        Err(Error::Vocab(format!("token {t} is not a {} cell", task.as_str())))
                    } else if task == Task::Sudoku {
                        Ok((t - 1) as u8)
                    } else {
                        Ok(t as u8)
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            Grid::new(h, w, cells)
        }
        Task::Arc => {
            if tokens.len() != ARC_CANVAS * ARC_CANVAS {
                return Err(Error::Shape(format!("{} tokens for the arc canvas", tokens.len())));
            }
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for (i, &t) in tokens.iter().enumerate() {
                if t != PAD {
                    let (r, c) = (i / ARC_CANVAS, i % ARC_CANVAS);
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
            if r0 == usize::MAX {
                return Err(Error::Data("empty arc canvas".into()));
            }
            let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
            let mut cells = Vec::with_capacity(h * w);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let t = tokens[r * ARC_CANVAS + c];
                    if t == PAD || t > 10 {
                        return Err(Error::Data(format!("token {t} inside arc grid at ({r}, {c})")));
                    }
                    cells.push((t - 1) as u8);
                }
            }
            Grid::new(h, w, cells)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sudoku_token_map() {
        let mut cells = vec![0u8; 81];
        cells[0] = 9;
        let g = Grid::new(9, 9, cells).unwrap();
        let p = PuzzleInstance::new(Task::Sudoku, g.clone(), g.clone());
        let (x, _) = encode(&p).unwrap();
        assert_eq!(x[0], 10);
        assert_eq!(x[1], BLANK);
        assert_eq!(decode(&x, Task::Sudoku, (9, 9)).unwrap(), g);
    }

    #[test]
    fn out_of_vocab_rejected() {
        assert!(decode(&[0, 2, 3, 4], Task::Sudoku, (2, 2)).is_err());
        assert!(decode(&[6, 2, 3, 4], Task::Maze, (2, 2)).is_err());
        let g = Grid::new(1, 1, vec![11]).unwrap();
        assert!(encode(&PuzzleInstance::new(Task::Arc, g.clone(), g)).is_err());
    }

    #[test]
    fn arc_offset_and_overflow() {
        let g = Grid::new(2, 3, vec![0, 1, 2, 3, 4, 9]).unwrap();
        let mut p = PuzzleInstance::new(Task::Arc, g.clone(), g.clone());
        p.offset = (5, 27);
        let (x, _) = encode(&p).unwrap();
        assert_eq!(x[5 * 30 + 27], 1);
        assert_eq!(decode(&x, Task::Arc, (30, 30)).unwrap(), g);
        p.offset = (5, 28);
        assert!(encode(&p).is_err());
    }

    proptest! {
        #[test]
        fn arc_round_trip(h in 1usize..=30, w in 1usize..=30, seed in any::<u64>()) {
            let cells: Vec<u8> = (0..h * w).map(|i| ((seed >> (i % 61)) as u8 ^ i as u8) % 10).collect();
            let g = Grid::new(h, w, cells).unwrap();
            let mut p = PuzzleInstance::new(Task::Arc, g.clone(), g.clone());
            p.offset = ((seed as usize) % (31 - h), (seed as usize / 31) % (31 - w));
            let (x, y) = encode(&p).unwrap();
            prop_assert_eq!(decode(&x, Task::Arc, (30, 30)).unwrap(), g.clone());
            prop_assert_eq!(decode(&y, Task::Arc, (30, 30)).unwrap(), g);
        }

        #[test]
        fn maze_round_trip(cells in proptest::collection::vec(1u8..=5, 12)) {
            let g = Grid::new(3, 4, cells).unwrap();
            let (x, _) = encode(&PuzzleInstance::new(Task::Maze, g.clone(), g.clone())).unwrap();
            prop_assert_eq!(decode(&x, Task::Maze, (3, 4)).unwrap(), g);
        }
    }
}
