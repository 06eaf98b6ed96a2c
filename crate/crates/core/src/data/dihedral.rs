//! The eight symmetries of the square.
//!
//! Element `k` mirrors left-right when `k >= 4`, then turns the grid
//! `k % 4` quarter turns counter-clockwise. `k = 0` is the identity.

use crate::data::Grid;
use crate::error::{Error, Result};

fn rot90(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    let mut out = Grid::filled(w, h, 0);
    for i in 0..w {
        for j in 0..h {
            out.set(i, j, g.get(j, w - 1 - i));
        }
    }
    out
}

fn flip(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    let mut out = Grid::filled(h, w, 0);
    for i in 0..h {
        for j in 0..w {
            out.set(i, j, g.get(i, w - 1 - j));
        }
    }
    out
}

/// Applies element `k` of the dihedral group.
///
/// With `fixed_shape`, turns that would change a non-square grid's shape are
/// rejected.
pub fn dihedral_transform(g: &Grid, k: u8, fixed_shape: bool) -> Result<Grid> {
    if k > 7 {
        return Err(Error::Config(format!("dihedral element {k} outside 0..8")));
    }
    if fixed_shape && k % 2 == 1 && g.height() != g.width() {
        return Err(Error::Shape(format!(
            "quarter turn of a {}x{} grid changes its shape",
            g.height(),
            g.width()
        )));
    }
    let mut out = if k >= 4 { flip(g) } else { g.clone() };
    for _ in 0..k % 4 {
        out = rot90(&out);
    }
    Ok(out)
}

/// The element undoing `k`.
pub fn dihedral_inverse(k: u8) -> u8 {
    if k >= 4 {
        k
    } else {
        (4 - k) % 4
    }
}

/// Element equal to applying `a` then `b`, found by probing an asymmetric grid.
pub fn dihedral_compose(a: u8, b: u8) -> u8 {
    let probe = Grid::new(2, 3, vec![0, 1, 2, 3, 4, 5]).expect("2x3");
    let target = dihedral_transform(&dihedral_transform(&probe, a, false).unwrap(), b, false).unwrap();
    (0..8)
        .find(|&k| dihedral_transform(&probe, k, false).unwrap() == target)
        .expect("group is closed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(rng: &mut impl Rng, h: usize, w: usize) -> Grid {
        Grid::new(h, w, (0..h * w).map(|_| rng.random_range(0..10)).collect()).unwrap()
    }

    #[test]
    fn identity_and_four_turns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 3, 5);
        assert_eq!(dihedral_transform(&g, 0, false).unwrap(), g);
        let mut t = g.clone();
        for _ in 0..4 {
            t = dihedral_transform(&t, 1, false).unwrap();
        }
        assert_eq!(t, g);
    }

    #[test]
    fn closure_and_inverses_exhaustive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            let g = random_grid(&mut rng, h, w);
            let images: Vec<Grid> = (0..8).map(|k| dihedral_transform(&g, k, false).unwrap()).collect();
            for a in 0..8u8 {
                let inv = dihedral_inverse(a);
                assert_eq!(dihedral_transform(&images[a as usize], inv, false).unwrap(), g);
                for b in 0..8u8 {
                    let ab = dihedral_transform(&images[a as usize], b, false).unwrap();
                    assert_eq!(ab, images[dihedral_compose(a, b) as usize]);
                }
            }
        }
        // the 8 elements are distinct
        let probe = Grid::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let mut all: Vec<Grid> = (0..8).map(|k| dihedral_transform(&probe, k, false).unwrap()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn fixed_shape_rejects_quarter_turn_of_rectangle() {
        let g = Grid::filled(2, 3, 1);
        assert!(dihedral_transform(&g, 1, true).is_err());
        assert!(dihedral_transform(&g, 2, true).is_ok());
        assert!(dihedral_transform(&g, 8, false).is_err());
    }
}
