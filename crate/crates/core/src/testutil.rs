//! Oracles and random instance generators shared by unit tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::BoundingBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Determinant by cofactor expansion, independent of any factorization.
pub fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    match n {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => (0..n)
            .map(|j| {
                let minor = m.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * cofactor_det(&minor)
            })
            .sum(),
    }
}

pub fn sub(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// All subsets of `items`, as bit-mask expansions.
pub fn subsets_of(items: &[usize]) -> Vec<Vec<usize>> {
    (0..(1usize << items.len()))
        .map(|mask| {
            items
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &i)| i)
                .collect()
        })
        .collect()
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DMatrix<f64> {
    let mut v = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    for mut row in v.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    v
}

pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..20.0);
            let y = rng.random_range(0.0..20.0);
            let w = rng.random_range(2.0..15.0);
            let h = rng.random_range(2.0..15.0);
            BoundingBox::new(x, y, x + w, y + h).unwrap()
        })
        .collect()
}

pub fn random_quality(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.3..2.5)).collect()
}
