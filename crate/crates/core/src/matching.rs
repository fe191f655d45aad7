//! Minimum-cost assignment and representative-candidate selection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, GroundTruthObject};
use crate::scene::Candidate;

/// A one-to-one assignment of rows to columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Kuhn-Munkres with potentials for `rows <= cols`. Returns the column
/// assigned to each row.
fn solve_rows_le_cols(cost: &[Vec<f64>], n_cols: usize) -> Vec<usize> {
    let n = cost.len();
    let m = n_cols;
    debug_assert!(n <= m);
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn optimal_cost(cost: &[Vec<f64>], n_cols: usize) -> f64 {
    if cost.is_empty() {
        return 0.0;
    }
    solve_rows_le_cols(cost, n_cols)
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum()
}

/// Among optimal assignments, picks for each short-side index in turn the
/// smallest long-side index that still admits an optimal completion.
fn canonical_rows_le_cols(cost: &[Vec<f64>], n_cols: usize, tol: f64) -> Vec<usize> {
    let n = cost.len();
    let mut free_cols: Vec<usize> = (0..n_cols).collect();
    let mut out = Vec::with_capacity(n);
    let mut remaining = optimal_cost(cost, n_cols);
    for i in 0..n {
        let rest_rows = &cost[i + 1..];
        let mut chosen = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let sub_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let sub: Vec<Vec<f64>> = rest_rows
                .iter()
                .map(|row| sub_cols.iter().map(|&c| row[c]).collect())
                .collect();
            let total = cost[i][j] + optimal_cost(&sub, sub_cols.len());
            if total <= remaining + tol {
                chosen = Some((slot, j, total - cost[i][j]));
                break;
            }
        }
        // the unrestricted optimum is always attainable from some column
        let (slot, j, rest) = chosen.expect("optimal completion must exist");
        out.push(j);
        free_cols.remove(slot);
        remaining = rest;
    }
    out
}

/// Minimum-cost one-to-one assignment covering `min(rows, cols)` pairs.
///
/// Ties between optimal assignments are broken deterministically: walking
/// the shorter side in index order, each element takes the smallest index
/// on the longer side that still allows an optimal completion.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Assignment> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("assignment cost matrix has non-finite entries"));
    }
    let (m, n) = cost.shape();
    if m == 0 || n == 0 {
        return Ok(Assignment {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    let tol = 1e-9 * cost.amax() * m.min(n) as f64;
    let mut pairs = if m <= n {
        let rows: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|j| cost[(i, j)]).collect()).collect();
        canonical_rows_le_cols(&rows, n, tol)
            .into_iter()
            .enumerate()
            .collect::<Vec<_>>()
    } else {
        let rows: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| cost[(i, j)]).collect()).collect();
        canonical_rows_le_cols(&rows, m, tol)
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect::<Vec<_>>()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// `(candidate, ground truth)` pairs from a `1 − IoU` assignment, dropping
/// pairs with zero overlap. With `class_filter`, only candidates predicting
/// that class and ground truths of that class take part.
pub fn match_candidates(
    candidates: &[Candidate],
    gts: &[GroundTruthObject],
    class_filter: Option<u32>,
) -> Result<Vec<(usize, usize)>> {
    let cand_idx: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| class_filter.is_none_or(|k| c.predicted_class() == k))
        .map(|(i, _)| i)
        .collect();
    let gt_idx: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| class_filter.is_none_or(|k| g.class_id == k))
        .map(|(i, _)| i)
        .collect();
    if cand_idx.is_empty() || gt_idx.is_empty() {
        return Ok(vec![]);
    }
    let overlap = DMatrix::from_fn(cand_idx.len(), gt_idx.len(), |i, j| {
        iou(&candidates[cand_idx[i]].bbox, &gts[gt_idx[j]].bbox)
    });
    let cost = overlap.map(|o| 1.0 - o);
    let assignment = hungarian(&cost)?;
    Ok(assignment
        .pairs
        .into_iter()
        .filter(|&(i, j)| overlap[(i, j)] > 0.0)
        .map(|(i, j)| (cand_idx[i], gt_idx[j]))
        .collect())
}

/// Indices of the candidates closest to the ground truth (sorted).
///
/// Without a class filter this is the all-objects representative set; with
/// one it is the per-category set.
pub fn match_representatives(
    candidates: &[Candidate],
    gts: &[GroundTruthObject],
    class_filter: Option<u32>,
) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = match_candidates(candidates, gts, class_filter)?
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    idx.sort_unstable();
    Ok(idx)
}
