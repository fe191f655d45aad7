//! Seeded consistency checks against brute-force enumeration.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idpp::config::Config;
use idpp::dpp::{build_kernel, build_similarity, log_normalizer, FeatureMatrix, RepairPolicy, SimilarityMatrix};
use idpp::geometry::{iou_matrix, BoundingBox};
use idpp::inference::{exact_map, idpp_greedy, subset_cost};
use idpp::matching::hungarian;

pub struct CheckLine {
    pub name: &'static str,
    pub instances: usize,
    pub detail: String,
    pub passed: bool,
}

fn random_similarity(rng: &mut ChaCha8Rng, n: usize, config: &Config) -> anyhow::Result<SimilarityMatrix> {
    let r = rng.random_range(1..=8);
    let f = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    let boxes = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..30.0);
            let y = rng.random_range(0.0..30.0);
            BoundingBox::from_xywh(x, y, rng.random_range(4.0..20.0), rng.random_range(4.0..20.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_similarity(
        &FeatureMatrix::from_raw(&f)?,
        &iou_matrix(&boxes),
        config.lambda,
        RepairPolicy::EigenClip(config.psd_epsilon),
    )?)
}

fn random_quality(rng: &mut ChaCha8Rng, n: usize, beta: f64) -> Vec<f64> {
    (0..n).map(|_| (beta * rng.random_range(0.0..1.0)).exp()).collect()
}

fn subset(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

fn det_of(m: &DMatrix<f64>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]).determinant()
}

/// `Σ_Y det(L_Y)` by enumeration against the library's `log det(L + I)`.
pub fn normalization(instances: usize, config: &Config) -> anyhow::Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let s = random_similarity(&mut rng, n, config)?;
        let q = random_quality(&mut rng, n, config.beta);
        let l = build_kernel(&s, &q)?;
        let total: f64 = (0..1usize << n).map(|mask| det_of(l.matrix(), &subset(mask, n))).sum();
        let expected = log_normalizer(&l)?.exp();
        worst = worst.max((total - expected).abs() / expected);
    }
    Ok(CheckLine {
        name: "dpp normalization",
        instances,
        detail: format!("max relative error {worst:.2e}"),
        passed: worst < 1e-10,
    })
}

/// Greedy never beats the exhaustive optimum and no single addition
/// improves the greedy set.
pub fn greedy_dominance(instances: usize, config: &Config) -> anyhow::Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
    let mut violations = 0;
    let mut exact_hits = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=10);
        let s = random_similarity(&mut rng, n, config)?;
        let q = random_quality(&mut rng, n, config.beta);
        let greedy = idpp_greedy(&s, &q)?;
        let best = exact_map(&s, &q, n)?;
        let slack = 1e-9 * best.final_cost.abs().max(1.0);
        if greedy.final_cost > best.final_cost + slack {
            violations += 1;
        }
        for j in (0..n).filter(|j| !greedy.selected.contains(j)) {
            let mut y = greedy.selected.clone();
            y.push(j);
            if subset_cost(s.matrix(), &q, &y)? > greedy.final_cost + slack {
                violations += 1;
            }
        }
        exact_hits += ((greedy.final_cost - best.final_cost).abs() <= slack) as usize;
    }
    Ok(CheckLine {
        name: "greedy vs exact",
        instances,
        detail: format!("{violations} violations, greedy optimal on {exact_hits}"),
        passed: violations == 0,
    })
}

fn min_over_permutations(cost: &DMatrix<f64>) -> f64 {
    fn go(cost: &DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[(row, c)], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

/// Assignment cost against brute force over integer-valued matrices.
pub fn assignment(instances: usize, config: &Config) -> anyhow::Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(2));
    let mut mismatches = 0;
    for _ in 0..instances {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(rows..=6);
        let cost = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-20..=20) as f64);
        let a = hungarian(&cost)?;
        if a.total_cost != min_over_permutations(&cost) {
            mismatches += 1;
        }
    }
    Ok(CheckLine {
        name: "hungarian vs brute force",
        instances,
        detail: format!("{mismatches} mismatches"),
        passed: mismatches == 0,
    })
}

pub fn run_all(instances: usize, config: &Config) -> anyhow::Result<Vec<CheckLine>> {
    Ok(vec![
        normalization(instances, config)?,
        greedy_dominance(instances, config)?,
        assignment(instances, config)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_permutation_minimum() {
        let cost = DMatrix::from_row_slice(2, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0]);
        assert_eq!(min_over_permutations(&cost), 3.0);
    }

    #[test]
    fn default_checks_pass() {
        let lines = run_all(20, &Config::default()).unwrap();
        assert!(lines.iter().all(|l| l.passed));
    }
}
