//! Subset selection: greedy MAP over the detection kernel, an exhaustive
//! oracle for small inputs, and per-class NMS.
//!
//! The cost of a set is `Σ_{i∈Y} 2·ln q_i + ln det(S_Y)`, the log of the
//! unnormalized DPP probability. The empty set costs 0 and a set whose
//! similarity submatrix is not positive definite costs `-inf`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dpp::{build_similarity, check_quality, FeatureMatrix, RepairPolicy, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::evaluation::Detection;
use crate::geometry::{iou, iou_matrix, BoundingBox};
use crate::linalg::{self, check_indices, submatrix, SINGULAR_PIVOT_RTOL};
use crate::scene::Scene;

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_NMS_TAU: f64 = 0.5;
pub const DEFAULT_EXACT_N_MAX: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Idpp,
    Exact,
    Nms,
}

/// A selected subset with its cost trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    /// Indices in the order they were chosen.
    pub selected: Vec<usize>,
    pub final_cost: f64,
    /// Cost after each accepted addition (greedy only).
    pub step_costs: Vec<f64>,
}

/// `q = exp(β·score)`.
pub fn quality_transform(score: f64, beta: f64) -> f64 {
    (beta * score).exp()
}

/// How detection scores become DPP qualities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "beta")]
pub enum QualityMode {
    Exponential(f64),
    /// Scores used as qualities directly.
    Raw,
}

impl Default for QualityMode {
    fn default() -> Self {
        QualityMode::Exponential(DEFAULT_BETA)
    }
}

pub fn qualities(scores: &[f64], mode: QualityMode) -> Vec<f64> {
    match mode {
        QualityMode::Exponential(beta) => scores.iter().map(|&s| quality_transform(s, beta)).collect(),
        QualityMode::Raw => scores.to_vec(),
    }
}

/// `Σ 2·ln q_i + ln det(S_Y)`, or `-inf` when `S_Y` is not positive definite.
pub fn subset_cost(s: &DMatrix<f64>, q: &[f64], y: &[usize]) -> Result<f64> {
    check_quality(q, s.nrows())?;
    check_indices(y, q.len())?;
    Ok(cost_unchecked(s, q, y))
}

fn cost_unchecked(s: &DMatrix<f64>, q: &[f64], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    match linalg::cholesky(&submatrix(s, y)) {
        Some(l) => {
            let logdet: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            y.iter().map(|&i| 2.0 * q[i].ln()).sum::<f64>() + logdet
        }
        None => f64::NEG_INFINITY,
    }
}

/// Greedy MAP: starting from the empty set, add the candidate whose
/// inclusion gives the highest cost while that cost strictly exceeds the
/// current one. Ties go to the smallest index.
pub fn idpp_greedy(s: &SimilarityMatrix, q: &[f64]) -> Result<SelectionResult> {
    greedy_on(s.matrix(), q)
}

fn greedy_on(s: &DMatrix<f64>, q: &[f64]) -> Result<SelectionResult> {
    let n = s.nrows();
    check_quality(q, n)?;
    let log_q2: Vec<f64> = q.iter().map(|x| 2.0 * x.ln()).collect();
    let mut selected: Vec<usize> = Vec::new();
    let mut in_set = vec![false; n];
    // rows of the Cholesky factor of S_Y, one per selected item
    let mut factor: Vec<Vec<f64>> = Vec::new();
    let mut cost = 0.0;
    let mut step_costs = Vec::new();

    loop {
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for j in (0..n).filter(|&j| !in_set[j]) {
            let Some((row, gain)) = extend_factor(s, &selected, &factor, j) else {
                continue;
            };
            let candidate = cost + log_q2[j] + gain;
            if best.as_ref().map_or(true, |(_, c, _)| candidate > *c) {
                best = Some((j, candidate, row));
            }
        }
        match best {
            Some((j, c, row)) if c > cost => {
                selected.push(j);
                in_set[j] = true;
                factor.push(row);
                cost = c;
                step_costs.push(c);
            }
            _ => break,
        }
    }
    Ok(SelectionResult {
        method: SelectionMethod::Idpp,
        selected,
        final_cost: cost,
        step_costs,
    })
}

/// New factor row for appending `j` to `selected`, and the log of the Schur
/// complement `S_jj − ‖c‖²` it contributes to `ln det`. `None` when the
/// extended matrix is not positive definite.
fn extend_factor(
    s: &DMatrix<f64>,
    selected: &[usize],
    factor: &[Vec<f64>],
    j: usize,
) -> Option<(Vec<f64>, f64)> {
    let k = selected.len();
    let mut row = vec![0.0; k + 1];
    let mut sq = 0.0;
    for a in 0..k {
        let mut v = s[(j, selected[a])];
        for b in 0..a {
            v -= factor[a][b] * row[b];
        }
        v /= factor[a][a];
        row[a] = v;
        sq += v * v;
    }
    let d = s[(j, j)] - sq;
    let max_diag = selected.iter().chain(std::iter::once(&j)).map(|&i| s[(i, i)]).fold(0.0, f64::max);
    if !(d > SINGULAR_PIVOT_RTOL * max_diag) {
        return None;
    }
    row[k] = d.sqrt();
    Some((row, d.ln()))
}

/// Exhaustive maximization of the cost over all `2ⁿ` subsets. The first
/// maximizer in bit-mask order wins ties.
pub fn exact_map(s: &SimilarityMatrix, q: &[f64], n_max: usize) -> Result<SelectionResult> {
    exact_on(s.matrix(), q, n_max)
}

fn exact_on(s: &DMatrix<f64>, q: &[f64], n_max: usize) -> Result<SelectionResult> {
    let n = s.nrows();
    check_quality(q, n)?;
    if n > n_max || n >= usize::BITS as usize {
        return Err(Error::TooLarge { n, n_max });
    }
    let mut best_mask = 0usize;
    let mut best = 0.0;
    let mut y = Vec::with_capacity(n);
    for mask in 1..(1usize << n) {
        y.clear();
        y.extend((0..n).filter(|b| mask & (1 << b) != 0));
        let c = cost_unchecked(s, q, &y);
        if c > best {
            best = c;
            best_mask = mask;
        }
    }
    Ok(SelectionResult {
        method: SelectionMethod::Exact,
        selected: (0..n).filter(|b| best_mask & (1 << b) != 0).collect(),
        final_cost: best,
        step_costs: Vec::new(),
    })
}

/// A box with its detection score and class for NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: u32,
}

/// Per-class greedy suppression: visit boxes by descending score (index
/// order on ties), keep a box unless it overlaps a kept box of its class by
/// IoU > `tau`. `final_cost` is 0 since NMS has no objective.
pub fn nms(boxes: &[ScoredBox], tau: f64) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("NMS threshold {tau} outside [0, 1]")));
    }
    if let Some(i) = boxes.iter().position(|b| !b.score.is_finite()) {
        return Err(Error::invalid(format!("score of box {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| boxes[k].class_id == boxes[i].class_id && iou(&boxes[k].bbox, &boxes[i].bbox) > tau);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(SelectionResult {
        method: SelectionMethod::Nms,
        selected: kept,
        final_cost: 0.0,
        step_costs: Vec::new(),
    })
}

/// Similarity matrix and qualities of a scene's candidates, using each
/// candidate's best class score.
pub fn scene_inputs(scene: &Scene, config: &Config, mode: QualityMode) -> Result<(SimilarityMatrix, Vec<f64>)> {
    scene.validate()?;
    let features: Vec<Vec<f64>> = scene.candidates.iter().map(|c| c.feature.clone()).collect();
    let v = FeatureMatrix::from_rows(&features)?;
    let s = build_similarity(&v, &iou_matrix(&scene.boxes()), config.lambda, RepairPolicy::EigenClip(config.psd_epsilon))?;
    let scores: Vec<f64> = scene.candidates.iter().map(|c| c.max_score()).collect();
    Ok((s, qualities(&scores, mode)))
}

/// Runs one selection method on a scene.
pub fn select_scene(scene: &Scene, method: SelectionMethod, config: &Config, mode: QualityMode) -> Result<SelectionResult> {
    if scene.candidates.is_empty() {
        scene.validate()?;
        return Ok(SelectionResult { method, selected: Vec::new(), final_cost: 0.0, step_costs: Vec::new() });
    }
    match method {
        SelectionMethod::Nms => {
            scene.validate()?;
            let boxes: Vec<ScoredBox> = scene
                .candidates
                .iter()
                .map(|c| ScoredBox { bbox: c.bbox, score: c.max_score(), class_id: c.predicted_class() })
                .collect();
            nms(&boxes, config.nms_tau)
        }
        SelectionMethod::Idpp => {
            let (s, q) = scene_inputs(scene, config, mode)?;
            idpp_greedy(&s, &q)
        }
        SelectionMethod::Exact => {
            let n = scene.candidates.len();
            if n > DEFAULT_EXACT_N_MAX {
                return Err(Error::TooLarge { n, n_max: DEFAULT_EXACT_N_MAX });
            }
            let (s, q) = scene_inputs(scene, config, mode)?;
            exact_map(&s, &q, DEFAULT_EXACT_N_MAX)
        }
    }
}

/// Selected candidates as detections labelled with their best class.
pub fn selection_detections(scene: &Scene, selection: &SelectionResult) -> Vec<Detection> {
    selection
        .selected
        .iter()
        .map(|&i| {
            let c = &scene.candidates[i];
            Detection { image_id: scene.image_id, bbox: c.bbox, score: c.max_score(), class_id: c.predicted_class() }
        })
        .collect()
}
