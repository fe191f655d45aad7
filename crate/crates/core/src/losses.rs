//! Sparse-score and instance-aware DPP losses plus the standard
//! classification/regression terms they are trained alongside.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dpp::KernelMatrix;
use crate::error::{Error, Result};
use crate::geometry::{iou, GroundTruthObject};
use crate::linalg::{self, check_indices, submatrix};
use crate::matching::match_representatives;
use crate::scene::Candidate;

/// Default number of top categories expanded per RoI (VOC-like data).
pub const DEFAULT_TOP_M: usize = 5;
/// Top categories per RoI for COCO-like data.
pub const COCO_TOP_M: usize = 10;

/// Top-m expansion of per-RoI class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopM {
    /// `(roi, class)` for every expanded entry, RoI-major, best class first.
    pub entries: Vec<(usize, usize)>,
    /// Entry indices of each RoI's top-1 class.
    pub y_pos: Vec<usize>,
    /// All entry indices.
    pub y_m: Vec<usize>,
}

/// Expands each RoI into its `m` best-scoring classes. Ties at equal score
/// go to the lower class id.
pub fn select_top_m(scores: &[Vec<f64>], m: usize) -> Result<TopM> {
    let mut entries = Vec::with_capacity(scores.len() * m);
    let mut y_pos = Vec::with_capacity(scores.len());
    for (roi, row) in scores.iter().enumerate() {
        if m == 0 || m > row.len() {
            return Err(Error::invalid(format!(
                "top-m requires 1 <= m <= n_classes, got m = {m} with {} classes",
                row.len()
            )));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        y_pos.push(entries.len());
        entries.extend(order[..m].iter().map(|&k| (roi, k)));
    }
    let y_m = (0..entries.len()).collect();
    Ok(TopM {
        entries,
        y_pos,
        y_m,
    })
}

/// Sparse-score loss over a kernel restricted to the top-m entries:
/// `−log det(L_pos + I) + log det(L + I)`.
///
/// This is the negative log of the probability that the DPP draws a subset
/// of `y_pos`, and is non-negative.
pub fn ss_loss(l: &KernelMatrix, y_pos: &[usize]) -> Result<f64> {
    check_indices(y_pos, l.n())?;
    if y_pos.len() == l.n() {
        return Ok(0.0);
    }
    let pos = linalg::log_det_plus_identity(&submatrix(l.matrix(), y_pos))?;
    let all = linalg::log_det_plus_identity(l.matrix())?;
    Ok((all - pos).max(0.0))
}

/// Value of an instance-aware loss term. `singular` marks a rank-deficient
/// representative submatrix (duplicate features), in which case `value` is
/// `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdLoss {
    pub value: f64,
    pub singular: bool,
}

/// `−log P(Y_rep) = −log det(L_rep) + log det(L + I)` for a kernel over the
/// candidates that intersect the ground truth.
pub fn id_loss_all(l: &KernelMatrix, y_rep: &[usize]) -> Result<IdLoss> {
    if y_rep.is_empty() {
        return Err(Error::invalid("representative set must be non-empty"));
    }
    check_indices(y_rep, l.n())?;
    let rep = linalg::log_det_psd(&submatrix(l.matrix(), y_rep), true)?;
    if rep == f64::NEG_INFINITY {
        return Ok(IdLoss {
            value: f64::INFINITY,
            singular: true,
        });
    }
    let norm = linalg::log_det_plus_identity(l.matrix())?;
    Ok(IdLoss {
        value: (norm - rep).max(0.0),
        singular: false,
    })
}

/// Category-specific term: the same quantity over one category's candidates.
pub fn id_loss_ic(l: &KernelMatrix, y_ck: &[usize]) -> Result<IdLoss> {
    id_loss_all(l, y_ck)
}

/// `id_all + mean(per_class)`; an empty map contributes nothing.
pub fn id_loss_total(id_all: f64, per_class: &BTreeMap<u32, f64>) -> f64 {
    if per_class.is_empty() {
        return id_all;
    }
    id_all + per_class.values().sum::<f64>() / per_class.len() as f64
}

/// Index sets for one category's instance-aware term, in candidate indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTarget {
    pub class_id: u32,
    /// Candidates of this category intersecting the ground truth.
    pub ground: Vec<usize>,
    /// Hungarian-matched representatives among `ground`.
    pub reps: Vec<usize>,
}

/// Index sets for the instance-aware loss of one scene, in candidate indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdTargets {
    pub y_s: Vec<usize>,
    pub y_rep: Vec<usize>,
    /// Classes present in the ground truth with at least one representative.
    pub per_class: Vec<ClassTarget>,
}

/// Builds `Y_s` (candidates whose IoU with some ground truth exceeds
/// `overlap_threshold`), the global representatives and the per-class sets.
pub fn id_targets(
    candidates: &[Candidate],
    gts: &[GroundTruthObject],
    overlap_threshold: f64,
) -> Result<IdTargets> {
    let y_s: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| gts.iter().any(|g| iou(&c.bbox, &g.bbox) > overlap_threshold))
        .map(|(i, _)| i)
        .collect();
    let pool: Vec<Candidate> = y_s.iter().map(|&i| candidates[i].clone()).collect();
    let y_rep: Vec<usize> = match_representatives(&pool, gts, None)?
        .into_iter()
        .map(|i| y_s[i])
        .collect();

    let classes: std::collections::BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class = Vec::new();
    for k in classes {
        let ground: Vec<usize> = y_s
            .iter()
            .copied()
            .filter(|&i| candidates[i].predicted_class() == k)
            .collect();
        let reps: Vec<usize> = match_representatives(&pool, gts, Some(k))?
            .into_iter()
            .map(|i| y_s[i])
            .collect();
        if !reps.is_empty() {
            per_class.push(ClassTarget {
                class_id: k,
                ground,
                reps,
            });
        }
    }
    Ok(IdTargets {
        y_s,
        y_rep,
        per_class,
    })
}

/// Instance-aware loss of one scene, broken into its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdBreakdown {
    pub all: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub total: f64,
    /// Set when some representative submatrix was singular.
    pub singular: bool,
}

/// Evaluates the all-objects and per-class terms on a kernel indexed by
/// candidate. A scene without representatives has zero loss.
pub fn id_loss_scene(l: &KernelMatrix, targets: &IdTargets) -> Result<IdBreakdown> {
    let mut singular = false;
    let all = if targets.y_rep.is_empty() {
        0.0
    } else {
        let (ground, reps) = local_sets(&targets.y_s, &targets.y_rep)?;
        let term = id_loss_all(&l.restrict(&ground)?, &reps)?;
        singular |= term.singular;
        term.value
    };
    let mut per_class = BTreeMap::new();
    for t in &targets.per_class {
        let (ground, reps) = local_sets(&t.ground, &t.reps)?;
        let term = id_loss_ic(&l.restrict(&ground)?, &reps)?;
        singular |= term.singular;
        per_class.insert(t.class_id, term.value);
    }
    let total = id_loss_total(all, &per_class);
    Ok(IdBreakdown {
        all,
        per_class,
        total,
        singular,
    })
}

/// Maps representative candidate indices to positions within `ground`.
pub(crate) fn local_sets(ground: &[usize], reps: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let local = reps
        .iter()
        .map(|r| {
            ground
                .iter()
                .position(|g| g == r)
                .ok_or_else(|| Error::invalid(format!("representative {r} outside its ground set")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ground.to_vec(), local))
}

/// Smooth-L1 summed over coordinates: `0.5·d²` for `|d| < 1`, `|d| − 0.5` otherwise.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "smooth-L1 target length",
            expected: pred.len(),
            actual: target.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = (p - t).abs();
        if !d.is_finite() {
            return Err(Error::invalid("smooth-L1 input is not finite"));
        }
        total += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
    }
    Ok(total)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("cross-entropy logits are not finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// One RoI's proposal-stage terms: objectness logits `[background,
/// object]` with a binary label, and predicted vs target box shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTerm {
    pub objectness: [f64; 2],
    pub label: usize,
    pub shift: Vec<f64>,
    pub target_shift: Vec<f64>,
}

/// One candidate box's classification terms. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTerm {
    pub class_logits: Vec<f64>,
    pub label: usize,
    pub shift: Vec<f64>,
    pub target_shift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLoss {
    pub cross_entropy: f64,
    pub smooth_l1: f64,
    pub total: f64,
}

/// Unnormalized sum of both classification losses and both box regression
/// losses, with regression gated off for background labels.
pub fn multi_task_loss(rois: &[RoiTerm], boxes: &[BoxTerm]) -> Result<MultiTaskLoss> {
    let mut ce = 0.0;
    let mut reg = 0.0;
    for r in rois {
        ce += cross_entropy(&r.objectness, r.label)?;
        if r.label > 0 {
            reg += smooth_l1(&r.shift, &r.target_shift)?;
        }
    }
    for b in boxes {
        ce += cross_entropy(&b.class_logits, b.label)?;
        if b.label > 0 {
            reg += smooth_l1(&b.shift, &b.target_shift)?;
        }
    }
    Ok(MultiTaskLoss {
        cross_entropy: ce,
        smooth_l1: reg,
        total: ce + reg,
    })
}

/// All loss values recorded for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ss: f64,
    pub id_all: f64,
    pub id_ic_per_class: BTreeMap<u32, f64>,
    pub id_total: f64,
    pub smooth_l1: f64,
    pub cross_entropy: f64,
}
