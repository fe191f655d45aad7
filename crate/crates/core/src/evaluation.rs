//! Detection metrics: VOC and COCO style average precision, recall of
//! overlapped objects, the fraction of correct boxes among scored candidates,
//! and selection of crowded images.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crowd_objects, iou, validate_ground_truth, BoundingBox, GroundTruthObject, DEFAULT_CROWD_TAU};
use crate::matching::hungarian;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// One scored, classified box in one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: u32,
}

/// Annotations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalImage {
    pub image_id: u64,
    pub ground_truth: Vec<GroundTruthObject>,
}

fn index_images(gts: &[EvalImage]) -> Result<BTreeMap<u64, &[GroundTruthObject]>> {
    let mut map = BTreeMap::new();
    for img in gts {
        validate_ground_truth(&img.ground_truth, None)?;
        if map.insert(img.image_id, img.ground_truth.as_slice()).is_some() {
            return Err(Error::invalid(format!("image {} listed twice", img.image_id)));
        }
    }
    Ok(map)
}

fn check_detections(dets: &[Detection]) -> Result<()> {
    match dets.iter().position(|d| !d.score.is_finite()) {
        Some(i) => Err(Error::invalid(format!("detection {i} has a non-finite score"))),
        None => Ok(()),
    }
}

/// Area under the precision/recall curve with all-points interpolation.
fn interpolated_area(tp_flags: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    area
}

/// Per-class AP at one IoU threshold. Classes without ground truth are
/// skipped.
pub fn ap_per_class(dets: &[Detection], gts: &[EvalImage], iou_thresh: f64) -> Result<BTreeMap<u32, f64>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_thresh} outside (0, 1)")));
    }
    check_detections(dets)?;
    let images = index_images(gts)?;
    let mut n_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for g in images.values().flat_map(|g| g.iter()) {
        *n_gt.entry(g.class_id).or_default() += 1;
    }

    let mut out = BTreeMap::new();
    for (&class, &count) in &n_gt {
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut used: BTreeSet<(u64, usize)> = BTreeSet::new();
        let mut flags = Vec::with_capacity(order.len());
        for i in order {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(objs) = images.get(&d.image_id) {
                for (g, obj) in objs.iter().enumerate() {
                    if obj.class_id != class || used.contains(&(d.image_id, g)) {
                        continue;
                    }
                    let o = iou(&d.bbox, &obj.bbox);
                    if o >= iou_thresh && best.map_or(true, |(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
            }
            if let Some((g, _)) = best {
                used.insert((d.image_id, g));
            }
            flags.push(best.is_some());
        }
        out.insert(class, interpolated_area(&flags, count));
    }
    Ok(out)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over classes of the VOC-style AP at `iou_thresh`.
pub fn average_precision(dets: &[Detection], gts: &[EvalImage], iou_thresh: f64) -> Result<f64> {
    mean(ap_per_class(dets, gts, iou_thresh)?.into_values())
        .ok_or_else(|| Error::invalid("no ground-truth objects to evaluate against"))
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Mean of [`average_precision`] over [`coco_thresholds`].
pub fn coco_ap(dets: &[Detection], gts: &[EvalImage]) -> Result<f64> {
    let aps = coco_thresholds()
        .into_iter()
        .map(|t| average_precision(dets, gts, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Recall of overlapped objects at each overlap threshold. Thresholds at
/// which no object qualifies are listed in `omitted` instead of `points`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub points: Vec<(f64, f64)>,
    pub omitted: Vec<f64>,
}

impl RecallCurve {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.points.iter().find(|(t, _)| *t == threshold).map(|(_, r)| *r)
    }
}

/// Ground-truth objects (by image and index) covered by detections under a
/// one-to-one, class-aware matching that maximizes the number of pairs with
/// IoU ≥ 0.5.
fn detected_objects(
    dets: &[Detection],
    images: &BTreeMap<u64, &[GroundTruthObject]>,
) -> Result<BTreeSet<(u64, usize)>> {
    let mut by_image: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d);
    }
    let mut found = BTreeSet::new();
    for (image_id, objs) in images {
        let Some(ds) = by_image.get(image_id) else {
            continue;
        };
        let classes: BTreeSet<u32> = objs.iter().map(|o| o.class_id).collect();
        for class in classes {
            let g_idx: Vec<usize> = (0..objs.len()).filter(|&g| objs[g].class_id == class).collect();
            let d_cls: Vec<&&Detection> = ds.iter().filter(|d| d.class_id == class).collect();
            if d_cls.is_empty() {
                continue;
            }
            let hit = |a: usize, b: usize| iou(&d_cls[a].bbox, &objs[g_idx[b]].bbox) >= DEFAULT_MATCH_IOU;
            let cost = DMatrix::from_fn(d_cls.len(), g_idx.len(), |a, b| if hit(a, b) { -1.0 } else { 0.0 });
            for (a, b) in hungarian(&cost)?.pairs {
                if hit(a, b) {
                    found.insert((*image_id, g_idx[b]));
                }
            }
        }
    }
    Ok(found)
}

/// For each threshold `t`, the per-category fraction of objects overlapping
/// another object by IoU > `t` that are detected, averaged over categories.
pub fn crowd_recall(dets: &[Detection], gts: &[EvalImage], thresholds: &[f64]) -> Result<RecallCurve> {
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("overlap thresholds must be strictly ascending"));
    }
    check_detections(dets)?;
    let images = index_images(gts)?;
    let found = detected_objects(dets, &images)?;
    let mut curve = RecallCurve { points: Vec::new(), omitted: Vec::new() };
    for &t in thresholds {
        let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for (image_id, objs) in &images {
            let crowd = crowd_objects(objs, t)?;
            for (g, obj) in objs.iter().enumerate() {
                if crowd.contains(&obj.instance_id) {
                    let e = per_class.entry(obj.class_id).or_default();
                    e.1 += 1;
                    e.0 += found.contains(&(*image_id, g)) as usize;
                }
            }
        }
        match mean(per_class.values().map(|&(hit, total)| hit as f64 / total as f64)) {
            Some(r) => curve.points.push((t, r)),
            None => curve.omitted.push(t),
        }
    }
    Ok(curve)
}

/// Fraction of detections scoring above `score_thresh` that overlap a
/// same-class object of their image by IoU ≥ 0.5. Errors when no detection
/// passes the threshold.
pub fn correct_box_probability(dets: &[Detection], gts: &[EvalImage], score_thresh: f64) -> Result<f64> {
    check_detections(dets)?;
    let images = index_images(gts)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for d in dets.iter().filter(|d| d.score > score_thresh) {
        total += 1;
        let ok = images.get(&d.image_id).is_some_and(|objs| {
            objs.iter()
                .any(|o| o.class_id == d.class_id && iou(&o.bbox, &d.bbox) >= DEFAULT_MATCH_IOU)
        });
        correct += ok as usize;
    }
    if total == 0 {
        return Err(Error::invalid(format!("no detection scores above {score_thresh}")));
    }
    Ok(correct as f64 / total as f64)
}

/// Ids of images with at least one pair of objects overlapping by IoU > `tau`.
pub fn build_crowd_subset(gts: &[EvalImage], tau: f64) -> Result<BTreeSet<u64>> {
    let mut out = BTreeSet::new();
    for img in gts {
        if !crowd_objects(&img.ground_truth, tau)?.is_empty() {
            out.insert(img.image_id);
        }
    }
    Ok(out)
}

/// Metric summary for a detection set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_class: BTreeMap<u32, f64>,
    pub map: f64,
    pub coco_map: f64,
    pub recall_curve: Vec<(f64, f64)>,
    pub recall_omitted: Vec<f64>,
    /// `None` when no detection passes the score threshold.
    pub correct_box_prob: Option<f64>,
    pub n_images: usize,
    pub n_crowd_images: usize,
}

/// All metrics at their default thresholds.
pub fn evaluate(dets: &[Detection], gts: &[EvalImage]) -> Result<EvalReport> {
    let ap_per_class = ap_per_class(dets, gts, DEFAULT_MATCH_IOU)?;
    let map = mean(ap_per_class.values().copied())
        .ok_or_else(|| Error::invalid("no ground-truth objects to evaluate against"))?;
    let curve = crowd_recall(dets, gts, &DEFAULT_RECALL_THRESHOLDS)?;
    let correct_box_prob = match correct_box_probability(dets, gts, DEFAULT_SCORE_THRESHOLD) {
        Ok(p) => Some(p),
        Err(Error::InvalidInput(_)) if dets.iter().all(|d| d.score <= DEFAULT_SCORE_THRESHOLD) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        ap_per_class,
        map,
        coco_map: coco_ap(dets, gts)?,
        recall_curve: curve.points,
        recall_omitted: curve.omitted,
        correct_box_prob,
        n_images: gts.len(),
        n_crowd_images: build_crowd_subset(gts, DEFAULT_CROWD_TAU)?.len(),
    })
}
