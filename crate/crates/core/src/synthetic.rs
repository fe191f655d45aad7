//! Synthetic crowded scenes and a toy trainer.
//!
//! The trainer replaces the detector's networks with free per-candidate
//! parameters: class logits (whose softmax gives the scores) and raw feature
//! rows. Each iteration first takes a gradient step on the logits against
//! `λ_ss·L_SS + cross-entropy` with the similarity held fixed, then a step on
//! the features against the instance-aware loss with quality held fixed.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dpp::{build_kernel, build_similarity, FeatureMatrix, RepairPolicy, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::geometry::{iou, iou_matrix, BoundingBox, GroundTruthObject};
use crate::gradients::{grad_id_wrt_v, grad_ss_wrt_q, ss_loss_indexed};
use crate::inference::quality_transform;
use crate::losses::{cross_entropy, id_loss_scene, id_targets, select_top_m, smooth_l1, softmax, LossBundle};
use crate::scene::{Candidate, Scene};

pub const MIN_OBJECT_SIZE: f64 = 24.0;
pub const MAX_OBJECT_SIZE: f64 = 64.0;
const MAX_LAYOUT_ATTEMPTS: usize = 200;
/// Logit boost of the true class for a candidate that exactly covers its object.
const SCORE_SIGNAL: f64 = 3.0;
/// IoU a candidate needs with an object to receive that object's class label.
pub const LABEL_IOU: f64 = 0.5;

/// Parameters of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub n_classes: usize,
    /// Minimum IoU between consecutive objects of the crowd chain; 0 places
    /// objects independently.
    pub overlap_level: f64,
    pub candidates_per_object: usize,
    /// Candidate jitter relative to object size.
    pub jitter_scale: f64,
    /// Side of the square image.
    pub image_extent: f64,
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 3,
            n_classes: 6,
            overlap_level: 0.4,
            candidates_per_object: 6,
            jitter_scale: 0.15,
            image_extent: 256.0,
            feature_dim: 16,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_classes == 0 || self.candidates_per_object == 0 || self.feature_dim == 0 {
            return Err(Error::invalid(
                "n_objects, n_classes, candidates_per_object and feature_dim must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_level) {
            return Err(Error::invalid(format!("overlap_level {} outside [0, 1]", self.overlap_level)));
        }
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return Err(Error::invalid(format!("jitter_scale {} must be non-negative", self.jitter_scale)));
        }
        if !(self.image_extent > 0.0 && self.image_extent.is_finite()) {
            return Err(Error::invalid(format!("image_extent {} must be positive", self.image_extent)));
        }
        Ok(())
    }
}

/// A generated scene together with the object each candidate was spawned
/// from. The labels are for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub instance_of: Vec<u64>,
}

fn object_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Vec<BoundingBox>> {
    let extent = spec.image_extent;
    let inside = |b: &BoundingBox| b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= extent && b.y_max() <= extent;
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(spec.n_objects);
    for k in 0..spec.n_objects {
        let b = if k == 0 || spec.overlap_level == 0.0 {
            let w = rng.random_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
            let h = rng.random_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
            if w > extent || h > extent {
                return None;
            }
            let x = rng.random_range(0.0..=extent - w);
            let y = rng.random_range(0.0..=extent - h);
            BoundingBox::new(x, y, x + w, y + h).ok()?
        } else {
            // same-size partner shifted along one axis: IoU = (w − d)/(w + d)
            let prev = boxes[k - 1];
            let t = rng.random_range(spec.overlap_level..=(spec.overlap_level + 0.2).min(1.0));
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if rng.random_bool(0.5) {
                let d = prev.width() * (1.0 - t) / (1.0 + t) * sign;
                BoundingBox::new(prev.x_min() + d, prev.y_min(), prev.x_max() + d, prev.y_max()).ok()?
            } else {
                let d = prev.height() * (1.0 - t) / (1.0 + t) * sign;
                BoundingBox::new(prev.x_min(), prev.y_min() + d, prev.x_max(), prev.y_max() + d).ok()?
            }
        };
        if !inside(&b) {
            return None;
        }
        boxes.push(b);
    }
    Some(boxes)
}

/// Generates a scene: objects (a chain of overlapping partners when
/// `overlap_level > 0`), jittered candidates per object with noisy class
/// scores, and random features.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let objects = (0..MAX_LAYOUT_ATTEMPTS)
        .find_map(|_| object_layout(spec, &mut rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "no layout of {} objects with overlap {} fits a {} image after {MAX_LAYOUT_ATTEMPTS} attempts",
                spec.n_objects, spec.overlap_level, spec.image_extent
            ))
        })?;
    let ground_truth: Vec<GroundTruthObject> = objects
        .iter()
        .enumerate()
        .map(|(k, b)| GroundTruthObject {
            bbox: *b,
            class_id: rng.random_range(0..spec.n_classes) as u32,
            instance_id: k as u64 + 1,
        })
        .collect();

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut candidates = Vec::new();
    let mut instance_of = Vec::new();
    for g in &ground_truth {
        let (cx, cy) = g.bbox.center();
        for _ in 0..spec.candidates_per_object {
            let j = spec.jitter_scale;
            let w = g.bbox.width() * (j * std_normal.sample(&mut rng)).exp();
            let h = g.bbox.height() * (j * std_normal.sample(&mut rng)).exp();
            let x = cx + j * g.bbox.width() * std_normal.sample(&mut rng);
            let y = cy + j * g.bbox.height() * std_normal.sample(&mut rng);
            let bbox = BoundingBox::from_center(x, y, w, h)?;
            let overlap = iou(&bbox, &g.bbox);
            let logits: Vec<f64> = (0..spec.n_classes)
                .map(|c| {
                    let boost = if c as u32 == g.class_id { SCORE_SIGNAL * overlap } else { 0.0 };
                    std_normal.sample(&mut rng) + boost
                })
                .collect();
            let feature: Vec<f64> = (0..spec.feature_dim).map(|_| std_normal.sample(&mut rng)).collect();
            candidates.push(Candidate { bbox, scores: softmax(&logits), feature });
            instance_of.push(g.instance_id);
        }
    }
    Ok(SyntheticScene {
        scene: Scene { image_id: spec.rng_seed, candidates, ground_truth },
        instance_of,
    })
}

/// Free parameters of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Feature rows, kept unit-norm.
    pub v_params: Vec<Vec<f64>>,
    /// Per-candidate class logits.
    pub score_logits: Vec<Vec<f64>>,
}

impl SceneParams {
    /// Normalized features and log-scores of a scene's candidates.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        scene.validate()?;
        let features: Vec<Vec<f64>> = scene.candidates.iter().map(|c| c.feature.clone()).collect();
        let v = FeatureMatrix::from_rows(&features)?;
        Ok(Self {
            v_params: rows_of(v.matrix()),
            score_logits: scene
                .candidates
                .iter()
                .map(|c| c.scores.iter().map(|s| s.max(1e-12).ln()).collect())
                .collect(),
        })
    }

    pub fn features(&self) -> DMatrix<f64> {
        let r = self.v_params.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.v_params.len(), r, |i, j| self.v_params[i][j])
    }

    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.score_logits.iter().map(|z| softmax(z)).collect()
    }

    /// The scene with candidate scores and features replaced by these
    /// parameters.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for ((c, s), v) in out.candidates.iter_mut().zip(self.scores()).zip(&self.v_params) {
            c.scores = s;
            c.feature = v.clone();
        }
        out
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parameters of every scene, the number of completed steps and the losses
/// measured at each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Vec<SceneParams>,
    pub step: usize,
    pub loss_history: Vec<LossBundle>,
}

impl TrainState {
    pub fn init(scenes: &[Scene]) -> Result<Self> {
        Ok(Self {
            params: scenes.iter().map(SceneParams::from_scene).collect::<Result<_>>()?,
            step: 0,
            loss_history: Vec::new(),
        })
    }
}

/// Class label of each candidate: the class of the object it overlaps most,
/// if that overlap reaches [`LABEL_IOU`].
pub fn candidate_labels(scene: &Scene) -> Vec<Option<(usize, usize)>> {
    scene
        .candidates
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (g, obj) in scene.ground_truth.iter().enumerate() {
                let o = iou(&c.bbox, &obj.bbox);
                if o >= LABEL_IOU && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            best.map(|(g, _)| (g, scene.ground_truth[g].class_id as usize))
        })
        .collect()
}

fn target_shift(c: &BoundingBox, g: &BoundingBox) -> [f64; 4] {
    let (cx, cy) = c.center();
    let (gx, gy) = g.center();
    [
        (gx - cx) / c.width(),
        (gy - cy) / c.height(),
        (g.width() / c.width()).ln(),
        (g.height() / c.height()).ln(),
    ]
}

fn similarity(v: &DMatrix<f64>, iou_m: &DMatrix<f64>, config: &Config) -> Result<SimilarityMatrix> {
    build_similarity(&FeatureMatrix::new(v.clone())?, iou_m, config.lambda, RepairPolicy::EigenClip(config.psd_epsilon))
}

/// Sparse-score inputs: the entry similarity (entries of one RoI share its
/// row of the candidate similarity), entry qualities and the top-m sets.
struct SsProblem {
    entries: Vec<(usize, usize)>,
    s: DMatrix<f64>,
    q: Vec<f64>,
    y_pos: Vec<usize>,
    y_m: Vec<usize>,
}

fn ss_problem(probs: &[Vec<f64>], s_cand: &SimilarityMatrix, config: &Config) -> Result<SsProblem> {
    let n_classes = probs.first().map_or(0, Vec::len);
    let top = select_top_m(probs, config.m.min(n_classes))?;
    let s = DMatrix::from_fn(top.entries.len(), top.entries.len(), |a, b| {
        s_cand.matrix()[(top.entries[a].0, top.entries[b].0)]
    });
    let q = top.entries.iter().map(|&(i, k)| quality_transform(probs[i][k], config.beta)).collect();
    Ok(SsProblem { entries: top.entries, s, q, y_pos: top.y_pos, y_m: top.y_m })
}

struct SceneContext<'a> {
    scene: &'a Scene,
    iou: DMatrix<f64>,
    labels: Vec<Option<(usize, usize)>>,
    smooth_l1: f64,
}

impl<'a> SceneContext<'a> {
    fn new(scene: &'a Scene) -> Result<Self> {
        let labels = candidate_labels(scene);
        let mut reg = 0.0;
        for (c, label) in scene.candidates.iter().zip(&labels) {
            if let Some((g, _)) = label {
                reg += smooth_l1(&[0.0; 4], &target_shift(&c.bbox, &scene.ground_truth[*g].bbox))?;
            }
        }
        Ok(Self { scene, iou: iou_matrix(&scene.boxes()), labels, smooth_l1: reg })
    }

    fn candidates_with(&self, params: &SceneParams) -> Vec<Candidate> {
        params.apply(self.scene).candidates
    }
}

/// Losses of one scene: sparse-score and cross-entropy on the current
/// scores, and the instance-aware loss at qualities `exp(β·max score)`.
fn scene_losses(ctx: &SceneContext, params: &SceneParams, config: &Config) -> Result<LossBundle> {
    let probs = params.scores();
    let v = params.features();
    let s_cand = similarity(&v, &ctx.iou, config)?;
    let ss = if probs.is_empty() {
        0.0
    } else {
        let p = ss_problem(&probs, &s_cand, config)?;
        ss_loss_indexed(&p.s, &p.q, &p.y_pos, &p.y_m)?
    };
    let mut ce = 0.0;
    for (z, label) in params.score_logits.iter().zip(&ctx.labels) {
        if let Some((_, k)) = label {
            ce += cross_entropy(z, *k)?;
        }
    }
    let (id, _) = id_terms(ctx, params, &s_cand, config)?;
    Ok(LossBundle {
        ss,
        id_all: id.all,
        id_ic_per_class: id.per_class,
        id_total: id.total,
        smooth_l1: ctx.smooth_l1,
        cross_entropy: ce,
    })
}

fn id_terms(
    ctx: &SceneContext,
    params: &SceneParams,
    s_cand: &SimilarityMatrix,
    config: &Config,
) -> Result<(crate::losses::IdBreakdown, (Vec<f64>, crate::losses::IdTargets))> {
    let cands = ctx.candidates_with(params);
    let targets = id_targets(&cands, &ctx.scene.ground_truth, 0.0)?;
    let q: Vec<f64> = cands.iter().map(|c| quality_transform(c.max_score(), config.beta)).collect();
    let id = id_loss_scene(&build_kernel(s_cand, &q)?, &targets)?;
    if id.singular || !id.total.is_finite() {
        return Err(Error::Numerical(format!(
            "instance-aware loss is {} in scene {}: representative features collapsed",
            id.total, ctx.scene.image_id
        )));
    }
    Ok((id, (q, targets)))
}

/// Gradient of `λ_ss·L_SS + cross-entropy` with respect to the logits.
fn score_gradient(
    ctx: &SceneContext,
    params: &SceneParams,
    lambda_ss: f64,
    config: &Config,
) -> Result<Vec<Vec<f64>>> {
    let probs = params.scores();
    let mut grad: Vec<Vec<f64>> = probs
        .iter()
        .zip(&ctx.labels)
        .map(|(p, label)| match label {
            Some((_, k)) => p.iter().enumerate().map(|(c, pc)| pc - (c == *k) as u8 as f64).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    if lambda_ss > 0.0 && !probs.is_empty() {
        let s_cand = similarity(&params.features(), &ctx.iou, config)?;
        let p = ss_problem(&probs, &s_cand, config)?;
        let s_entries = SimilarityMatrix::from_matrix(p.s, config.lambda)?;
        let dq = grad_ss_wrt_q(&s_entries, &p.q, &p.y_pos, &p.y_m)?;
        // chain rule through q = exp(β·p) and then the softmax of each row
        let mut dp: Vec<Vec<f64>> = probs.iter().map(|row| vec![0.0; row.len()]).collect();
        for (e, &(i, k)) in p.entries.iter().enumerate() {
            dp[i][k] += dq[e] * config.beta * p.q[e];
        }
        for (i, row) in probs.iter().enumerate() {
            let dot: f64 = row.iter().zip(&dp[i]).map(|(a, b)| a * b).sum();
            for k in 0..row.len() {
                grad[i][k] += lambda_ss * row[k] * (dp[i][k] - dot);
            }
        }
    }
    Ok(grad)
}

fn normalize_rows(v: &mut DMatrix<f64>) -> Result<()> {
    for (i, mut row) in v.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical(format!("feature row {i} vanished during training")));
        }
        row /= norm;
    }
    Ok(())
}

/// Which parameters a training step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    /// Score logits, features frozen.
    Scores,
    /// Features, scores (and so qualities) frozen.
    Features,
}

/// Phase of global step `step`: `config.iterations` score steps, then as
/// many feature steps. `None` once both are done.
pub fn phase_at(config: &Config, step: usize) -> Option<TrainPhase> {
    if step < config.iterations {
        Some(TrainPhase::Scores)
    } else if step < config.iterations.saturating_mul(2) {
        Some(TrainPhase::Features)
    } else {
        None
    }
}

fn step_scene(ctx: &SceneContext, params: &mut SceneParams, step: usize, config: &Config) -> Result<()> {
    match phase_at(config, step) {
        Some(TrainPhase::Scores) if config.lr_scores > 0.0 => {
            let g = score_gradient(ctx, params, config.lambda_ss_at(step), config)?;
            for (z, gz) in params.score_logits.iter_mut().zip(&g) {
                for (a, b) in z.iter_mut().zip(gz) {
                    *a -= config.lr_scores * b;
                }
            }
        }
        Some(TrainPhase::Features) if config.lr_features > 0.0 => {
            let mut v = params.features();
            let s_cand = similarity(&v, &ctx.iou, config)?;
            let (_, (q, targets)) = id_terms(ctx, params, &s_cand, config)?;
            let grad = grad_id_wrt_v(&v, &ctx.iou, &q, config.lambda, &targets)?;
            v -= grad * config.lr_features;
            normalize_rows(&mut v)?;
            params.v_params = rows_of(&v);
        }
        _ => {}
    }
    Ok(())
}

fn sum_bundles(bundles: impl IntoIterator<Item = LossBundle>) -> LossBundle {
    let mut total = LossBundle {
        ss: 0.0,
        id_all: 0.0,
        id_ic_per_class: BTreeMap::new(),
        id_total: 0.0,
        smooth_l1: 0.0,
        cross_entropy: 0.0,
    };
    for b in bundles {
        total.ss += b.ss;
        total.id_all += b.id_all;
        total.id_total += b.id_total;
        total.smooth_l1 += b.smooth_l1;
        total.cross_entropy += b.cross_entropy;
        for (k, v) in b.id_ic_per_class {
            *total.id_ic_per_class.entry(k).or_default() += v;
        }
    }
    total
}

/// Losses of `state` on `scenes`, summed over scenes.
pub fn evaluate_losses(scenes: &[Scene], state: &TrainState, config: &Config) -> Result<LossBundle> {
    check_state(scenes, state)?;
    let bundles = scenes
        .iter()
        .zip(&state.params)
        .map(|(s, p)| scene_losses(&SceneContext::new(s)?, p, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_bundles(bundles))
}

fn check_state(scenes: &[Scene], state: &TrainState) -> Result<()> {
    if scenes.len() != state.params.len() {
        return Err(Error::DimensionMismatch {
            what: "number of scenes",
            expected: state.params.len(),
            actual: scenes.len(),
        });
    }
    for (k, (s, p)) in scenes.iter().zip(&state.params).enumerate() {
        if s.candidates.len() != p.v_params.len() || s.candidates.len() != p.score_logits.len() {
            return Err(Error::invalid(format!("parameters of scene {k} do not match its candidates")));
        }
    }
    Ok(())
}

/// Runs up to `max_steps` further steps, stopping once both phases are
/// done. Each step records the losses measured before its update.
pub fn continue_training(
    scenes: &[Scene],
    mut state: TrainState,
    config: &Config,
    max_steps: usize,
) -> Result<TrainState> {
    config.validate()?;
    check_state(scenes, &state)?;
    let contexts = scenes.iter().map(SceneContext::new).collect::<Result<Vec<_>>>()?;
    let stop = config.iterations.saturating_mul(2).min(state.step.saturating_add(max_steps));
    while state.step < stop {
        let mut bundles = Vec::with_capacity(contexts.len());
        for (ctx, params) in contexts.iter().zip(state.params.iter_mut()) {
            bundles.push(scene_losses(ctx, params, config)?);
            step_scene(ctx, params, state.step, config)?;
        }
        let bundle = sum_bundles(bundles);
        if ![bundle.ss, bundle.id_total, bundle.cross_entropy].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss at iteration {}", state.step)));
        }
        state.loss_history.push(bundle);
        state.step += 1;
    }
    Ok(state)
}

/// Trains fresh parameters initialized from the scenes' scores and features.
pub fn train_toy(scenes: &[Scene], config: &Config) -> Result<TrainState> {
    continue_training(scenes, TrainState::init(scenes)?, config, usize::MAX)
}

/// Mean cosine similarity of feature pairs from the same object and from
/// different objects. `None` for a side without pairs.
pub fn instance_cosines(v: &DMatrix<f64>, instance_of: &[u64]) -> (Option<f64>, Option<f64>) {
    let mut same = (0.0, 0usize);
    let mut diff = (0.0, 0usize);
    for i in 0..v.nrows() {
        for j in (i + 1)..v.nrows() {
            let cos = v.row(i).dot(&v.row(j)) / (v.row(i).norm() * v.row(j).norm());
            let acc = if instance_of[i] == instance_of[j] { &mut same } else { &mut diff };
            acc.0 += cos;
            acc.1 += 1;
        }
    }
    let avg = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (avg(same), avg(diff))
}
