//! Scene data exchanged with the CLI: candidates with per-class scores and
//! features, plus ground-truth annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{validate_ground_truth, BoundingBox, GroundTruthObject};

/// A candidate detection box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Per-class probabilities.
    pub scores: Vec<f64>,
    /// Raw (unnormalized) identification feature.
    pub feature: Vec<f64>,
}

impl Candidate {
    /// Arg-max class; ties go to the lowest class id.
    pub fn predicted_class(&self) -> u32 {
        argmax(&self.scores) as u32
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One image worth of candidates and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub image_id: u64,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub ground_truth: Vec<GroundTruthObject>,
}

impl Scene {
    /// Number of classes implied by the score vectors (0 for an empty scene).
    pub fn n_classes(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.scores.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.feature.len())
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.candidates.iter().map(|c| c.bbox).collect()
    }

    /// Checks uniform score/feature lengths, score range and annotation ids.
    pub fn validate(&self) -> Result<()> {
        let n_c = self.n_classes();
        let r = self.feature_dim();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.scores.len() != n_c {
                return Err(Error::invalid(format!(
                    "candidates[{i}].scores has {} entries, expected {n_c}",
                    c.scores.len()
                )));
            }
            if c.feature.len() != r {
                return Err(Error::invalid(format!(
                    "candidates[{i}].feature has {} entries, expected {r}",
                    c.feature.len()
                )));
            }
            if let Some(s) = c.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::invalid(format!(
                    "candidates[{i}].scores contains {s}, outside [0, 1]"
                )));
            }
            if c.feature.iter().any(|f| !f.is_finite()) {
                return Err(Error::invalid(format!("candidates[{i}].feature is not finite")));
            }
        }
        if n_c == 0 && !self.candidates.is_empty() {
            return Err(Error::invalid("candidates carry empty score vectors"));
        }
        validate_ground_truth(
            &self.ground_truth,
            if self.candidates.is_empty() { None } else { Some(n_c) },
        )
    }
}
