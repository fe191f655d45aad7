//! Run configuration shared by the trainer and the command-line tool.

use serde::{Deserialize, Serialize};

use crate::dpp::{DEFAULT_LAMBDA, DEFAULT_PSD_EPSILON};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_CROWD_TAU;
use crate::gradients::DEFAULT_FD_STEP;
use crate::inference::{DEFAULT_BETA, DEFAULT_NMS_TAU};
use crate::losses::DEFAULT_TOP_M;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Weight of the feature term in the similarity matrix.
    pub lambda: f64,
    /// Sparse-score weight once the switch point is reached.
    pub lambda_ss: f64,
    /// Fraction of score iterations trained with the sparse-score weight at 0.
    pub ss_switch_fraction: f64,
    /// Categories expanded per RoI for the sparse-score loss.
    pub m: usize,
    /// Quality is `exp(beta · score)`.
    pub beta: f64,
    pub nms_tau: f64,
    pub crowd_tau: f64,
    pub psd_epsilon: f64,
    pub fd_step: f64,
    pub rng_seed: u64,
    /// Iterations of each training phase.
    pub iterations: usize,
    pub lr_scores: f64,
    pub lr_features: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lambda_ss: 0.01,
            ss_switch_fraction: 0.6,
            m: DEFAULT_TOP_M,
            beta: DEFAULT_BETA,
            nms_tau: DEFAULT_NMS_TAU,
            crowd_tau: DEFAULT_CROWD_TAU,
            psd_epsilon: DEFAULT_PSD_EPSILON,
            fd_step: DEFAULT_FD_STEP,
            rng_seed: 0,
            iterations: 500,
            lr_scores: 0.5,
            lr_features: 0.005,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} must lie in [0, 1]")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} must be positive")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} must be non-negative")))
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        unit("lambda", self.lambda)?;
        non_negative("lambda_ss", self.lambda_ss)?;
        unit("ss_switch_fraction", self.ss_switch_fraction)?;
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta = {} must be finite", self.beta)));
        }
        unit("nms_tau", self.nms_tau)?;
        unit("crowd_tau", self.crowd_tau)?;
        positive("psd_epsilon", self.psd_epsilon)?;
        positive("fd_step", self.fd_step)?;
        non_negative("lr_scores", self.lr_scores)?;
        non_negative("lr_features", self.lr_features)?;
        Ok(())
    }

    /// First score iteration (0-based) at which the sparse-score weight is
    /// active.
    pub fn ss_switch_iteration(&self) -> usize {
        (self.ss_switch_fraction * self.iterations as f64).round() as usize
    }

    /// Sparse-score weight at score iteration `it`.
    pub fn lambda_ss_at(&self, it: usize) -> f64 {
        if it < self.ss_switch_iteration() {
            0.0
        } else {
            self.lambda_ss
        }
    }
}
