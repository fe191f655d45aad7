//! Feature, similarity and kernel matrices and the DPP likelihood.
//!
//! The similarity between candidates blends feature cosine similarity with
//! spatial overlap, `S = λ·VVᵀ + (1−λ)·IoU`, and the kernel folds in
//! per-candidate quality, `L = S ⊙ qqᵀ`. The probability of a subset `Y` is
//! `det(L_Y) / det(L + I)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_indices, check_symmetric, submatrix};

/// Default mixing weight between visual and spatial similarity.
pub const DEFAULT_LAMBDA: f64 = 0.6;

/// Default feature dimension of the region identification features.
pub const DEFAULT_FEATURE_DIM: usize = 256;

/// Default eigenvalue floor used when repairing an indefinite similarity.
pub const DEFAULT_PSD_EPSILON: f64 = 1e-8;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Row-normalized features, one row per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    v: DMatrix<f64>,
}

impl FeatureMatrix {
    /// Wraps rows that are already unit-norm.
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        for (i, row) in v.row_iter().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "feature row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { v })
    }

    /// Normalizes raw features `F` row by row; zero rows are rejected.
    pub fn from_raw(f: &DMatrix<f64>) -> Result<Self> {
        let mut v = f.clone();
        for (i, mut row) in v.row_iter_mut().enumerate() {
            let norm = row.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::invalid(format!("feature row {i} has zero norm")));
            }
            row /= norm;
        }
        Ok(Self { v })
    }

    /// Normalizes a list of raw feature vectors of uniform length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != r) {
            return Err(Error::DimensionMismatch {
                what: "feature length",
                expected: r,
                actual: bad.len(),
            });
        }
        let f = DMatrix::from_fn(rows.len(), r, |i, j| rows[i][j]);
        Self::from_raw(&f)
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Cosine similarities `VVᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }
}

/// How an indefinite similarity matrix gets repaired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum RepairPolicy {
    /// Leave the matrix as computed.
    None,
    /// Shift the spectrum up so the smallest eigenvalue becomes `epsilon`.
    Jitter(f64),
    /// Clip eigenvalues below `epsilon`.
    EigenClip(f64),
}

impl Default for RepairPolicy {
    fn default() -> Self {
        RepairPolicy::EigenClip(DEFAULT_PSD_EPSILON)
    }
}

/// Repair actually applied to a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum PsdRepair {
    None,
    /// Diagonal shift that was added before re-normalizing.
    Jitter(f64),
    /// Eigenvalue floor that was applied.
    EigenClip(f64),
}

/// Symmetric similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: DMatrix<f64>,
    lambda: f64,
    psd_repair: PsdRepair,
}

impl SimilarityMatrix {
    /// Wraps an explicit similarity matrix. The matrix must be symmetric with
    /// unit diagonal; no repair is attempted.
    pub fn from_matrix(s: DMatrix<f64>, lambda: f64) -> Result<Self> {
        check_symmetric(&s, "similarity matrix")?;
        for i in 0..s.nrows() {
            if (s[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "similarity diagonal entry {i} is {}, expected 1",
                    s[(i, i)]
                )));
            }
        }
        Ok(Self {
            s,
            lambda,
            psd_repair: PsdRepair::None,
        })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn psd_repair(&self) -> PsdRepair {
        self.psd_repair
    }

    /// Principal submatrix over `idx`.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        check_indices(idx, self.n())?;
        Ok(Self {
            s: submatrix(&self.s, idx),
            lambda: self.lambda,
            psd_repair: self.psd_repair,
        })
    }
}

/// `λ·VVᵀ + (1−λ)·IoU` with no symmetrization or repair; the gradient code
/// differentiates exactly this expression.
pub fn raw_similarity(v: &DMatrix<f64>, iou: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    (v * v.transpose()) * lambda + iou * (1.0 - lambda)
}

/// Builds `S = λ·VVᵀ + (1−λ)·IoU`, repairing it per `policy` if its
/// smallest eigenvalue falls below `-ε`.
pub fn build_similarity(
    v: &FeatureMatrix,
    iou: &DMatrix<f64>,
    lambda: f64,
    policy: RepairPolicy,
) -> Result<SimilarityMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let n = v.n();
    if iou.nrows() != n || iou.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "IoU matrix size",
            expected: n,
            actual: iou.nrows().max(iou.ncols()),
        });
    }
    check_symmetric(iou, "IoU matrix")?;

    let mut s = raw_similarity(v.matrix(), iou, lambda);
    for i in 0..n {
        s[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }

    let mut psd_repair = PsdRepair::None;
    let eps = match policy {
        RepairPolicy::None => None,
        RepairPolicy::Jitter(e) | RepairPolicy::EigenClip(e) => Some(e),
    };
    if let Some(eps) = eps {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("PSD repair epsilon {eps} must be positive")));
        }
        let lam_min = linalg::min_eigenvalue(&s);
        if lam_min < -eps {
            match policy {
                RepairPolicy::EigenClip(_) => {
                    let mut eig = nalgebra::SymmetricEigen::new(s.clone());
                    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(eps));
                    s = eig.recompose();
                    psd_repair = PsdRepair::EigenClip(eps);
                }
                RepairPolicy::Jitter(_) => {
                    let shift = eps - lam_min;
                    for i in 0..n {
                        s[(i, i)] += shift;
                    }
                    psd_repair = PsdRepair::Jitter(shift);
                }
                RepairPolicy::None => unreachable!(),
            }
            rescale_unit_diagonal(&mut s);
        }
    }

    Ok(SimilarityMatrix {
        s,
        lambda,
        psd_repair,
    })
}

/// Congruence `D^{-1/2} S D^{-1/2}`; keeps PSD and restores the unit diagonal.
fn rescale_unit_diagonal(s: &mut DMatrix<f64>) {
    let n = s.nrows();
    let d: Vec<f64> = (0..n).map(|i| s[(i, i)].sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] /= d[i] * d[j];
        }
    }
    for i in 0..n {
        s[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
}

/// DPP kernel `L = S ⊙ qqᵀ` together with its quality vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    l: DMatrix<f64>,
    q: Vec<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn quality(&self) -> &[f64] {
        &self.q
    }

    /// Principal submatrix `L_Y` as a kernel over `idx`.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        check_indices(idx, self.n())?;
        Ok(Self {
            l: submatrix(&self.l, idx),
            q: linalg::subvector(&self.q, idx),
        })
    }

    /// Kernel from an arbitrary symmetric matrix and quality vector,
    /// without requiring a unit diagonal.
    pub fn from_similarity_matrix(s: &DMatrix<f64>, q: &[f64]) -> Result<Self> {
        check_symmetric(s, "similarity matrix")?;
        check_quality(q, s.nrows())?;
        Ok(Self {
            l: DMatrix::from_fn(q.len(), q.len(), |i, j| s[(i, j)] * q[i] * q[j]),
            q: q.to_vec(),
        })
    }
}

pub(crate) fn check_quality(q: &[f64], n: usize) -> Result<()> {
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            what: "quality vector length",
            expected: n,
            actual: q.len(),
        });
    }
    if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("quality q[{i}] = {v} must be positive")));
    }
    Ok(())
}

/// `L_ij = S_ij · q_i · q_j`.
pub fn build_kernel(s: &SimilarityMatrix, q: &[f64]) -> Result<KernelMatrix> {
    KernelMatrix::from_similarity_matrix(s.matrix(), q)
}

/// `log P(Y) = log det(L_Y) − log det(L + I)`. Returns `-inf` when `L_Y`
/// is singular.
pub fn dpp_log_prob(l: &KernelMatrix, y: &[usize]) -> Result<f64> {
    check_indices(y, l.n())?;
    let num = linalg::log_det_psd(&submatrix(l.matrix(), y), true)?;
    let den = linalg::log_det_plus_identity(l.matrix())?;
    Ok(num - den)
}

/// `log det(L + I)`, the log normalizer.
pub fn log_normalizer(l: &KernelMatrix) -> Result<f64> {
    linalg::log_det_plus_identity(l.matrix())
}
