//! Analytic gradients of the sparse-score loss with respect to quality and of
//! the instance-aware loss with respect to features, plus a central
//! finite-difference checker.
//!
//! Both follow from `∂ log det(M) = tr(M⁻¹ ∂M)`. For `L = S ⊙ qqᵀ` with `S`
//! fixed, `∂ log det(L_A + I)/∂q_A = 2·(S_A ⊙ (L_A + I)⁻¹)·q_A`. For
//! `S = λ·VVᵀ + (1−λ)·IoU` with `q` fixed, `∂ log det(L_A)/∂V_A =
//! 2λ·(L_A⁻¹ ⊙ Q_A)·V_A` where `Q = qqᵀ`. Entries outside the index set are
//! zero.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dpp::{check_quality, raw_similarity, KernelMatrix, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, BoundingBox};
use crate::linalg::{self, check_indices, submatrix};
use crate::losses::{self, ClassTarget, IdTargets};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Pass threshold on the maximum relative error of a gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Denominator floor for [`relative_error`], so near-zero entries are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// Gradients of the training losses together with their finite-difference
/// agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_ss_dq: DVector<f64>,
    pub d_id_dv: DMatrix<f64>,
    pub max_fd_rel_err: f64,
}

fn spd_inverse_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match linalg::spd_inverse(m) {
        Ok(inv) => Ok(inv),
        Err(_) => {
            let lam = linalg::min_eigenvalue(m);
            if lam < 0.0 {
                Err(Error::Indefinite { min_eigenvalue: lam })
            } else {
                Err(Error::Singular { max_jitter: 0.0 })
            }
        }
    }
}

/// `∂ log det(L_A + I) / ∂q`, scattered into a length-`n` vector.
fn grad_logdet_plus_i_wrt_q(s: &DMatrix<f64>, q: &[f64], idx: &[usize]) -> Result<DVector<f64>> {
    let n = q.len();
    let mut out = DVector::zeros(n);
    if idx.is_empty() {
        return Ok(out);
    }
    let s_a = submatrix(s, idx);
    let q_a = DVector::from_iterator(idx.len(), idx.iter().map(|&i| q[i]));
    let l_a = DMatrix::from_fn(idx.len(), idx.len(), |i, j| s_a[(i, j)] * q_a[i] * q_a[j]);
    let k = idx.len();
    let inv = spd_inverse_checked(&(l_a + DMatrix::<f64>::identity(k, k)))?;
    let g = s_a.component_mul(&inv) * &q_a * 2.0;
    for (local, &i) in idx.iter().enumerate() {
        out[i] = g[local];
    }
    Ok(out)
}

/// `∂L_SS/∂q = −2·(S_pos ⊙ (L_pos + I)⁻¹)·q_pos + 2·(S_m ⊙ (L_m + I)⁻¹)·q_m`,
/// zero outside `y_m`. `S` is held fixed.
pub fn grad_ss_wrt_q(
    s: &SimilarityMatrix,
    q: &[f64],
    y_pos: &[usize],
    y_m: &[usize],
) -> Result<DVector<f64>> {
    grad_ss_wrt_q_raw(s.matrix(), q, y_pos, y_m)
}

pub(crate) fn grad_ss_wrt_q_raw(
    s: &DMatrix<f64>,
    q: &[f64],
    y_pos: &[usize],
    y_m: &[usize],
) -> Result<DVector<f64>> {
    check_quality(q, s.nrows())?;
    check_indices(y_m, q.len())?;
    check_indices(y_pos, q.len())?;
    if let Some(&p) = y_pos.iter().find(|p| !y_m.contains(p)) {
        return Err(Error::invalid(format!("positive entry {p} is not among the top-m entries")));
    }
    if y_pos.len() == y_m.len() {
        return Ok(DVector::zeros(q.len()));
    }
    let pos = grad_logdet_plus_i_wrt_q(s, q, y_pos)?;
    let all = grad_logdet_plus_i_wrt_q(s, q, y_m)?;
    Ok(all - pos)
}

/// Sparse-score loss as a function of the full quality vector, with `y_pos`
/// and `y_m` given in full indices.
pub fn ss_loss_indexed(s: &DMatrix<f64>, q: &[f64], y_pos: &[usize], y_m: &[usize]) -> Result<f64> {
    let l = KernelMatrix::from_similarity_matrix(s, q)?.restrict(y_m)?;
    let local: Vec<usize> = y_pos
        .iter()
        .map(|p| {
            y_m.iter()
                .position(|m| m == p)
                .ok_or_else(|| Error::invalid(format!("positive entry {p} is not among the top-m entries")))
        })
        .collect::<Result<_>>()?;
    losses::ss_loss(&l, &local)
}

/// `Q_A ⊙ M` times `V_A`, scaled by `2λ` and scattered into an `n×r` matrix.
fn scatter_feature_term(
    out: &mut DMatrix<f64>,
    v: &DMatrix<f64>,
    q: &[f64],
    idx: &[usize],
    inv: &DMatrix<f64>,
    coeff: f64,
) {
    let k = idx.len();
    let w = DMatrix::from_fn(k, k, |i, j| inv[(i, j)] * q[idx[i]] * q[idx[j]]);
    let v_a = DMatrix::from_fn(k, v.ncols(), |i, c| v[(idx[i], c)]);
    let g = w * v_a * coeff;
    for (local, &i) in idx.iter().enumerate() {
        for c in 0..v.ncols() {
            out[(i, c)] += g[(local, c)];
        }
    }
}

/// Adds `weight · ∂(−log det(L_R) + log det(L_G + I))/∂V` for one term.
fn add_id_term(
    out: &mut DMatrix<f64>,
    l: &DMatrix<f64>,
    v: &DMatrix<f64>,
    q: &[f64],
    lambda: f64,
    ground: &[usize],
    reps: &[usize],
    weight: f64,
) -> Result<()> {
    if reps.is_empty() {
        return Ok(());
    }
    let l_r = submatrix(l, reps);
    let inv_r = linalg::spd_inverse(&l_r).map_err(|_| {
        Error::Numerical("representative kernel is singular (duplicate features)".into())
    })?;
    let k = ground.len();
    let inv_g = spd_inverse_checked(&(submatrix(l, ground) + DMatrix::<f64>::identity(k, k)))?;
    scatter_feature_term(out, v, q, reps, &inv_r, -2.0 * lambda * weight);
    scatter_feature_term(out, v, q, ground, &inv_g, 2.0 * lambda * weight);
    Ok(())
}

/// `∂L_ID/∂V` for the all-objects term plus the per-class terms weighted by
/// `1/K`. Rows of `v` are differentiated as free variables; quality is held
/// fixed.
pub fn grad_id_wrt_v(
    v: &DMatrix<f64>,
    iou: &DMatrix<f64>,
    q: &[f64],
    lambda: f64,
    targets: &IdTargets,
) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    if iou.nrows() != n || iou.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "IoU matrix size",
            expected: n,
            actual: iou.nrows(),
        });
    }
    check_quality(q, n)?;
    let mut out = DMatrix::zeros(n, v.ncols());
    if lambda == 0.0 {
        return Ok(out);
    }
    let l = kernel_matrix_raw(v, iou, q, lambda);
    check_targets(targets, n)?;
    add_id_term(&mut out, &l, v, q, lambda, &targets.y_s, &targets.y_rep, 1.0)?;
    let k = targets.per_class.len();
    for t in &targets.per_class {
        add_id_term(&mut out, &l, v, q, lambda, &t.ground, &t.reps, 1.0 / k as f64)?;
    }
    Ok(out)
}

fn symmetric_similarity(v: &DMatrix<f64>, iou: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let s = raw_similarity(v, iou, lambda);
    (&s + s.transpose()) * 0.5
}

fn kernel_matrix_raw(v: &DMatrix<f64>, iou: &DMatrix<f64>, q: &[f64], lambda: f64) -> DMatrix<f64> {
    let s = symmetric_similarity(v, iou, lambda);
    DMatrix::from_fn(q.len(), q.len(), |i, j| s[(i, j)] * q[i] * q[j])
}

fn check_targets(t: &IdTargets, n: usize) -> Result<()> {
    check_indices(&t.y_s, n)?;
    check_indices(&t.y_rep, n)?;
    for c in &t.per_class {
        check_indices(&c.ground, n)?;
        check_indices(&c.reps, n)?;
    }
    Ok(())
}

/// The instance-aware loss as a function of free feature rows, built the
/// same way as [`grad_id_wrt_v`] differentiates it.
pub fn id_loss_from_features(
    v: &DMatrix<f64>,
    iou: &DMatrix<f64>,
    q: &[f64],
    lambda: f64,
    targets: &IdTargets,
) -> Result<f64> {
    let kernel = KernelMatrix::from_similarity_matrix(&symmetric_similarity(v, iou, lambda), q)?;
    Ok(losses::id_loss_scene(&kernel, targets)?.total)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

/// A random problem for checking both gradients.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub v: DMatrix<f64>,
    pub iou: DMatrix<f64>,
    pub q: Vec<f64>,
    pub lambda: f64,
    pub y_pos: Vec<usize>,
    pub y_m: Vec<usize>,
    pub id_targets: IdTargets,
}

impl GradcheckInstance {
    /// Instance with `2 ≤ n ≤ 8` candidates and `1 ≤ r ≤ 8` features.
    pub fn random(seed: u64, lambda: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8usize);
        let r = rng.random_range(1..=8usize);
        let mut v: DMatrix<f64> = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        for mut row in v.row_iter_mut() {
            let norm = row.norm().max(1e-3);
            row /= norm;
        }
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..30.0);
                let y = rng.random_range(0.0..30.0);
                let w = rng.random_range(4.0..20.0);
                let h = rng.random_range(4.0..20.0);
                BoundingBox::new(x, y, x + w, y + h).expect("positive size")
            })
            .collect();
        let iou = iou_matrix(&boxes);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let m_size = rng.random_range(2..=n);
        let mut y_m: Vec<usize> = order[..m_size].to_vec();
        y_m.sort_unstable();
        let pos_size = rng.random_range(1..m_size);
        let mut y_pos: Vec<usize> = order[..pos_size].to_vec();
        y_pos.sort_unstable();

        order.shuffle(&mut rng);
        let s_size = rng.random_range(2..=n);
        let mut y_s: Vec<usize> = order[..s_size].to_vec();
        let rep_size = rng.random_range(1..=s_size.min(3));
        let mut y_rep: Vec<usize> = y_s[..rep_size].to_vec();
        y_s.sort_unstable();
        y_rep.sort_unstable();
        // two categories splitting Y_s; each keeps its share of the representatives
        let mut per_class = Vec::new();
        for k in 0..2u32 {
            let ground: Vec<usize> = y_s.iter().copied().filter(|i| i % 2 == k as usize).collect();
            let reps: Vec<usize> = y_rep.iter().copied().filter(|i| i % 2 == k as usize).collect();
            if !reps.is_empty() {
                per_class.push(ClassTarget {
                    class_id: k,
                    ground,
                    reps,
                });
            }
        }
        Self {
            v,
            iou,
            q,
            lambda,
            y_pos,
            y_m,
            id_targets: IdTargets {
                y_s,
                y_rep,
                per_class,
            },
        }
    }

    /// Analytic gradients with their maximum relative disagreement with
    /// central differences of step `h`.
    pub fn check(&self, h: f64) -> Result<GradientBundle> {
        let s = symmetric_similarity(&self.v, &self.iou, self.lambda);
        let d_ss_dq = grad_ss_wrt_q_raw(&s, &self.q, &self.y_pos, &self.y_m)?;
        let fd_q = finite_diff(
            |q| ss_loss_indexed(&s, q, &self.y_pos, &self.y_m).unwrap_or(f64::NAN),
            &self.q,
            h,
        )?;
        let d_id_dv = grad_id_wrt_v(&self.v, &self.iou, &self.q, self.lambda, &self.id_targets)?;
        let (n, r) = self.v.shape();
        let fd_v = finite_diff(
            |x| {
                let v = DMatrix::from_column_slice(n, r, x);
                id_loss_from_features(&v, &self.iou, &self.q, self.lambda, &self.id_targets)
                    .unwrap_or(f64::NAN)
            },
            self.v.as_slice(),
            h,
        )?;
        let err = max_relative_error(d_ss_dq.as_slice(), &fd_q)
            .max(max_relative_error(d_id_dv.as_slice(), &fd_v));
        Ok(GradientBundle {
            d_ss_dq,
            d_id_dv,
            max_fd_rel_err: err,
        })
    }
}

/// Outcome of a gradient-check sweep over seeded instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub ss_max_rel_err: f64,
    pub id_max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.ss_max_rel_err < tolerance && self.id_max_rel_err < tolerance
    }
}

/// Checks both analytic gradients on `seeds` against central differences.
/// `analytic_scale` multiplies the analytic gradients before comparison and
/// is 1 except when deliberately corrupting them.
pub fn gradcheck_sweep(
    seeds: impl IntoIterator<Item = u64>,
    lambda: f64,
    h: f64,
    analytic_scale: f64,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        instances: 0,
        ss_max_rel_err: 0.0,
        id_max_rel_err: 0.0,
    };
    for seed in seeds {
        let inst = GradcheckInstance::random(seed, lambda);
        let s = symmetric_similarity(&inst.v, &inst.iou, lambda);
        let ss = grad_ss_wrt_q_raw(&s, &inst.q, &inst.y_pos, &inst.y_m)? * analytic_scale;
        let fd_q = finite_diff(
            |q| ss_loss_indexed(&s, q, &inst.y_pos, &inst.y_m).unwrap_or(f64::NAN),
            &inst.q,
            h,
        )?;
        let id = grad_id_wrt_v(&inst.v, &inst.iou, &inst.q, lambda, &inst.id_targets)? * analytic_scale;
        let (n, r) = inst.v.shape();
        let fd_v = finite_diff(
            |x| {
                let v = DMatrix::from_column_slice(n, r, x);
                id_loss_from_features(&v, &inst.iou, &inst.q, lambda, &inst.id_targets)
                    .unwrap_or(f64::NAN)
            },
            inst.v.as_slice(),
            h,
        )?;
        report.ss_max_rel_err = report.ss_max_rel_err.max(max_relative_error(ss.as_slice(), &fd_q));
        report.id_max_rel_err = report.id_max_rel_err.max(max_relative_error(id.as_slice(), &fd_v));
        report.instances += 1;
    }
    Ok(report)
}
