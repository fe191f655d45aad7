//! Small dense helpers shared by the DPP, loss and gradient code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Pivots at or below this fraction of the largest diagonal entry are
/// treated as zero by [`cholesky`].
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-12;

/// Eigenvalues below `-PSD_TOLERANCE` mark a matrix as indefinite.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Default base jitter for [`log_det_psd`] retries.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Rows and columns of `m` selected by `idx`, in the order given.
pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn subvector(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Checks that `idx` holds distinct indices below `n`.
pub fn check_indices(idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if seen[i] {
            return Err(Error::invalid(format!("index {i} repeated in subset")));
        }
        seen[i] = true;
    }
    Ok(())
}

pub fn check_square(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what,
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    Ok(())
}

pub fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    check_square(m, what)?;
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid(format!("{what} has non-finite entries")));
            }
            if (a - b).abs() > 1e-10 * scale {
                return Err(Error::invalid(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Lower Cholesky factor, or `None` when a pivot is not safely positive.
pub fn cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
    let floor = SINGULAR_PIVOT_RTOL * max_diag;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Result of [`log_det_psd`]: the value and any diagonal jitter that had to
/// be added to factor the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDet {
    pub value: f64,
    pub jitter: Option<f64>,
}

/// Log-determinant of a symmetric positive semi-definite matrix.
///
/// Factors with Cholesky. On failure the matrix is checked for
/// indefiniteness; a singular PSD matrix yields `-inf` when
/// `allow_singular` is set, otherwise factoring is retried with jitter
/// `ε, 10ε, 100ε` before giving up.
pub fn log_det_psd_with(m: &DMatrix<f64>, allow_singular: bool, jitter_base: f64) -> Result<LogDet> {
    check_symmetric(m, "log-det argument")?;
    if m.nrows() == 0 {
        return Ok(LogDet {
            value: 0.0,
            jitter: None,
        });
    }
    if let Some(l) = cholesky(m) {
        return Ok(LogDet {
            value: log_det_from_factor(&l),
            jitter: None,
        });
    }
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(1.0f64, f64::max);
    let lam_min = min_eigenvalue(m);
    if lam_min < -PSD_TOLERANCE * scale {
        return Err(Error::Indefinite {
            min_eigenvalue: lam_min,
        });
    }
    if allow_singular {
        return Ok(LogDet {
            value: f64::NEG_INFINITY,
            jitter: None,
        });
    }
    let n = m.nrows();
    for mult in [1.0, 10.0, 100.0] {
        let eps = jitter_base * mult;
        let shifted = m + DMatrix::<f64>::identity(n, n) * eps;
        if let Some(l) = cholesky(&shifted) {
            return Ok(LogDet {
                value: log_det_from_factor(&l),
                jitter: Some(eps),
            });
        }
    }
    Err(Error::Singular {
        max_jitter: 100.0 * jitter_base,
    })
}

/// [`log_det_psd_with`] using the default jitter.
pub fn log_det_psd(m: &DMatrix<f64>, allow_singular: bool) -> Result<f64> {
    log_det_psd_with(m, allow_singular, DEFAULT_JITTER).map(|d| d.value)
}

/// `log det(M + I)` for a PSD matrix; never singular.
pub fn log_det_plus_identity(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    log_det_psd(&(m + DMatrix::<f64>::identity(n, n)), false)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let l = cholesky(m).ok_or(Error::Singular { max_jitter: 0.0 })?;
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::Singular { max_jitter: 0.0 })?;
    Ok(l_inv.transpose() * l_inv)
}

pub fn outer(q: &[f64]) -> DMatrix<f64> {
    let v = DVector::from_column_slice(q);
    &v * v.transpose()
}
