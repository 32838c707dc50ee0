//! Dense symmetric linear algebra for covariance tracking.
//!
//! The filter carries a `d x d` parameter covariance and repeatedly needs
//! Cholesky factorizations, solves against symmetric positive definite
//! matrices, re-symmetrization after floating-point updates, and a bound on
//! the smallest eigenvalue. Storage and matrix products come from `ndarray`;
//! the factorizations here are written directly so their failure behavior
//! (one jitter retry, then a hard error) is explicit.

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Relative tolerance used to accept a matrix as symmetric.
const SYMMETRY_RTOL: f64 = 1e-10;

/// Tolerance on the smallest-eigenvalue bisection, relative to a
/// spectral-norm bound of the input.
const MIN_EIG_RTOL: f64 = 1e-10;

/// Iteration cap for the bisection in [`min_eigenvalue`].
const MIN_EIG_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum LinalgError {
    /// A Cholesky pivot stayed non-positive after the single jitter retry.
    #[error(
        "matrix is not positive definite: pivot {pivot:.3e} at row {index} after jitter retry"
    )]
    NotPositiveDefinite { index: usize, pivot: f64 },
    /// An iterative routine hit its iteration cap.
    #[error("no convergence within {cap} iterations")]
    NoConvergence { cap: usize },
    /// Operand dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    /// A NaN or infinite entry where a finite one is required.
    #[error("non-finite entry at ({row}, {col})")]
    NotFinite { row: usize, col: usize },
    /// Symmetry deviation beyond the accepted relative tolerance.
    #[error("not symmetric: |m - m^T| reaches {deviation:.3e} at ({row}, {col})")]
    NotSymmetric {
        row: usize,
        col: usize,
        deviation: f64,
    },
}

/// Square symmetric matrix with finite entries, used for covariances.
///
/// Construction validates squareness, finiteness, and symmetry to a relative
/// tolerance of `1e-10`. Positive definiteness is deliberately *not* checked
/// here: downstream updates may produce values that are only semidefinite up
/// to rounding (the library keeps them above `-1e-8 * trace/dim`), and
/// definiteness is enforced exactly where it matters, in [`cholesky_factor`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: Array2<f64>,
}

impl SpdMatrix {
    /// Validates and wraps a symmetric matrix.
    pub fn new(m: Array2<f64>) -> Result<Self, LinalgError> {
        let (rows, cols) = m.dim();
        if rows != cols {
            return Err(LinalgError::ShapeMismatch {
                expected: "square matrix".to_string(),
                got: format!("{rows} x {cols}"),
            });
        }
        let mut scale: f64 = 0.0;
        for ((i, j), &v) in m.indexed_iter() {
            if !v.is_finite() {
                return Err(LinalgError::NotFinite { row: i, col: j });
            }
            scale = scale.max(v.abs());
        }
        let tol = SYMMETRY_RTOL * scale;
        for i in 0..rows {
            for j in (i + 1)..cols {
                let dev = (m[[i, j]] - m[[j, i]]).abs();
                if dev > tol {
                    return Err(LinalgError::NotSymmetric {
                        row: i,
                        col: j,
                        deviation: dev,
                    });
                }
            }
        }
        Ok(Self { m })
    }

    /// Identity scaled by `s`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self {
            m: Array2::from_diag_elem(dim, s),
        }
    }

    /// Identity matrix.
    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        if let Some((i, _)) = diag.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NotFinite { row: i, col: i });
        }
        Ok(Self {
            m: Array2::from_diag(&Array1::from_vec(diag.to_vec())),
        })
    }

    /// Wraps a matrix that is symmetric by construction, skipping validation.
    ///
    /// Callers must guarantee squareness, finiteness, and exact symmetry
    /// (e.g. output of [`symmetrize`]); used on hot paths where re-validating
    /// a `d x d` matrix every step would dominate the update itself.
    pub(crate) fn from_symmetric_unchecked(m: Array2<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.m.diag().sum()
    }

    /// Borrows the underlying storage.
    pub fn as_array(&self) -> &Array2<f64> {
        &self.m
    }

    /// Consumes the wrapper and returns the underlying storage.
    pub fn into_inner(self) -> Array2<f64> {
        self.m
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = m`.
///
/// If a pivot comes out non-positive, one retry is made on
/// `m + (1e-8 * trace/dim) * I`; a second failure is reported as
/// [`LinalgError::NotPositiveDefinite`]. The jitter magnitude follows the
/// matrix scale so that near-singular covariances factor while genuinely
/// indefinite ones still fail.
pub fn cholesky_factor(m: &SpdMatrix) -> Result<Array2<f64>, LinalgError> {
    match cholesky_raw(m.as_array()) {
        Ok(l) => Ok(l),
        Err(_) => {
            let jitter = 1e-8 * m.trace() / m.dim() as f64;
            let mut jittered = m.as_array().clone();
            for i in 0..m.dim() {
                jittered[[i, i]] += jitter;
            }
            cholesky_raw(&jittered)
        }
    }
}

/// Unjittered Cholesky; fails on the first non-positive pivot.
fn cholesky_raw(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    // Flat row-major scratch keeps the inner dot products on contiguous rows.
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let diag = d.sqrt();
        l[j * n + j] = diag;
        for i in (j + 1)..n {
            let (row_i, row_j) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = row_i.iter().zip(row_j).map(|(x, y)| x * y).sum();
            l[i * n + j] = (a[[i, j]] - dot) / diag;
        }
    }
    Ok(Array2::from_shape_vec((n, n), l).expect("n*n buffer"))
}

/// Solves `m x = rhs` for a matrix right-hand side via Cholesky.
pub fn spd_solve(m: &SpdMatrix, rhs: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    if rhs.nrows() != m.dim() {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("{} right-hand-side rows", m.dim()),
            got: format!("{}", rhs.nrows()),
        });
    }
    let l = cholesky_factor(m)?;
    let n = m.dim();
    let k = rhs.ncols();
    let mut x = rhs.clone();
    // Forward substitution: L y = rhs.
    for i in 0..n {
        for r in 0..i {
            let lir = l[[i, r]];
            if lir != 0.0 {
                for c in 0..k {
                    let t = lir * x[[r, c]];
                    x[[i, c]] -= t;
                }
            }
        }
        let d = l[[i, i]];
        for c in 0..k {
            x[[i, c]] /= d;
        }
    }
    // Back substitution: L^T x = y.
    for i in (0..n).rev() {
        for r in (i + 1)..n {
            let lri = l[[r, i]];
            if lri != 0.0 {
                for c in 0..k {
                    let t = lri * x[[r, c]];
                    x[[i, c]] -= t;
                }
            }
        }
        let d = l[[i, i]];
        for c in 0..k {
            x[[i, c]] /= d;
        }
    }
    Ok(x)
}

/// Solves `m x = rhs` for a single vector right-hand side.
pub fn spd_solve_vec(m: &SpdMatrix, rhs: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let col = rhs.view().insert_axis(ndarray::Axis(1)).to_owned();
    let x = spd_solve(m, &col)?;
    Ok(x.index_axis(ndarray::Axis(1), 0).to_owned())
}

/// Returns `(m + m^T) / 2`.
///
/// Exact for already-symmetric input; used after covariance updates to strip
/// the antisymmetric part that floating-point arithmetic introduces.
///
/// # Panics
///
/// Panics if `m` is not square.
pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    assert_eq!(m.nrows(), m.ncols(), "symmetrize requires a square matrix");
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix, resolved to `1e-10` of a
/// spectral-norm bound — precise enough to certify floors like
/// `-1e-8 * trace/dim` on near-semidefinite matrices.
///
/// Bisects on the predicate "`m - lambda I` admits a Cholesky factorization",
/// starting from the Gershgorin lower bound and the smallest diagonal entry
/// (a Rayleigh-quotient upper bound). Each probe costs one factorization
/// attempt, so the total work is `O(d^3 log(range/tol))`. The input may be
/// indefinite; only symmetry is required.
pub fn min_eigenvalue(m: &SpdMatrix) -> Result<f64, LinalgError> {
    let n = m.dim();
    let a = m.as_array();
    if n == 0 {
        return Err(LinalgError::ShapeMismatch {
            expected: "non-empty matrix".to_string(),
            got: "0 x 0".to_string(),
        });
    }
    let mut gersh_lo = f64::INFINITY;
    let mut diag_hi = f64::INFINITY;
    let mut norm_bound: f64 = 0.0;
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| a[[i, j]].abs()).sum();
        gersh_lo = gersh_lo.min(a[[i, i]] - off);
        diag_hi = diag_hi.min(a[[i, i]]);
        norm_bound = norm_bound.max(a[[i, i]].abs() + off);
    }
    let tol = MIN_EIG_RTOL * norm_bound.max(f64::MIN_POSITIVE);
    // lambda_min(m) > lo and lambda_min(m) <= hi hold strictly at the start,
    // and each probe preserves them: success at s means lambda_min > s.
    let mut lo = gersh_lo - tol;
    let mut hi = diag_hi + tol;
    let mut iters = 0;
    while hi - lo > tol {
        if iters >= MIN_EIG_MAX_ITERS {
            return Err(LinalgError::NoConvergence {
                cap: MIN_EIG_MAX_ITERS,
            });
        }
        iters += 1;
        let mid = 0.5 * (lo + hi);
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[[i, i]] -= mid;
        }
        if cholesky_raw(&shifted).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sufficient certificate that `min_eigenvalue(m) > floor`: an unjittered
/// Cholesky factorization of `m − floor·I` succeeding proves the bound.
/// `Ok(false)` proves nothing by itself — use [`min_eigenvalue`] to measure.
pub fn min_eigenvalue_exceeds(m: &Array2<f64>, floor: f64) -> Result<bool, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::ShapeMismatch {
            expected: "square matrix".to_string(),
            got: format!("{} x {}", m.nrows(), m.ncols()),
        });
    }
    if !floor.is_finite() {
        return Err(LinalgError::ShapeMismatch {
            expected: "finite floor".to_string(),
            got: format!("{floor}"),
        });
    }
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[[i, i]] -= floor;
    }
    Ok(cholesky_raw(&shifted).is_ok())
}

/// Widest BLAS kernel this CPU can run, when the features are advertised.
#[cfg(target_arch = "x86_64")]
fn preferred_blas_kernel() -> Option<&'static str> {
    if std::arch::is_x86_feature_detected!("avx512f")
        && std::arch::is_x86_feature_detected!("avx512bw")
        && std::arch::is_x86_feature_detected!("avx512dq")
        && std::arch::is_x86_feature_detected!("avx512vl")
    {
        Some("SKYLAKEX")
    } else if std::arch::is_x86_feature_detected!("avx2")
        && std::arch::is_x86_feature_detected!("fma")
    {
        Some("HASWELL")
    } else {
        None
    }
}

/// Points the system BLAS at the widest vector kernel this CPU advertises.
///
/// Hypervisors often mask CPUID model names, which makes the BLAS runtime
/// dispatch fall back to a conservative kernel even though the wide vector
/// extensions are all present — a 2-4x slowdown of every matrix product.
/// The BLAS reads `OPENBLAS_CORETYPE` in a constructor that runs before
/// `main`, so the variable cannot be set from within the running process;
/// instead, when it is unset and the CPU reports the needed features, this
/// re-executes the current binary once with the variable (and allocator
/// tuning for the large matrices the filter frees every step) in place. An
/// existing `OPENBLAS_CORETYPE` always wins, and the re-executed process
/// returns from this function immediately.
///
/// Call it as the first statement of `main` and nowhere else: on success it
/// does not return, and any state built before it is lost. Skipping it
/// affects speed, never results.
pub fn tune_blas_for_host() {
    #[cfg(all(unix, target_arch = "x86_64"))]
    {
        if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
            return;
        }
        let Some(kernel) = preferred_blas_kernel() else {
            return;
        };
        let Ok(exe) = std::env::current_exe() else {
            return;
        };
        use std::os::unix::process::CommandExt;
        let mut cmd = std::process::Command::new(exe);
        cmd.args(std::env::args_os().skip(1))
            .env("OPENBLAS_CORETYPE", kernel);
        for threshold in ["MALLOC_MMAP_THRESHOLD_", "MALLOC_TRIM_THRESHOLD_"] {
            if std::env::var_os(threshold).is_none() {
                cmd.env(threshold, "1073741824");
            }
        }
        // Replaces this process on success; on failure fall through and run
        // with whatever kernel the BLAS picked on its own.
        let _ = cmd.exec();
    }
}
