//! Small dense linear-algebra helpers used throughout the solvers.
//!
//! Everything here operates on `nalgebra` dynamic matrices; problem sizes
//! are desk scale (a handful of states/controls), so no care is taken to
//! avoid allocation.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for the Moore–Penrose pseudo-inverse:
/// singular values below `cutoff * sigma_max` are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Relative tolerance for the range condition `||(I - R R^+) S|| <= tol * ||S||`.
pub const RANGE_TOL: f64 = 1e-8;

/// `(a + a') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Moore–Penrose pseudo-inverse via SVD with relative cutoff
/// `PINV_CUTOFF * sigma_max`. A zero matrix maps to a zero matrix.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with_cutoff(a, PINV_CUTOFF)
}

pub fn pinv_with_cutoff(a: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let thresh = rel_cutoff * sigma_max;
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let mut sinv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > thresh && s > 0.0 {
            sinv[(k, k)] = 1.0 / s;
        }
    }
    v_t.transpose() * sinv * u.transpose()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a)
        .first()
        .cloned()
        .unwrap_or(f64::INFINITY)
}

/// Relative defect of the range condition `range(s) ⊆ range(r)`:
/// `||(I - r r^+) s|| / max(||s||, tiny)` in Frobenius norm.
pub fn range_defect(r: &DMatrix<f64>, r_pinv: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let resid = s - r * (r_pinv * s);
    let scale = s.norm();
    if scale < f64::MIN_POSITIVE {
        0.0
    } else {
        resid.norm() / scale
    }
}

/// Same as [`range_defect`] for a vector right-hand side.
pub fn range_defect_vec(r: &DMatrix<f64>, r_pinv: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
    let resid = s - r * (r_pinv * s);
    let scale = s.norm();
    if scale < f64::MIN_POSITIVE {
        0.0
    } else {
        resid.norm() / scale
    }
}

/// Max absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}
