use nalgebra::{Cholesky, DMatrix, DVector};

/// How a symmetric system was solved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveInfo {
    /// Number of jittered refactorizations before success.
    pub jitter_attempts: u32,
    /// True when every Cholesky attempt failed and the SVD path was used.
    pub lstsq_fallback: bool,
}

const JITTER_RETRIES: u32 = 3;

/// Solves `A x = b` for symmetric positive (semi)definite `A`.
///
/// Cholesky first; on failure the diagonal is bumped by
/// `1e-10 · trace(A) / n`, growing tenfold per retry, up to three times.
/// After that the minimum-norm least-squares solution is returned.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, SolveInfo) {
    let mut info = SolveInfo::default();
    if let Some(chol) = Cholesky::new(a.clone()) {
        return (chol.solve(b), info);
    }
    let n = a.nrows().max(1) as f64;
    let base = (1e-10 * a.trace().abs() / n).max(f64::MIN_POSITIVE);
    let mut jitter = base;
    for _ in 0..JITTER_RETRIES {
        info.jitter_attempts += 1;
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return (chol.solve(b), info);
        }
        jitter *= 10.0;
    }
    info.lstsq_fallback = true;
    (min_norm_solve(a, b), info)
}

/// Minimum-norm least-squares solution via the SVD.
pub(crate) fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * f64::EPSILON * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps).expect("SVD computed with both U and V^T")
}

/// Element-wise product of equally sized matrices.
pub(crate) fn hadamard_in_place(acc: &mut DMatrix<f64>, other: &DMatrix<f64>) {
    acc.component_mul_assign(other);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_matches_direct() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let (x, info) = solve_spd(&a, &b);
        assert_eq!(info, SolveInfo::default());
        let r = &a * &x - &b;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn singular_system_falls_back() {
        // rank one, b in the range
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let (x, info) = solve_spd(&a, &b);
        assert!(info.jitter_attempts > 0 || info.lstsq_fallback || (x[0] - 1.0).abs() < 1e-6);
        let r = &a * &x - &b;
        assert!(r.norm() < 1e-6, "residual {}", r.norm());
    }

    #[test]
    fn min_norm_of_rank_deficient() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let x = min_norm_solve(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
