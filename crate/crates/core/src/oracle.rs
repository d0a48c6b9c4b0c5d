//! Reference solvers used to cross-check the CP solver on small problems.
//!
//! The dense primal solver builds the full `N × M^D` feature matrix and
//! solves the weighted ridge normal equations directly. The dual solver
//! solves `(K + Nλ C⁻¹) α = y` for an arbitrary kernel, which for the
//! feature-map kernel is the same problem as the dense primal one.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::cpd::DenseTensor;
use crate::dataeval::check_labels;
use crate::error::{Result, TkmError};
use crate::featmap::{rbf, FeatureMapConfig, MappedData};
use crate::linalg::{min_norm_solve, solve_spd, SolveInfo};

/// Largest `M^D` the dense primal solver accepts. Its Gram matrix has
/// `(M^D)²` entries.
pub const DENSE_PRIMAL_CAP: usize = 10_000;

/// Largest training set the dual solver accepts.
pub const DUAL_SAMPLE_CAP: usize = 5_000;

fn check_problem(x: &DMatrix<f64>, y: &[f64], weights: &[f64], lambda: f64) -> Result<()> {
    if x.nrows() != y.len() || y.len() != weights.len() {
        return Err(TkmError::arg(
            "x, y and weights disagree on the sample count",
        ));
    }
    if y.is_empty() {
        return Err(TkmError::arg("no samples"));
    }
    if weights.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(TkmError::arg("sample weights must be positive and finite"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TkmError::arg(format!("lambda must be >= 0, got {lambda}")));
    }
    check_labels(y)
}

/// Row `n` is `vec(Φ(x_n))`, little-endian.
pub fn dense_features(x: &DMatrix<f64>, fm: &FeatureMapConfig) -> Result<DMatrix<f64>> {
    let p = checked_size(fm)?;
    let mapped = MappedData::new(x, fm)?;
    let mut phi = DMatrix::zeros(x.nrows(), p);
    for n in 0..x.nrows() {
        let t = DenseTensor::outer(&mapped.sample(n))?;
        for (j, v) in t.values().iter().enumerate() {
            phi[(n, j)] = *v;
        }
    }
    Ok(phi)
}

fn checked_size(fm: &FeatureMapConfig) -> Result<usize> {
    fm.validate()?;
    let mut p: usize = 1;
    for _ in 0..fm.d {
        p = p
            .checked_mul(fm.m)
            .filter(|&v| v <= DENSE_PRIMAL_CAP)
            .ok_or(TkmError::SizeLimit {
                requested: fm.m.checked_pow(fm.d as u32).unwrap_or(usize::MAX),
                cap: DENSE_PRIMAL_CAP,
            })?;
    }
    Ok(p)
}

/// Weighted ridge regression over the full feature tensor,
/// `min_W (1/N) Σ c_n (⟨Φ(x_n), W⟩ − y_n)² + λ‖W‖²`.
///
/// With `λ = 0` the minimum-norm least-squares solution is returned.
pub fn fit_dense_primal(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    fm: &FeatureMapConfig,
) -> Result<(DenseTensor, SolveInfo)> {
    check_problem(x, y, weights, lambda)?;
    let phi = dense_features(x, fm)?;
    let n = y.len() as f64;
    let mut cphi = phi.clone();
    for (mut row, &c) in cphi.row_iter_mut().zip(weights) {
        row *= c;
    }
    let mut a = phi.tr_mul(&cphi) / n;
    let b = cphi.tr_mul(&DVector::from_column_slice(y)) / n;
    let (w, info) = if lambda > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        solve_spd(&a, &b)
    } else {
        let info = SolveInfo {
            jitter_attempts: 0,
            lstsq_fallback: true,
        };
        (min_norm_solve(&a, &b), info)
    };
    Ok((DenseTensor::new(fm.tensor_dims(), w.data.into())?, info))
}

/// `⟨Φ(x_n), W⟩` for every row of `x`.
pub fn predict_dense(w: &DenseTensor, x: &DMatrix<f64>, fm: &FeatureMapConfig) -> Result<Vec<f64>> {
    if w.dims() != fm.tensor_dims().as_slice() {
        return Err(TkmError::FeatureMapMismatch(format!(
            "dense weights have dims {:?}, feature map implies {:?}",
            w.dims(),
            fm.tensor_dims()
        )));
    }
    let phi = dense_features(x, fm)?;
    Ok((phi * DVector::from_column_slice(w.values()))
        .iter()
        .copied()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualKernel {
    /// `exp(−‖x − x'‖² / (2σ²))`.
    Rbf { sigma: f64 },
    /// `⟨Φ(x), Φ(x')⟩_F` of the sinusoidal map.
    FeatureMap(FeatureMapConfig),
}

impl DualKernel {
    /// `K(a_i, b_j)`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != b.ncols() {
            return Err(TkmError::arg("kernel inputs have different dimensions"));
        }
        match *self {
            DualKernel::Rbf { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(TkmError::arg(format!(
                        "sigma must be positive, got {sigma}"
                    )));
                }
                Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                    rbf(a.row(i).iter(), b.row(j).iter(), sigma)
                }))
            }
            DualKernel::FeatureMap(fm) => {
                let ma = MappedData::new(a, &fm)?;
                let mb = MappedData::new(b, &fm)?;
                let mut k = DMatrix::from_element(a.nrows(), b.nrows(), 1.0);
                for d in 0..fm.d {
                    k.component_mul_assign(&(ma.mode(d) * mb.mode(d).transpose()));
                }
                Ok(k)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualKrrModel {
    pub alphas: DVector<f64>,
    pub train_x: DMatrix<f64>,
    pub kernel: DualKernel,
    pub lambda: f64,
    /// Diagonal bumps needed before the factorization succeeded.
    pub jitter_attempts: u32,
}

impl DualKrrModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let k = self.kernel.cross(x, &self.train_x)?;
        Ok((k * &self.alphas).iter().copied().collect())
    }
}

/// Weighted kernel ridge regression in the dual, `(K + Nλ C⁻¹) α = y`.
///
/// The system is factored with Cholesky, retrying with a growing diagonal
/// jitter; a system that stays indefinite is reported as a numerical error.
pub fn fit_dual(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    kernel: DualKernel,
) -> Result<DualKrrModel> {
    check_problem(x, y, weights, lambda)?;
    let n = y.len();
    if n > DUAL_SAMPLE_CAP {
        return Err(TkmError::SizeLimit {
            requested: n,
            cap: DUAL_SAMPLE_CAP,
        });
    }
    let mut a = kernel.cross(x, x)?;
    a = (&a + a.transpose()) * 0.5;
    for (i, &c) in weights.iter().enumerate() {
        a[(i, i)] += n as f64 * lambda / c;
    }
    let b = DVector::from_column_slice(y);
    let base = (1e-10 * a.trace().abs() / n as f64).max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for attempt in 0..=3u32 {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(DualKrrModel {
                alphas: chol.solve(&b),
                train_x: x.clone(),
                kernel,
                lambda,
                jitter_attempts: attempt,
            });
        }
        jitter = if attempt == 0 { base } else { jitter * 10.0 };
    }
    Err(TkmError::Numerical(
        "dual system is not positive definite even after jitter".into(),
    ))
}
