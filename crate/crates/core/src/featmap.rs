//! Deterministic sinusoidal features approximating the RBF kernel.
//!
//! On `[-U, U]` the Laplacian eigenfunctions `sin(π i (x + U) / (2U)) / √U`
//! with frequencies `ω_i = π i / (2U)` expand a stationary kernel as
//! `k(x, y) ≈ Σ_i S(ω_i) ψ_i(x) ψ_i(y)`, `S` being its spectral density.
//! Each local feature is therefore `√S(ω_i) · ψ_i(x)`. For the RBF kernel
//! `exp(−(x−y)²/(2σ²))` the angular spectral density equals
//! [`spectral_density`] evaluated at the ordinary frequency `ω / (2π)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Result, TkmError};

/// `p(z) = √(2πσ²) · exp(−2π²σ²z²)`.
pub fn spectral_density(z: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TkmError::arg(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok((2.0 * PI * sigma * sigma).sqrt() * (-2.0 * PI * PI * sigma * sigma * z * z).exp())
}

/// Lengthscale of `exp(−ρ‖x − y‖²)` in the `exp(−‖x − y‖²/(2σ²))` form.
pub fn sigma_from_rho(rho: f64) -> f64 {
    (1.0 / (2.0 * rho)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    /// Basis functions per input dimension.
    #[serde(rename = "M")]
    pub m: usize,
    /// Half-width of the approximation interval.
    #[serde(rename = "U")]
    pub u: f64,
    pub sigma: f64,
    /// Input dimension.
    #[serde(rename = "D")]
    pub d: usize,
}

impl FeatureMapConfig {
    pub fn new(m: usize, u: f64, sigma: f64, d: usize) -> Result<Self> {
        let cfg = Self { m, u, sigma, d };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(TkmError::arg("M must be at least 1"));
        }
        if !(self.u > 0.0) || !self.u.is_finite() {
            return Err(TkmError::arg(format!("U must be positive, got {}", self.u)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(TkmError::arg(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.d == 0 {
            return Err(TkmError::arg("D must be at least 1"));
        }
        Ok(())
    }

    /// Dims of the weight tensor, `[M; D]`.
    pub fn tensor_dims(&self) -> Vec<usize> {
        vec![self.m; self.d]
    }

    /// `√S(ω_i)` for `i = 1..=M`.
    pub fn basis_weights(&self) -> Vec<f64> {
        (1..=self.m)
            .map(|i| {
                let freq = i as f64 / (4.0 * self.u);
                (2.0 * PI * self.sigma * self.sigma).sqrt().sqrt()
                    * (-PI * PI * self.sigma * self.sigma * freq * freq).exp()
            })
            .collect()
    }

    fn fill_local(&self, x: f64, weights: &[f64], out: &mut [f64]) {
        let inv_sqrt_u = 1.0 / self.u.sqrt();
        let phase = PI * (x + self.u) / (2.0 * self.u);
        for (i, (o, w)) in out.iter_mut().zip(weights).enumerate() {
            *o = inv_sqrt_u * w * (phase * (i + 1) as f64).sin();
        }
    }

    fn check_domain(&self, x: f64, context: impl FnOnce() -> String) -> Result<()> {
        if x.abs() <= self.u {
            Ok(())
        } else {
            Err(TkmError::Domain {
                value: x,
                bound: self.u,
                context: context(),
            })
        }
    }
}

/// Local feature vector `φ(x)` of length `M`.
pub fn local_map(x: f64, cfg: &FeatureMapConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    cfg.check_domain(x, || "passed to the local feature map".into())?;
    let weights = cfg.basis_weights();
    let mut out = DVector::zeros(cfg.m);
    cfg.fill_local(x, &weights, out.as_mut_slice());
    Ok(out)
}

/// Per-mode feature matrices of a dataset: mode `d` is `N × M` with row `n`
/// equal to `φ(x_n⁽ᵈ⁾)`.
#[derive(Debug, Clone)]
pub struct MappedData {
    modes: Vec<DMatrix<f64>>,
}

impl MappedData {
    /// Maps an `N × D` data matrix; any entry outside `[-U, U]` is an error
    /// naming the sample and feature.
    pub fn new(x: &DMatrix<f64>, cfg: &FeatureMapConfig) -> Result<Self> {
        cfg.validate()?;
        if x.ncols() != cfg.d {
            return Err(TkmError::arg(format!(
                "data has {} features, feature map expects {}",
                x.ncols(),
                cfg.d
            )));
        }
        let weights = cfg.basis_weights();
        let mut modes = Vec::with_capacity(cfg.d);
        let mut buf = vec![0.0; cfg.m];
        for d in 0..cfg.d {
            let mut phi = DMatrix::zeros(x.nrows(), cfg.m);
            for n in 0..x.nrows() {
                let v = x[(n, d)];
                cfg.check_domain(v, || format!("at sample {n}, feature {d}"))?;
                cfg.fill_local(v, &weights, &mut buf);
                for (m, b) in buf.iter().enumerate() {
                    phi[(n, m)] = *b;
                }
            }
            modes.push(phi);
        }
        Ok(Self { modes })
    }

    pub fn n_samples(&self) -> usize {
        self.modes[0].nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, d: usize) -> &DMatrix<f64> {
        &self.modes[d]
    }

    /// Local feature vectors of sample `n`.
    pub fn sample(&self, n: usize) -> Vec<DVector<f64>> {
        self.modes.iter().map(|m| m.row(n).transpose()).collect()
    }
}

/// `K_Φ(i, j) = ⟨Φ(x_i), Φ(x_j)⟩_F = Π_d φ(x_i⁽ᵈ⁾)ᵀ φ(x_j⁽ᵈ⁾)`.
pub fn feature_kernel_matrix(x: &DMatrix<f64>, cfg: &FeatureMapConfig) -> Result<DMatrix<f64>> {
    let mapped = MappedData::new(x, cfg)?;
    let n = x.nrows();
    let mut k = DMatrix::from_element(n, n, 1.0);
    for phi in &mapped.modes {
        let g = phi * phi.transpose();
        k.component_mul_assign(&g);
    }
    // exact symmetry regardless of the GEMM kernel's summation order
    for i in 0..n {
        for j in 0..i {
            k[(i, j)] = k[(j, i)];
        }
    }
    Ok(k)
}

/// `K(i, j) = exp(−‖x_i − x_j‖² / (2σ²))`.
pub fn rbf_kernel_matrix(x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TkmError::arg(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let n = x.nrows();
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let v = rbf(x.row(i).iter(), x.row(j).iter(), sigma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

pub(crate) fn rbf<'a>(
    a: impl Iterator<Item = &'a f64>,
    b: impl Iterator<Item = &'a f64>,
    sigma: f64,
) -> f64 {
    let d2: f64 = a.zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Relative kernel errors over an `(M, U)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGridReport {
    pub sigma: f64,
    pub m_values: Vec<usize>,
    pub u_values: Vec<f64>,
    /// `rel_errors[i][j]` is for `m_values[i]`, `u_values[j]`.
    pub rel_errors: Vec<Vec<f64>>,
}

impl KernelGridReport {
    pub fn get(&self, m: usize, u: f64) -> Option<f64> {
        let i = self.m_values.iter().position(|&v| v == m)?;
        let j = self.u_values.iter().position(|&v| v == u)?;
        Some(self.rel_errors[i][j])
    }

    /// The error column for one `U`, ordered like `m_values`.
    pub fn column(&self, u: f64) -> Option<Vec<f64>> {
        let j = self.u_values.iter().position(|&v| v == u)?;
        Some(self.rel_errors.iter().map(|row| row[j]).collect())
    }

    /// `M,U,rel_error` with one row per cell, errors to 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("M,U,rel_error\n");
        for (i, m) in self.m_values.iter().enumerate() {
            for (j, u) in self.u_values.iter().enumerate() {
                let _ = writeln!(out, "{m},{u},{:.16e}", self.rel_errors[i][j]);
            }
        }
        out
    }
}

/// Evaluates `‖K_Φ − K_RBF‖_F / ‖K_RBF‖_F` for every grid cell.
///
/// Every `U` must strictly exceed the largest absolute data value, otherwise
/// the sample lies on or past the interval where all features vanish.
pub fn grid_search_map_params(
    sample: &DMatrix<f64>,
    sigma: f64,
    m_grid: &[usize],
    u_grid: &[f64],
) -> Result<KernelGridReport> {
    if sample.nrows() == 0 {
        return Err(TkmError::arg("empty sample"));
    }
    if m_grid.is_empty() || u_grid.is_empty() {
        return Err(TkmError::arg("empty M or U grid"));
    }
    let max_abs = sample.amax();
    if let Some(&u) = u_grid.iter().find(|&&u| !(u > max_abs)) {
        return Err(TkmError::Domain {
            value: max_abs,
            bound: u,
            context: "(largest |x| in the sample, which U must strictly exceed)".into(),
        });
    }
    let k_rbf = rbf_kernel_matrix(sample, sigma)?;
    let denom = k_rbf.norm();
    let mut rel_errors = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        let mut row = Vec::with_capacity(u_grid.len());
        for &u in u_grid {
            let cfg = FeatureMapConfig::new(m, u, sigma, sample.ncols())?;
            let k_phi = feature_kernel_matrix(sample, &cfg)?;
            row.push((k_phi - &k_rbf).norm() / denom);
        }
        rel_errors.push(row);
    }
    Ok(KernelGridReport {
        sigma,
        m_values: m_grid.to_vec(),
        u_values: u_grid.to_vec(),
        rel_errors,
    })
}
