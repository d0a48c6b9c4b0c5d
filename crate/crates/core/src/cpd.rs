//! Canonical polyadic (CP) tensors.
//!
//! A rank-`R` CP tensor over dims `[M_1, .., M_D]` is
//! `Σ_r γ_r a_r⁽¹⁾ ⊗ … ⊗ a_r⁽ᴰ⁾`. Factor `d` stores the vectors `a_r⁽ᵈ⁾` as the
//! columns of an `M_d × R` matrix. All inner products and evaluations are
//! computed from small `R × P` Gram matrices; nothing here materializes the
//! full tensor except [`CpdTensor::to_full`].
//!
//! Dense tensors use little-endian (first index fastest) vectorization:
//! the 0-based multi-index `(i_1, .., i_D)` maps to
//! `i_1 + M_1·i_2 + M_1·M_2·i_3 + …`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TkmError};
use crate::linalg::hadamard_in_place;

/// Default cap on the number of entries [`CpdTensor::to_full`] will produce.
pub const DENSE_ENTRY_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CpdTensor {
    factors: Vec<DMatrix<f64>>,
    gamma: DVector<f64>,
}

impl CpdTensor {
    /// Builds a tensor from factor matrices and component scalings.
    pub fn from_parts(factors: Vec<DMatrix<f64>>, gamma: DVector<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(TkmError::arg("a CP tensor needs at least one factor"));
        }
        let rank = gamma.len();
        if rank == 0 {
            return Err(TkmError::arg("rank must be at least 1"));
        }
        for (d, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return Err(TkmError::arg(format!(
                    "factor {d} has {} columns, gamma has length {rank}",
                    f.ncols()
                )));
            }
            if f.nrows() == 0 {
                return Err(TkmError::arg(format!("factor {d} has zero rows")));
            }
        }
        Ok(Self { factors, gamma })
    }

    fn check_shape(dims: &[usize], rank: usize) -> Result<()> {
        if rank == 0 {
            return Err(TkmError::arg("rank must be at least 1"));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(TkmError::arg(format!(
                "dims must be nonempty and strictly positive, got {dims:?}"
            )));
        }
        Ok(())
    }

    /// Standard-normal draws scaled to unit columns, `γ = 1`. Reproducible for
    /// a fixed seed.
    pub fn new_random(dims: &[usize], rank: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(dims, rank, &mut rng)
    }

    /// Like [`CpdTensor::new_random`], drawing from a caller-provided RNG.
    pub fn random_with<R: Rng + ?Sized>(dims: &[usize], rank: usize, rng: &mut R) -> Result<Self> {
        Self::check_shape(dims, rank)?;
        let factors = dims
            .iter()
            .map(|&m| DMatrix::from_fn(m, rank, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let t = Self {
            factors,
            gamma: DVector::from_element(rank, 1.0),
        }
        .normalize_factors();
        // unit columns, and the scale the draw happened to have is dropped
        Ok(Self {
            factors: t.factors,
            gamma: DVector::from_element(rank, 1.0),
        })
    }

    /// The zero tensor in canonical form: unit `e_1` columns and `γ = 0`.
    pub fn zeros(dims: &[usize], rank: usize) -> Result<Self> {
        Self::check_shape(dims, rank)?;
        let factors = dims
            .iter()
            .map(|&m| {
                let mut f = DMatrix::zeros(m, rank);
                f.row_mut(0).fill(1.0);
                f
            })
            .collect();
        Ok(Self {
            factors,
            gamma: DVector::zeros(rank),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn rank(&self) -> usize {
        self.gamma.len()
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn factor(&self, d: usize) -> &DMatrix<f64> {
        &self.factors[d]
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    /// `Σ_d M_d·R + R`.
    pub fn parameter_count(&self) -> usize {
        self.factors.iter().map(|f| f.len()).sum::<usize>() + self.rank()
    }

    /// Factor `d` with the component scalings multiplied into its columns.
    pub fn scaled_factor(&self, d: usize) -> DMatrix<f64> {
        let mut f = self.factors[d].clone();
        for (r, mut col) in f.column_iter_mut().enumerate() {
            col *= self.gamma[r];
        }
        f
    }

    /// Replaces factor `d` and resets `γ` to ones. Used by the block solver,
    /// which solves for a factor that already carries the scalings.
    pub(crate) fn with_absorbed_factor(&self, d: usize, factor: DMatrix<f64>) -> Self {
        let mut factors = self.factors.clone();
        factors[d] = factor;
        Self {
            factors,
            gamma: DVector::from_element(self.rank(), 1.0),
        }
    }

    /// Unit-norm factor columns with all scaling moved into `γ`.
    ///
    /// A component with an all-zero column in any mode represents nothing, so
    /// its `γ_r` becomes 0 and the zero column is replaced by `e_1`.
    pub fn normalize_factors(&self) -> Self {
        let mut factors = self.factors.clone();
        let mut gamma = self.gamma.clone();
        for r in 0..self.rank() {
            let mut dead = false;
            for f in factors.iter_mut() {
                let mut col = f.column_mut(r);
                let n = col.norm();
                if n > 0.0 && n.is_finite() {
                    col /= n;
                    gamma[r] *= n;
                } else {
                    col.fill(0.0);
                    col[0] = 1.0;
                    dead = true;
                }
            }
            if dead {
                gamma[r] = 0.0;
            }
        }
        Self { factors, gamma }
    }

    fn check_same_dims(&self, other: &CpdTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(TkmError::arg(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Hadamard product of `A⁽ⁱ⁾ᵀ B⁽ⁱ⁾` over all modes except `skip`.
    pub(crate) fn cross_gram(&self, other: &CpdTensor, skip: Option<usize>) -> DMatrix<f64> {
        let mut acc = DMatrix::from_element(self.rank(), other.rank(), 1.0);
        for (i, (a, b)) in self.factors.iter().zip(&other.factors).enumerate() {
            if Some(i) == skip {
                continue;
            }
            hadamard_in_place(&mut acc, &(a.transpose() * b));
        }
        acc
    }

    /// Frobenius inner product `γ_Aᵀ (⊛_d A⁽ᵈ⁾ᵀB⁽ᵈ⁾) γ_B`.
    pub fn inner_product(&self, other: &CpdTensor) -> Result<f64> {
        self.check_same_dims(other)?;
        let g = self.cross_gram(other, None);
        Ok(self.gamma.dot(&(g * &other.gamma)))
    }

    pub fn norm_squared(&self) -> f64 {
        let g = self.cross_gram(self, None);
        self.gamma.dot(&(g * &self.gamma)).max(0.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// `‖A − B‖²_F` via the expansion `‖A‖² − 2⟨A,B⟩ + ‖B‖²`.
    pub fn distance_squared(&self, other: &CpdTensor) -> Result<f64> {
        let cross = self.inner_product(other)?;
        Ok(self.norm_squared() - 2.0 * cross + other.norm_squared())
    }

    /// `⟨φ⁽¹⁾ ⊗ … ⊗ φ⁽ᴰ⁾, A⟩_F` computed as `γᵀ ⊛_d (φ⁽ᵈ⁾ᵀ A⁽ᵈ⁾)`.
    pub fn evaluate(&self, local_features: &[DVector<f64>]) -> Result<f64> {
        if local_features.len() != self.order() {
            return Err(TkmError::arg(format!(
                "expected {} feature vectors, got {}",
                self.order(),
                local_features.len()
            )));
        }
        let mut z = self.gamma.clone();
        for (d, (f, phi)) in self.factors.iter().zip(local_features).enumerate() {
            if phi.len() != f.nrows() {
                return Err(TkmError::arg(format!(
                    "feature vector {d} has length {}, factor has {} rows",
                    phi.len(),
                    f.nrows()
                )));
            }
            z.component_mul_assign(&f.tr_mul(phi));
        }
        Ok(z.sum())
    }

    /// Dense little-endian reconstruction, refusing more than [`DENSE_ENTRY_CAP`] entries.
    pub fn to_full(&self) -> Result<DenseTensor> {
        self.to_full_capped(DENSE_ENTRY_CAP)
    }

    pub fn to_full_capped(&self, cap: usize) -> Result<DenseTensor> {
        let dims = self.dims();
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &m| acc.checked_mul(m))
            .filter(|&t| t <= cap)
            .ok_or(TkmError::SizeLimit {
                requested: dims.iter().fold(1usize, |a, &m| a.saturating_mul(m)),
                cap,
            })?;
        let mut values = vec![0.0; total];
        let mut term = Vec::with_capacity(total);
        for r in 0..self.rank() {
            if self.gamma[r] == 0.0 {
                continue;
            }
            term.clear();
            term.push(self.gamma[r]);
            for f in &self.factors {
                let col = f.column(r);
                let prev = std::mem::take(&mut term);
                term.reserve(prev.len() * col.len());
                for &c in col.iter() {
                    term.extend(prev.iter().map(|&p| p * c));
                }
            }
            for (v, t) in values.iter_mut().zip(&term) {
                *v += t;
            }
        }
        DenseTensor::new(dims, values)
    }
}

/// On-disk layout: factors are flattened column-major.
#[derive(Serialize, Deserialize)]
struct CpdRepr {
    dims: Vec<usize>,
    rank: usize,
    gamma: Vec<f64>,
    factors: Vec<Vec<f64>>,
}

impl Serialize for CpdTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CpdRepr {
            dims: self.dims(),
            rank: self.rank(),
            gamma: self.gamma.iter().copied().collect(),
            factors: self.factors.iter().map(|f| f.as_slice().to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CpdTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let repr = CpdRepr::deserialize(d)?;
        if repr.dims.len() != repr.factors.len() {
            return Err(D::Error::custom("dims and factors lengths differ"));
        }
        if repr.gamma.len() != repr.rank {
            return Err(D::Error::custom("gamma length differs from rank"));
        }
        let mut factors = Vec::with_capacity(repr.dims.len());
        for (d, (&m, flat)) in repr.dims.iter().zip(repr.factors).enumerate() {
            if flat.len() != m * repr.rank {
                return Err(D::Error::custom(format!(
                    "factor {d} has {} entries, expected {}",
                    flat.len(),
                    m * repr.rank
                )));
            }
            factors.push(DMatrix::from_vec(m, repr.rank, flat));
        }
        CpdTensor::from_parts(factors, DVector::from_vec(repr.gamma)).map_err(D::Error::custom)
    }
}

/// A dense tensor in little-endian vectorized form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != values.len() {
            return Err(TkmError::arg(format!(
                "dims {dims:?} imply {n} entries, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear little-endian offset of a 0-based multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        let mut stride = 1;
        let mut off = 0;
        for (&i, &m) in index.iter().zip(&self.dims) {
            debug_assert!(i < m);
            off += i * stride;
            stride *= m;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    pub fn dot(&self, other: &DenseTensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(TkmError::arg("dense tensors differ in shape"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Little-endian vectorization of `φ⁽¹⁾ ⊗ … ⊗ φ⁽ᴰ⁾`.
    pub fn outer(vectors: &[DVector<f64>]) -> Result<Self> {
        let mut values = vec![1.0];
        for v in vectors {
            let mut next = Vec::with_capacity(values.len() * v.len());
            for &c in v.iter() {
                next.extend(values.iter().map(|&p| p * c));
            }
            values = next;
        }
        DenseTensor::new(vectors.iter().map(|v| v.len()).collect(), values)
    }
}
