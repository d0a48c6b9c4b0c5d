//! Block coordinate descent for class-weighted TKRR and its
//! source-regularized (adaptive) variant.
//!
//! One block update fixes every factor except mode `d` and solves a linear
//! least-squares problem for it. The component scalings `γ` are folded into
//! the mode being solved for, so each block problem is unconstrained; the
//! result is renormalized afterwards. With per-sample costs `c_n` and
//! `vec(W⁽ᵈ⁾)` the unknown, the block objective is
//!
//! ```text
//! (1/N) Σ_n c_n (g_nᵀ w − y_n)² + ρ · wᵀ (H ⊗ I_M) w − 2μ · wᵀ vec(Q)
//! ```
//!
//! where `ρ` is `λ` for plain TKRR and `μ` for adaptation, and the last term
//! only appears when adapting.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cpd::CpdTensor;
use crate::dataeval::{check_labels, sample_weights, scale_apply, ScaleParams};
use crate::error::{Result, TkmError};
use crate::featmap::{FeatureMapConfig, MappedData};
use crate::linalg::{hadamard_in_place, solve_spd, SolveInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Standard-normal factors drawn from a seeded stream.
    Random { seed: u64 },
    /// Start from the source model's weights (adaptation only).
    Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rank: usize,
    /// Ridge weight of plain TKRR. Ignored when adapting.
    pub lambda: f64,
    /// Total number of block updates.
    pub n_max: usize,
    pub init: Init,
    pub class_weighting: bool,
    /// Store the data-fit loss after every update in the model.
    pub loss_trace: bool,
    /// Stop early once the relative objective change drops below this.
    pub tolerance: Option<f64>,
    /// Keep a copy of the weights after every update in the history.
    pub record_iterates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            lambda: 1e-3,
            n_max: 20,
            init: Init::Random { seed: 0 },
            class_weighting: true,
            loss_trace: true,
            tolerance: None,
            record_iterates: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(TkmError::arg("rank must be at least 1"));
        }
        if self.n_max == 0 {
            return Err(TkmError::arg("n_max must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(TkmError::arg(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(TkmError::arg("tolerance must be >= 0"));
            }
        }
        Ok(())
    }
}

/// A trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TkmModel {
    pub weights: CpdTensor,
    pub featmap: FeatureMapConfig,
    /// Label is +1 iff score >= threshold.
    pub threshold: f64,
    /// Applied to raw inputs before the feature map.
    pub scaling: Option<ScaleParams>,
    /// Data-fit loss before the first update and after each update.
    pub trace: Option<Vec<f64>>,
}

impl TkmModel {
    /// Model with all-zero weights of the given rank.
    pub fn zero(featmap: FeatureMapConfig, rank: usize) -> Result<Self> {
        Ok(Self {
            weights: CpdTensor::zeros(&featmap.tensor_dims(), rank)?,
            featmap,
            threshold: 0.0,
            scaling: None,
            trace: None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    fn prepare(&self, x: &DMatrix<f64>) -> Result<MappedData> {
        match &self.scaling {
            Some(p) => MappedData::new(&scale_apply(x, p)?.x, &self.featmap),
            None => MappedData::new(x, &self.featmap),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    weights: CpdTensor,
    featmap: FeatureMapConfig,
    threshold: f64,
    #[serde(default)]
    scaling: Option<ScaleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<f64>>,
    #[serde(default)]
    n_parameters: Option<usize>,
}

impl Serialize for TkmModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelRepr {
            weights: self.weights.clone(),
            featmap: self.featmap,
            threshold: self.threshold,
            scaling: self.scaling.clone(),
            trace: self.trace.clone(),
            n_parameters: Some(self.parameter_count()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TkmModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let r = ModelRepr::deserialize(d)?;
        r.featmap.validate().map_err(D::Error::custom)?;
        if r.weights.dims() != r.featmap.tensor_dims() {
            return Err(D::Error::custom(format!(
                "weight dims {:?} do not match feature map {:?}",
                r.weights.dims(),
                r.featmap.tensor_dims()
            )));
        }
        if let Some(n) = r.n_parameters {
            if n != r.weights.parameter_count() {
                return Err(D::Error::custom("n_parameters disagrees with the weights"));
            }
        }
        Ok(TkmModel {
            weights: r.weights,
            featmap: r.featmap,
            threshold: r.threshold,
            scaling: r.scaling,
            trace: r.trace,
        })
    }
}

/// Row `n` is `vec(φ⁽ᵈ⁾(x_n) · (⊛_{i≠d} φ⁽ⁱ⁾(x_n)ᵀ W⁽ⁱ⁾))`, column index
/// `m + M·r`. Paired with `vec` of the γ-scaled factor `d` it reproduces the
/// model score.
pub fn assemble_g(d: usize, mapped: &MappedData, w: &CpdTensor) -> DMatrix<f64> {
    let n = mapped.n_samples();
    let r = w.rank();
    let phi_d = mapped.mode(d);
    let m = phi_d.ncols();
    let z = other_mode_products(d, mapped, w);
    let mut g = DMatrix::zeros(n, m * r);
    for rr in 0..r {
        for mm in 0..m {
            let mut col = g.column_mut(mm + m * rr);
            for s in 0..n {
                col[s] = phi_d[(s, mm)] * z[(s, rr)];
            }
        }
    }
    g
}

/// `⊛_{i≠d} Φ⁽ⁱ⁾ W⁽ⁱ⁾`, an `N × R` matrix.
fn other_mode_products(d: usize, mapped: &MappedData, w: &CpdTensor) -> DMatrix<f64> {
    let mut z = DMatrix::from_element(mapped.n_samples(), w.rank(), 1.0);
    for i in 0..w.order() {
        if i != d {
            hadamard_in_place(&mut z, &(mapped.mode(i) * w.factor(i)));
        }
    }
    z
}

/// `H⁽ᵈ⁾ = ⊛_{i≠d} W⁽ⁱ⁾ᵀ W⁽ⁱ⁾`.
pub fn assemble_h(d: usize, w: &CpdTensor) -> DMatrix<f64> {
    let h = w.cross_gram(w, Some(d));
    // symmetric by construction; enforce bitwise for the Cholesky
    (&h + h.transpose()) * 0.5
}

/// `Q⁽ᵈ⁾ = S̃⁽ᵈ⁾ (⊛_{i≠d} W⁽ⁱ⁾ᵀ S⁽ⁱ⁾)ᵀ` with the source scalings folded into
/// `S̃⁽ᵈ⁾`, so that `⟨vec(W̃⁽ᵈ⁾), vec(Q⁽ᵈ⁾)⟩ = ⟨W, S⟩_F`.
pub fn assemble_q(d: usize, w: &CpdTensor, s: &CpdTensor) -> Result<DMatrix<f64>> {
    if w.dims() != s.dims() {
        return Err(TkmError::arg(format!(
            "source dims {:?} differ from weight dims {:?}",
            s.dims(),
            w.dims()
        )));
    }
    let z = w.cross_gram(s, Some(d));
    Ok(s.scaled_factor(d) * z.transpose())
}

/// Penalty of one block problem.
#[derive(Debug, Clone, Copy)]
pub enum Regularizer<'a> {
    Ridge {
        lambda: f64,
        h: &'a DMatrix<f64>,
    },
    Transfer {
        mu: f64,
        h: &'a DMatrix<f64>,
        q: &'a DMatrix<f64>,
    },
}

impl Regularizer<'_> {
    fn weight(&self) -> f64 {
        match *self {
            Regularizer::Ridge { lambda, .. } => lambda,
            Regularizer::Transfer { mu, .. } => mu,
        }
    }

    fn h(&self) -> &DMatrix<f64> {
        match *self {
            Regularizer::Ridge { h, .. } | Regularizer::Transfer { h, .. } => h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockSolution {
    /// New `M × R` factor, scalings included.
    pub factor: DMatrix<f64>,
    pub info: SolveInfo,
}

fn check_block(g: &DMatrix<f64>, y: &[f64], weights: &[f64], reg: &Regularizer) -> Result<usize> {
    let n = g.nrows();
    if y.len() != n || weights.len() != n {
        return Err(TkmError::arg(
            "G, y and weights disagree on the sample count",
        ));
    }
    if n == 0 {
        return Err(TkmError::arg("no samples"));
    }
    let r = reg.h().nrows();
    if r == 0 || !g.ncols().is_multiple_of(r) || reg.h().ncols() != r {
        return Err(TkmError::arg(
            "H is not R x R or does not divide G's columns",
        ));
    }
    let m = g.ncols() / r;
    if let Regularizer::Transfer { q, .. } = reg {
        if q.shape() != (m, r) {
            return Err(TkmError::arg(format!(
                "Q is {:?}, expected ({m}, {r})",
                q.shape()
            )));
        }
    }
    Ok(m)
}

/// Exact minimizer of the block objective via its normal equations
/// `((1/N) GᵀCG + ρ (H ⊗ I_M)) w = (1/N) GᵀCy (+ μ vec(Q))`.
pub fn block_update(
    g: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    reg: Regularizer<'_>,
) -> Result<BlockSolution> {
    let m = check_block(g, y, weights, &reg)?;
    let n = g.nrows() as f64;
    let r = reg.h().nrows();
    let mut cg = g.clone();
    for (mut row, &c) in cg.row_iter_mut().zip(weights) {
        row *= c;
    }
    let mut a = g.tr_mul(&cg) / n;
    a += reg.h().kronecker(&DMatrix::<f64>::identity(m, m)) * reg.weight();
    let mut b = cg.tr_mul(&DVector::from_column_slice(y)) / n;
    if let Regularizer::Transfer { mu, q, .. } = reg {
        b += DVector::from_column_slice(q.as_slice()) * mu;
    }
    let (w, info) = solve_spd(&a, &b);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(TkmError::Numerical(
            "block solve produced non-finite values".into(),
        ));
    }
    Ok(BlockSolution {
        factor: DMatrix::from_vec(m, r, w.data.into()),
        info,
    })
}

/// Value of the block objective at `factor`, up to terms constant in it.
pub fn block_objective(
    g: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    reg: Regularizer<'_>,
    factor: &DMatrix<f64>,
) -> Result<f64> {
    check_block(g, y, weights, &reg)?;
    let w = DVector::from_column_slice(factor.as_slice());
    let pred = g * &w;
    let data: f64 = pred
        .iter()
        .zip(y)
        .zip(weights)
        .map(|((p, t), c)| c * (p - t) * (p - t))
        .sum::<f64>()
        / g.nrows() as f64;
    let quad = (factor.transpose() * factor).component_mul(reg.h()).sum();
    let mut obj = data + reg.weight() * quad;
    if let Regularizer::Transfer { mu, q, .. } = reg {
        obj -= 2.0 * mu * factor.dot(q);
    }
    Ok(obj)
}

/// Scores of mapped samples, `Σ_r γ_r Π_d (Φ⁽ᵈ⁾ W⁽ᵈ⁾)_{n r}`.
pub fn scores_mapped(mapped: &MappedData, w: &CpdTensor) -> DVector<f64> {
    let mut z = DMatrix::from_element(mapped.n_samples(), w.rank(), 1.0);
    for d in 0..w.order() {
        hadamard_in_place(&mut z, &(mapped.mode(d) * w.factor(d)));
    }
    z * w.gamma()
}

fn data_loss(scores: &DVector<f64>, y: &[f64], weights: &[f64]) -> f64 {
    scores
        .iter()
        .zip(y)
        .zip(weights)
        .map(|((f, t), c)| c * (f - t) * (f - t))
        .sum::<f64>()
        / y.len() as f64
}

#[derive(Debug, Clone, Copy)]
enum Penalty<'a> {
    Ridge(f64),
    Transfer { mu: f64, source: &'a CpdTensor },
}

impl Penalty<'_> {
    fn value(&self, w: &CpdTensor) -> Result<f64> {
        match *self {
            Penalty::Ridge(lambda) => Ok(lambda * w.norm_squared()),
            Penalty::Transfer { mu, source } => Ok(mu * w.distance_squared(source)?),
        }
    }
}

/// One block update as recorded in [`Fitted::history`].
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    /// 1-based update counter.
    pub update: usize,
    /// 0-based mode that was solved for.
    pub mode: usize,
    /// Data-fit term after the update.
    pub loss: f64,
    /// Data-fit term plus penalty after the update.
    pub objective: f64,
    pub solve: SolveInfo,
    pub weights: Option<CpdTensor>,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: TkmModel,
    pub initial_loss: f64,
    pub initial_objective: f64,
    pub history: Vec<UpdateRecord>,
}

impl Fitted {
    /// Objective before the first update followed by every update.
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.history.iter().map(|h| h.objective))
            .collect()
    }

    /// Data-fit loss before the first update followed by every update.
    pub fn losses(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss)
            .chain(self.history.iter().map(|h| h.loss))
            .collect()
    }
}

fn run_als(
    mapped: &MappedData,
    y: &[f64],
    weights: &[f64],
    init: CpdTensor,
    penalty: Penalty<'_>,
    cfg: &TrainConfig,
) -> Result<(CpdTensor, f64, f64, Vec<UpdateRecord>)> {
    let order = init.order();
    let mut w = init;
    let loss0 = data_loss(&scores_mapped(mapped, &w), y, weights);
    let obj0 = loss0 + penalty.value(&w)?;
    let mut history = Vec::with_capacity(cfg.n_max);
    let mut prev_obj = obj0;
    'outer: while history.len() < cfg.n_max {
        for d in 0..order {
            let g = assemble_g(d, mapped, &w);
            let h = assemble_h(d, &w);
            let solution = match penalty {
                Penalty::Ridge(lambda) => {
                    block_update(&g, y, weights, Regularizer::Ridge { lambda, h: &h })?
                }
                Penalty::Transfer { mu, source } => {
                    let q = assemble_q(d, &w, source)?;
                    block_update(&g, y, weights, Regularizer::Transfer { mu, h: &h, q: &q })?
                }
            };
            if solution.info != SolveInfo::default() {
                log::debug!(
                    "update {}: mode {d} solve needed {:?}",
                    history.len() + 1,
                    solution.info
                );
            }
            w = w
                .with_absorbed_factor(d, solution.factor)
                .normalize_factors();
            let loss = data_loss(&scores_mapped(mapped, &w), y, weights);
            let objective = loss + penalty.value(&w)?;
            history.push(UpdateRecord {
                update: history.len() + 1,
                mode: d,
                loss,
                objective,
                solve: solution.info,
                weights: cfg.record_iterates.then(|| w.clone()),
            });
            log::trace!(
                "update {} mode {d}: loss {loss:.6e} objective {objective:.6e}",
                history.len()
            );
            if history.len() >= cfg.n_max {
                break 'outer;
            }
            if let Some(tol) = cfg.tolerance {
                if (prev_obj - objective).abs() <= tol * prev_obj.abs() {
                    log::debug!(
                        "relative objective change below {tol} after {} updates",
                        history.len()
                    );
                    break 'outer;
                }
            }
            prev_obj = objective;
        }
    }
    Ok((w, loss0, obj0, history))
}

fn check_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(TkmError::arg(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(TkmError::arg("no training samples"));
    }
    check_labels(y)
}

fn finish(
    w: CpdTensor,
    featmap: FeatureMapConfig,
    scaling: Option<ScaleParams>,
    cfg: &TrainConfig,
    loss0: f64,
    obj0: f64,
    history: Vec<UpdateRecord>,
) -> Fitted {
    let trace = cfg.loss_trace.then(|| {
        std::iter::once(loss0)
            .chain(history.iter().map(|h| h.loss))
            .collect()
    });
    Fitted {
        model: TkmModel {
            weights: w,
            featmap,
            threshold: 0.0,
            scaling,
            trace,
        },
        initial_loss: loss0,
        initial_objective: obj0,
        history,
    }
}

/// Class-weighted TKRR. `x` must already lie inside the feature-map domain.
pub fn fit_tkrr(
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &TrainConfig,
    fm: &FeatureMapConfig,
) -> Result<TkmModel> {
    fit_tkrr_traced(x, y, cfg, fm).map(|f| f.model)
}

/// [`fit_tkrr`] with the per-update history.
pub fn fit_tkrr_traced(
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &TrainConfig,
    fm: &FeatureMapConfig,
) -> Result<Fitted> {
    cfg.validate()?;
    check_xy(x, y)?;
    let weights = sample_weights(y, cfg.class_weighting)?;
    let mapped = MappedData::new(x, fm)?;
    let init = match cfg.init {
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            CpdTensor::random_with(&fm.tensor_dims(), cfg.rank, &mut rng)?
        }
        Init::Source => {
            return Err(TkmError::arg("source initialization needs a source model"));
        }
    };
    let (w, l0, o0, history) =
        run_als(&mapped, y, &weights, init, Penalty::Ridge(cfg.lambda), cfg)?;
    Ok(finish(w, *fm, None, cfg, l0, o0, history))
}

/// Adaptive TKRR: trains on target data with penalty `μ‖W − S‖²_F` toward
/// the source weights `S`.
///
/// `featmap` is the map the caller intends for the adapted model; it must
/// equal the source's, since the weight distance is meaningless otherwise.
/// Source scaling, if any, is applied to `x` and carried over.
pub fn fit_adapt_tkrr(
    x: &DMatrix<f64>,
    y: &[f64],
    source: &TkmModel,
    mu: f64,
    cfg: &TrainConfig,
    featmap: &FeatureMapConfig,
) -> Result<TkmModel> {
    fit_adapt_tkrr_traced(x, y, source, mu, cfg, featmap).map(|f| f.model)
}

pub fn fit_adapt_tkrr_traced(
    x: &DMatrix<f64>,
    y: &[f64],
    source: &TkmModel,
    mu: f64,
    cfg: &TrainConfig,
    featmap: &FeatureMapConfig,
) -> Result<Fitted> {
    cfg.validate()?;
    check_xy(x, y)?;
    if !(mu >= 0.0) {
        return Err(TkmError::arg(format!("mu must be >= 0, got {mu}")));
    }
    if *featmap != source.featmap {
        return Err(TkmError::FeatureMapMismatch(format!(
            "source uses {:?}, requested {:?}",
            source.featmap, featmap
        )));
    }
    if source.weights.dims() != featmap.tensor_dims() {
        return Err(TkmError::FeatureMapMismatch(format!(
            "source weights have dims {:?}, feature map implies {:?}",
            source.weights.dims(),
            featmap.tensor_dims()
        )));
    }
    let weights = sample_weights(y, cfg.class_weighting)?;
    let mapped = source.prepare(x)?;
    let s = source.weights.normalize_factors();
    let init = match cfg.init {
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            CpdTensor::random_with(&featmap.tensor_dims(), cfg.rank, &mut rng)?
        }
        Init::Source => {
            if cfg.rank != s.rank() {
                return Err(TkmError::arg(format!(
                    "source initialization fixes the rank to {}, config asks for {}",
                    s.rank(),
                    cfg.rank
                )));
            }
            s.clone()
        }
    };
    let (w, l0, o0, history) = run_als(
        &mapped,
        y,
        &weights,
        init,
        Penalty::Transfer { mu, source: &s },
        cfg,
    )?;
    Ok(finish(
        w,
        *featmap,
        source.scaling.clone(),
        cfg,
        l0,
        o0,
        history,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub scores: Vec<f64>,
    /// ±1, `+1` iff score >= threshold.
    pub labels: Vec<f64>,
}

pub fn predict(model: &TkmModel, x: &DMatrix<f64>) -> Result<Predictions> {
    let mapped = model.prepare(x)?;
    let scores: Vec<f64> = scores_mapped(&mapped, &model.weights)
        .iter()
        .copied()
        .collect();
    let labels = scores
        .iter()
        .map(|&s| if s >= model.threshold { 1.0 } else { -1.0 })
        .collect();
    Ok(Predictions { scores, labels })
}

/// `(1/N) Σ_n c_n (f(x_n) − y_n)²`.
pub fn weighted_loss(
    model: &TkmModel,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
) -> Result<f64> {
    if x.nrows() != y.len() || y.len() != weights.len() {
        return Err(TkmError::arg(
            "x, y and weights disagree on the sample count",
        ));
    }
    if y.is_empty() {
        return Err(TkmError::arg("no samples"));
    }
    let p = predict(model, x)?;
    Ok(data_loss(&DVector::from_vec(p.scores), y, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpd::DenseTensor;
    use rand::Rng;

    fn problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.9..0.9));
        let y = (0..n)
            .map(|i| {
                if x[(i, 0)] * x[(i, d - 1)] > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        (x, y)
    }

    fn fm(m: usize, d: usize) -> FeatureMapConfig {
        FeatureMapConfig::new(m, 1.2, 0.4, d).unwrap()
    }

    #[test]
    fn g_reproduces_scores() {
        let (x, _) = problem(15, 2, 1);
        let c = fm(5, 2);
        let mapped = MappedData::new(&x, &c).unwrap();
        let w = CpdTensor::new_random(&[5, 5], 3, 2).unwrap();
        for d in 0..2 {
            let g = assemble_g(d, &mapped, &w);
            let wd = w.scaled_factor(d);
            let via_g = &g * DVector::from_column_slice(wd.as_slice());
            for n in 0..15 {
                let direct = w.evaluate(&mapped.sample(n)).unwrap();
                assert!((via_g[n] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn g_rank_one_and_zero_factor() {
        let (x, _) = problem(6, 3, 3);
        let c = fm(4, 3);
        let mapped = MappedData::new(&x, &c).unwrap();
        let w = CpdTensor::new_random(&[4, 4, 4], 1, 5).unwrap();
        let g = assemble_g(1, &mapped, &w);
        for n in 0..6 {
            let s = mapped.sample(n);
            let scale = s[0].dot(&w.factor(0).column(0)) * s[2].dot(&w.factor(2).column(0));
            for m in 0..4 {
                assert!((g[(n, m)] - s[1][m] * scale).abs() < 1e-14);
            }
        }
        let mut f = w.factors().to_vec();
        f[2] = DMatrix::zeros(4, 1);
        let wz = CpdTensor::from_parts(f, w.gamma().clone()).unwrap();
        assert!(assemble_g(0, &mapped, &wz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_cases() {
        let w = CpdTensor::new_random(&[4, 5], 3, 8).unwrap();
        let h = assemble_h(0, &w);
        let direct = w.factor(1).transpose() * w.factor(1);
        assert!((h - direct).amax() < 1e-15);
        let eye = DMatrix::<f64>::identity(3, 2);
        let o = CpdTensor::from_parts(
            vec![eye.clone(), eye.clone(), eye],
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert_eq!(assemble_h(1, &o), DMatrix::identity(2, 2));
    }

    #[test]
    fn h_gives_squared_norm() {
        let w = CpdTensor::new_random(&[3, 4, 2], 3, 21).unwrap();
        let dense = w.to_full().unwrap().norm_squared();
        for d in 0..3 {
            let wd = w.scaled_factor(d);
            let v = (wd.transpose() * &wd)
                .component_mul(&assemble_h(d, &w))
                .sum();
            assert!((v - dense).abs() <= 1e-10 * dense);
        }
    }

    #[test]
    fn q_cases() {
        let w = CpdTensor::new_random(&[3, 4], 2, 1).unwrap();
        let zero = CpdTensor::zeros(&[3, 4], 2).unwrap();
        assert!(assemble_q(0, &w, &zero).unwrap().iter().all(|&v| v == 0.0));
        let w1 = CpdTensor::new_random(&[3, 4], 1, 2).unwrap();
        let s1 = CpdTensor::new_random(&[3, 4], 1, 3).unwrap();
        let q = assemble_q(0, &w1, &s1).unwrap();
        let k = w1.factor(1).column(0).dot(&s1.factor(1).column(0));
        let expected = s1.factor(0) * (k * s1.gamma()[0]);
        assert!((q - expected).amax() < 1e-15);
        let wrong = CpdTensor::new_random(&[3, 5], 1, 3).unwrap();
        assert!(assemble_q(0, &w1, &wrong).is_err());
    }

    #[test]
    fn q_reproduces_inner_product() {
        let w = CpdTensor::new_random(&[4, 3, 5], 4, 31).unwrap();
        let s = CpdTensor::new_random(&[4, 3, 5], 2, 32).unwrap();
        let s = CpdTensor::from_parts(s.factors().to_vec(), DVector::from_vec(vec![1.7, -0.4]))
            .unwrap();
        let ip = w.inner_product(&s).unwrap();
        for d in 0..3 {
            let q = assemble_q(d, &w, &s).unwrap();
            let v = w.scaled_factor(d).dot(&q);
            assert!((v - ip).abs() <= 1e-12 * (1.0 + ip.abs()), "{v} vs {ip}");
        }
    }

    type BlockSetup = (DMatrix<f64>, Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>);

    fn block_setup(seed: u64) -> BlockSetup {
        let (x, y) = problem(30, 2, seed);
        let c = fm(4, 2);
        let mapped = MappedData::new(&x, &c).unwrap();
        let w = CpdTensor::new_random(&[4, 4], 2, seed + 1).unwrap();
        let s = CpdTensor::new_random(&[4, 4], 3, seed + 2).unwrap();
        let g = assemble_g(0, &mapped, &w);
        let h = assemble_h(0, &w);
        let q = assemble_q(0, &w, &s).unwrap();
        let weights = sample_weights(&y, true).unwrap();
        (g, y, weights, h, q)
    }

    #[test]
    fn transfer_with_zero_source_equals_ridge() {
        let (g, y, c, h, _) = block_setup(4);
        let q = DMatrix::zeros(4, 2);
        let a = block_update(
            &g,
            &y,
            &c,
            Regularizer::Ridge {
                lambda: 0.01,
                h: &h,
            },
        )
        .unwrap();
        let b = block_update(
            &g,
            &y,
            &c,
            Regularizer::Transfer {
                mu: 0.01,
                h: &h,
                q: &q,
            },
        )
        .unwrap();
        assert_eq!(a.factor, b.factor);
    }

    #[test]
    fn large_lambda_shrinks_factor() {
        let (g, y, c, h, _) = block_setup(5);
        let mut last = f64::INFINITY;
        for lambda in [1e-3, 1e-1, 1e1, 1e3, 1e6] {
            let s = block_update(&g, &y, &c, Regularizer::Ridge { lambda, h: &h }).unwrap();
            let n = s.factor.norm();
            assert!(n <= last * (1.0 + 1e-12));
            last = n;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn block_minimizer_has_zero_gradient() {
        let (g, y, c, h, q) = block_setup(6);
        for reg in [
            Regularizer::Ridge {
                lambda: 0.05,
                h: &h,
            },
            Regularizer::Transfer {
                mu: 0.05,
                h: &h,
                q: &q,
            },
        ] {
            let sol = block_update(&g, &y, &c, reg).unwrap();
            let eps = 1e-6;
            let mut grad_max: f64 = 0.0;
            for k in 0..sol.factor.len() {
                let mut p = sol.factor.clone();
                let mut m = sol.factor.clone();
                p[k] += eps;
                m[k] -= eps;
                let fd = (block_objective(&g, &y, &c, reg, &p).unwrap()
                    - block_objective(&g, &y, &c, reg, &m).unwrap())
                    / (2.0 * eps);
                grad_max = grad_max.max(fd.abs());
            }
            assert!(grad_max <= 1e-8, "gradient {grad_max}");
        }
    }

    #[test]
    fn constant_labels_fit_same_sign() {
        let (x, _) = problem(25, 2, 7);
        let y = vec![1.0; 25];
        let cfg = TrainConfig {
            class_weighting: false,
            lambda: 1e-3,
            ..TrainConfig::default()
        };
        let model = fit_tkrr(&x, &y, &cfg, &fm(6, 2)).unwrap();
        let p = predict(&model, &x).unwrap();
        assert!(p.scores.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn class_weighting_needs_both_classes() {
        let (x, _) = problem(10, 2, 8);
        let y = vec![-1.0; 10];
        assert!(fit_tkrr(&x, &y, &TrainConfig::default(), &fm(4, 2)).is_err());
    }

    #[test]
    fn trace_is_non_increasing_in_objective() {
        let (x, y) = problem(40, 2, 9);
        let cfg = TrainConfig {
            n_max: 12,
            ..TrainConfig::default()
        };
        let f = fit_tkrr_traced(&x, &y, &cfg, &fm(5, 2)).unwrap();
        let obj = f.objectives();
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{obj:?}");
        }
        assert_eq!(f.model.trace.as_ref().unwrap().len(), 13);
    }

    #[test]
    fn zero_model_predicts_threshold_tie() {
        let model = TkmModel::zero(fm(3, 2), 2).unwrap();
        let (x, _) = problem(5, 2, 10);
        let p = predict(&model, &x).unwrap();
        assert!(p.scores.iter().all(|&s| s == 0.0));
        assert!(p.labels.iter().all(|&l| l == 1.0));
    }

    #[test]
    fn scores_match_dense_reference() {
        let (x, _) = problem(8, 2, 11);
        let c = fm(4, 2);
        let w = CpdTensor::new_random(&[4, 4], 3, 12).unwrap();
        let model = TkmModel {
            weights: w.clone(),
            ..TkmModel::zero(c, 3).unwrap()
        };
        let full = w.to_full().unwrap();
        let p = predict(&model, &x).unwrap();
        let mapped = MappedData::new(&x, &c).unwrap();
        for n in 0..8 {
            let phi = DenseTensor::outer(&mapped.sample(n)).unwrap();
            let dense = phi.dot(&full).unwrap();
            assert!((p.scores[n] - dense).abs() <= 1e-10 * (1.0 + dense.abs()));
        }
        let renorm = TkmModel {
            weights: w.normalize_factors(),
            ..model.clone()
        };
        let q = predict(&renorm, &x).unwrap();
        for (a, b) in p.scores.iter().zip(&q.scores) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_loss_cases() {
        let model = TkmModel::zero(fm(3, 2), 2).unwrap();
        let (x, _) = problem(6, 2, 13);
        let y = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let w = sample_weights(&y, true).unwrap();
        assert!((weighted_loss(&model, &x, &y, &w).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adapt_rejects_featmap_mismatch() {
        let (x, y) = problem(12, 2, 14);
        let source = TkmModel::zero(fm(4, 2), 2).unwrap();
        let other = FeatureMapConfig::new(5, 1.2, 0.4, 2).unwrap();
        let cfg = TrainConfig {
            rank: 2,
            ..TrainConfig::default()
        };
        let err = fit_adapt_tkrr(&x, &y, &source, 0.1, &cfg, &other).unwrap_err();
        assert!(matches!(err, TkmError::FeatureMapMismatch(_)));
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = problem(20, 2, 15);
        let model = fit_tkrr(
            &x,
            &y,
            &TrainConfig {
                n_max: 4,
                ..TrainConfig::default()
            },
            &fm(5, 2),
        )
        .unwrap();
        let s = model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["n_parameters"], 2 * 5 * 4 + 4);
        assert_eq!(v["featmap"]["M"], 5);
        let back = TkmModel::from_json(&s).unwrap();
        assert_eq!(back, model);
    }
}
