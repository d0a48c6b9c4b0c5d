//! Tensor kernel ridge regression (TKRR) with canonical polyadic (CP) weight
//! tensors, and its source-regularized adaptive variant.
//!
//! The model is `f(x) = <Φ(x), W>` where `Φ(x)` is the outer product of
//! per-dimension sinusoidal feature vectors approximating an RBF kernel and
//! `W` is a rank-`R` CP tensor. Training is block coordinate descent over the
//! factor matrices; adaptation replaces the ridge penalty `λ‖W‖²` with the
//! distance penalty `μ‖W − S‖²` to a source model `S`.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`cpd`] | CP tensors, inner products, evaluation, dense reconstruction |
//! | [`featmap`] | sinusoidal feature map, kernel matrices, `(M, U)` grid heuristic |
//! | [`solver`] | class-weighted TKRR and adaptive TKRR training, prediction |
//! | [`oracle`] | dense primal and dual kernel ridge regression references |
//! | [`dataeval`] | synthetic data, weighting, scaling, ROC, event scoring |
//! | [`experiment`] | the synthetic source/target transfer study |
//! | [`io`] | CSV readers and writers for datasets, events and reports |

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cpd;
pub mod dataeval;
mod error;
pub mod experiment;
pub mod featmap;
pub mod io;
pub(crate) mod linalg;
pub mod oracle;
pub mod solver;

pub use cpd::{CpdTensor, DenseTensor};
pub use dataeval::{EventMetrics, LabeledDataset, MixtureSpec, ScaleParams};
pub use error::{Result, TkmError};
pub use featmap::{FeatureMapConfig, KernelGridReport};
pub use linalg::SolveInfo;
pub use solver::{Init, TkmModel, TrainConfig};
