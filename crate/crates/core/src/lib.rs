//! Low-rank training that decides for itself when to factorize, which
//! layers to factorize and at what rank.
//!
//! A network trains full-rank while the stable rank of every weight matrix
//! is tracked per epoch. Once the ranks of the factorizable layers stop
//! moving, each is replaced by a truncated spectral factorization `U·Vᵀ` at
//! its scaled stable rank and training continues in that form. Which leading
//! layers stay full-rank is chosen by timing layer stacks under a profiling
//! rank (see [`profiler`]).
//!
//! The `parallel` feature (on by default) fans matrix products and per-layer
//! spectra out over rayon; without it every [`Execution`] runs sequentially
//! with identical results.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
pub mod data;
pub mod error;
pub mod exec;
pub mod factorize;
pub mod model;
pub mod profiler;
pub mod rank;
pub mod regularization;
pub mod snapshot;
pub mod svd;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use exec::Execution;
pub use factorize::{apply_plan, build_plan, spectral_factorize, FactorizationPlan, FactorizedPair};
pub use model::{HybridModel, LayerSpec, ModelSpec, Network};
pub use rank::{estimate_rank, scaled_stable_rank, stable_rank, EstimatorMode, RankEstimatorConfig};
pub use svd::{singular_values, svd, SvdResult};
pub use tensor::{ConvKernel, DenseMatrix, WeightTensor};
pub use train::{cuttlefish_train, evaluate, TrainConfig, TrainOptions, TrainReport};
pub use trajectory::{RankTrajectory, StabilizationConfig};
