//! Episodic few-shot learning on MLP backbones, with multi-task episodes,
//! uncertainty-style task weighting, and both gradient-based and
//! simultaneous-perturbation weight adaptation.
//!
//! Everything numeric is generic over [`Scalar`] so the same code runs in
//! `f32` or `f64` (and, internally, over dual numbers for exact
//! Hessian-vector products). The `*64` aliases below are the concrete types
//! most callers want.

pub mod backbone;
pub mod dual;
pub mod episodes;
pub mod error;
pub mod losses;
pub mod maml;
pub mod matrix;
pub mod optim;
pub mod protonet;
pub mod params;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Evaluation outcome over an episode: per-task query accuracies, the
/// overall fraction of query rows classified correctly, and the mean
/// unweighted query loss across tasks.
#[derive(Clone, Debug)]
pub struct EpisodeEval<S> {
    pub per_task: Vec<f64>,
    pub accuracy: f64,
    pub mean_query_loss: S,
}

pub use backbone::Backbone64;
pub use dual::Dual64;
pub use matrix::Matrix64;
pub use params::ParamVector64;

/// Default-precision aliases for the generic core types.
pub type Backbone = backbone::Backbone<f64>;
pub type Matrix = matrix::Matrix<f64>;
pub type ParamVector = params::ParamVector<f64>;
