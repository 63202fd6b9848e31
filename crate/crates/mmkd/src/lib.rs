//! Multi-teacher knowledge distillation with per-instance, meta-learned
//! teacher weighting.
//!
//! A small meta-weight network assigns each training sample its own weight
//! over `K` frozen teachers, separately for logit matching (softened-output
//! KL) and feature matching (penultimate-layer MSE after a learned alignment
//! map). The meta network itself is trained by exact reverse-mode
//! hypergradients: the student is copied, updated for `M` SGD steps on a
//! buffer of currently-difficult samples, and the copy's cross-entropy on
//! that buffer is differentiated back through the recorded steps into the
//! meta parameters.
//!
//! The crate is organized as a library plus runnable examples (see
//! `examples/`), with one thin `mmkd` binary exposing the same entry points
//! as subcommands:
//!
//! - [`autodiff`] — tape-based reverse-mode AD with differentiable gradients
//!   (Hessian-vector products come for free).
//! - [`nn`] — MLP / small CNN models, feature alignment map, plain SGD.
//! - [`meta`] — the two weighting heads and their inputs (softened
//!   probabilities; pairwise feature similarity matrices).
//! - [`losses`] — weighted ensemble KL, weighted feature MSE, cross-entropy,
//!   and the total objective.
//! - [`buffer`] — fixed-capacity hard-sample buffer (plus uniform-reservoir
//!   and holdout variants used by ablations).
//! - [`bilevel`] — inner-loop student copy, reverse hypergradient, Adam
//!   meta-optimizer step.
//! - [`baselines`] — uniform / entropy-based / label-confidence weighting
//!   and the uniform-ensemble hint loss.
//! - [`data`] — synthetic Gaussian-blob datasets, IDX image files,
//!   deterministic drop-last batching.
//! - [`trainer`] — teacher pretraining, distillation runs, evaluation,
//!   relative-improvement aggregation, sweeps and ablations.

pub mod autodiff;
pub mod losses;
pub mod meta;
pub mod nn;
pub mod objective;
pub mod baselines;
pub mod bilevel;
pub mod buffer;
pub mod checkpoint;
pub mod data;
pub mod error;

pub use error::{MmkdError, Result};
