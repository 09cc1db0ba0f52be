//! Exclusively penalized Q-learning (EPQ) and its conservative Q-learning
//! (CQL) baseline on finite MDPs whose values can be computed exactly.
//!
//! The crate is organized bottom-up:
//!
//! - [`mdp`]: finite MDPs, exact policy evaluation, sampling, benchmark
//!   environments.
//! - [`dataset`]: offline datasets, discounted returns, count-based behavior
//!   estimates.
//! - [`penalty`]: the exclusive penalty, its adaptation factor, prioritized
//!   behavior and importance weights.
//! - [`learner`]: exact penalized iteration, the sampled loss and the full
//!   training loop.
//! - [`analysis`]: estimation bias, closed-form fixed points, underestimation
//!   certificates and the action-distribution scenarios.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod mdp;
pub mod dataset;
pub mod penalty;
pub mod learner;
pub mod analysis;

pub use error::{Error, Result};
pub use mdp::{Mdp, QFunction, TabularPolicy, Trajectory};
pub use dataset::{BehaviorEstimate, OfflineDataset, Transition};
pub use penalty::{PenaltyConfig, Threshold};
pub use learner::{LearnerConfig, Mode, RunStatus, TrainedAgent};
pub use analysis::{BiasReport, UnderestimationCertificate};
