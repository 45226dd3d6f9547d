//! Action recognition with a latent secondary region.
//!
//! A person's action is scored from features of the person box (the
//! primary region) plus the best-scoring contextual box (a secondary region)
//! drawn from a constrained candidate set. Training back-propagates through
//! the max.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod proposals;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{augment_primaries, candidate_set, greedy_restrict, iou, Extent, OverlapBounds, ProposalSet, Region, RegionSource};
pub use network::{forward_scores, init_params, predict, LossKind, Mode, ModelConfig, ModelParams, Prediction};
pub use training::{train, TrainConfig};
