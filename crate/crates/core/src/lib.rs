//! Tabular laboratory for reward-free, non-reactive policy design.
//!
//! The pipeline runs offline data through a sparsified model, designs a fixed exploration
//! mixture on that model, deploys the mixture once on the true MDP and plans pessimistically on
//! the re-estimated model. Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the default `f64` instantiation.

// `!(x > 0)`-style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod designer;
pub mod diagnostics;
pub mod dp;
mod error;
pub mod generators;
pub mod harness;
pub mod hash;
pub mod mdp;
pub mod oracle;
pub mod pipeline;
pub mod rng;
mod scalar;
pub mod sparsify;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::{argmax, max_of, Scalar};

pub type Mdp = mdp::TabularMdp<f64>;
pub type Reward = mdp::RewardTable<f64>;
pub type Values = dp::ValueTable<f64>;
pub type Occupancy = dp::OccupancyTable<f64>;
pub type Mu = data::LoggingDistribution<f64>;
pub type Model = sparsify::SparsifiedModel<f64>;
pub type Bonus = designer::BonusParams<f64>;
