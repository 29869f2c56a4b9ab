//! Generator matching on finite datasets: conditional probability paths,
//! closed-form generators solving the Kolmogorov forward equation, exact
//! marginal generators, Euler sampling, Bregman training of a small network
//! and independent verification oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod generators;
pub mod loss;
pub mod marginal;
pub mod math;
pub mod paths;
pub mod schedule;
pub mod sim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use generators::{GenOut, GeneratorSpec, JumpBins};
pub use marginal::MarginalModel;
pub use paths::{CondPath, Dataset, State};
pub use schedule::Schedule;
