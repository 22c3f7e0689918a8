//! Whittaker-Henderson smoothing of Gaussian and Poisson-type observations
//! on one- and two-dimensional grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(a >= b)` also rejects NaN

pub mod basis;
pub mod duration;
pub mod error;
pub mod experiments;
pub mod extrapolation;
pub mod gaussian;
pub mod generalized;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod optimize;
pub mod penalty;
pub mod rank_reduction;
pub mod simulator;

pub use error::{Result, WhError};
pub use grid::{AxisRange, Grid};
