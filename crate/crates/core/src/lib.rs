//! EMA-VIO: visual-inertial odometry with WaveNet inertial encoding,
//! external-memory attention fusion and multi-state pose constraints.
//!
//! The network, its synthetic data, training loop and odometry metrics all
//! run on the small autodiff engine in `emavio-tensor`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod train;

pub use config::{Config, FusionMode, MemoryNorm, MemoryTargets, ModelConfig, Precision};
pub use error::{DatasetError, Error, Result};
pub use geometry::{PoseDelta, Se3};
pub use model::{Ledger, Model};
