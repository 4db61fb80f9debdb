//! EnKF-DMD: Koopman spectrum estimation from noisy snapshots with ensemble
//! Kalman filtering on top of dynamic mode decomposition.

pub mod delay;
pub mod dmd;
pub mod enkf;
pub mod error;
pub mod experiments;
pub mod report;
pub mod series;
pub mod spectral;
pub mod systems;
pub mod theory;

mod linalg;

pub use error::{Error, Result};
pub use series::SnapshotSeries;
pub use spectral::SpectralParams;
