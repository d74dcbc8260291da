//! Activity-level classification from wearable inertial sensors.
//!
//! The crate turns raw multi-sensor recordings into fixed-length windows
//! labeled Low / Medium / High by the MET intensity of the activity being
//! performed, trains small neural classifiers on them with an in-crate
//! reverse-mode autodiff engine, and compares sensor placements and
//! architectures with paired significance tests.

pub mod autodiff;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod experiment;
pub mod models;
pub mod pamap2;
pub mod preprocess;
pub mod stats;
pub mod synth;
pub mod train;
