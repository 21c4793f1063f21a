//! Desk-scale urban noise workbench: a propagation simulator, a fully
//! conditioned Glow surrogate trained by exact likelihood, and the
//! evaluation suite that compares the two.

pub mod datagen;
pub mod flow;
pub mod io_util;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod simulator;
pub mod trainer;
