//! Experiment harness: training, subset evaluation, ablations, gradient
//! checks and report emission.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod report;
pub mod train;
