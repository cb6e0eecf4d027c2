//! Two-layer neural spline field fitting for handheld image bursts.

pub mod camera;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoding;
pub mod layers;
pub mod metrics;
pub mod mlp;
pub mod real;
pub mod spline;
pub mod training;

pub use real::Real;
