//! Penalised spline-hazard Markov multistate models for interval-censored
//! panel data.

pub mod cli;
pub mod estimator;
pub mod inference;
pub mod likelihood;
pub mod markov;
mod quantile;
pub mod simulate;
pub mod splinebasis;

pub use quantile::quantile_type7;
