//! Generator matrices, transition probabilities and their derivatives.

mod expm;
mod interval;
mod model;

pub use expm::{
    dp_auto, dp_dtheta, dp_fallback, exp_divided_difference, expm_pade, transition_matrix,
    transition_matrix_with, DerivativeKernel, EigenDecomp, C64, EIGEN_TIE, FD_STEP, MAX_CONDITION,
    PADE_MAX_NORM,
};
pub use interval::{interval_prob, subinterval_edges, IntervalGradient, Outcome};
pub use model::{
    build_generator, dq_dtheta, hazard, Baseline, HazardEval, ModelParams, ModelSpec, ParamRole,
    Transition, TransitionStructure,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("invalid model structure: {0}")]
    Structure(String),
    #[error("transition {0} is not allowed")]
    Disallowed(Transition),
    #[error("parameter index {index} out of range (model has {n_params})")]
    ParamIndex { index: usize, n_params: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}
