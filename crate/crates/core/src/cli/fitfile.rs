//! `fit.json`: everything `predict` needs, plus the fit summary.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::CliError;
use crate::estimator::FitResult;
use crate::inference::FittedModel;
use crate::markov::ModelParams;

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Knots per transition in config order of the structure; `null` for constant baselines.
    pub knots: Vec<Option<Vec<f64>>>,
    pub parameter_names: Vec<String>,
    pub theta: Vec<f64>,
    /// Row-major covariance of `theta`.
    pub v_theta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub edf: Vec<f64>,
    pub edf_total: f64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub pen_loglik: f64,
    pub ubre: f64,
    /// Span the hazards were held constant over when fitting; the default
    /// prediction grid.
    pub approximation_width: f64,
    pub warnings: Vec<String>,
}

impl FitFile {
    pub fn from_fit(config: &ModelConfig, knots: Vec<Option<Vec<f64>>>, fit: &FitResult) -> Self {
        let q = fit.spec.n_params();
        Self {
            format_version: FIT_FORMAT_VERSION,
            config: config.clone(),
            knots,
            parameter_names: (0..q).map(|k| fit.spec.param_name(k)).collect(),
            theta: fit.theta_hat.theta.iter().copied().collect(),
            v_theta: (0..q)
                .map(|i| (0..q).map(|j| fit.v_theta[(i, j)]).collect())
                .collect(),
            lambda: fit.lambda_hat.clone(),
            edf: fit.edf_blocks.clone(),
            edf_total: fit.edf_total,
            converged: fit.converged,
            iterations: fit.iterations,
            loglik: fit.loglik,
            pen_loglik: fit.pen_loglik,
            ubre: fit.ubre,
            approximation_width: fit.approximation_width,
            warnings: fit.warnings.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if file.format_version != FIT_FORMAT_VERSION {
            return Err(CliError::Validation(format!(
                "{}: unsupported fit format version {}",
                path.display(),
                file.format_version
            )));
        }
        file.config.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Output(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn model(&self) -> Result<FittedModel, CliError> {
        let spec = self.config.spec_with_knots(&self.knots)?;
        let q = spec.n_params();
        if self.theta.len() != q
            || self.v_theta.len() != q
            || self.v_theta.iter().any(|r| r.len() != q)
        {
            return Err(CliError::Validation(format!(
                "fit file holds {} parameters, model needs {q}",
                self.theta.len()
            )));
        }
        let theta = ModelParams::from_vec(&spec, self.theta.clone())
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let v_theta = DMatrix::from_fn(q, q, |i, j| self.v_theta[i][j]);
        Ok(FittedModel {
            spec,
            theta,
            v_theta,
            approximation_width: self.approximation_width,
        })
    }
}
