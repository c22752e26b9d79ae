//! Model configuration file (TOML).
//!
//! ```toml
//! format_version = 1
//! seed = 1                      # simulation and prediction draws; `--seed` wins, `[simulation].seed` loses
//!
//! [states]
//! labels = ["healthy", "ill", "dead"]   # the last state is absorbing (death)
//!
//! [[transitions]]
//! from = 1                      # 1-based state numbers
//! to = 2
//! baseline = "spline"           # or "constant"
//! knots = 10                    # knot count, placed at quantiles of all observation times
//! # knot_values = [0, 1, 3, 6, 10]   # or explicit knots
//!
//! [covariates]
//! names = ["dage", "ihd"]       # data columns
//! share_beta = true             # one coefficient vector for all transitions
//!
//! [likelihood]
//! grid_width = 1.2              # omit to use the observation intervals
//! exact_death = true            # final death rows are exact death times
//!
//! [data]
//! max_time = 15.0               # drop rows observed later
//!
//! [fit]                         # estimator controls, all optional
//! delta = 1e-6
//! max_outer = 200
//! max_inner = 100
//! lambda_min = 1e-8
//! lambda_max = 1e12
//!
//! [prediction]
//! n_sims = 1000
//! level = 0.05
//! # grid_width = 0.5           # default: the likelihood grid, or the median visit gap
//!
//! [simulation]                  # illness-death scenario for `simulate`
//! n_individuals = 200
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::estimator::FitOptions;
use crate::likelihood::{LikelihoodOptions, PanelDataset};
use crate::markov::{Baseline, ModelSpec, Transition, TransitionStructure};
use crate::simulate::Scenario;
use crate::splinebasis::{place_knots, KnotVector};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_KNOTS: usize = 10;
const RESERVED_COLUMNS: [&str; 3] = ["id", "time", "state"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub format_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub states: StatesConfig,
    pub transitions: Vec<TransitionConfig>,
    #[serde(default)]
    pub covariates: CovariateConfig,
    #[serde(default)]
    pub likelihood: LikelihoodConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<Scenario>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesConfig {
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Spline,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    pub from: usize,
    pub to: usize,
    pub baseline: BaselineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knot_values: Option<Vec<f64>>,
}

impl TransitionConfig {
    fn label(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    pub names: Vec<String>,
    pub share_beta: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodConfig {
    pub grid_width: Option<f64>,
    pub exact_death: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub max_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub n_sims: usize,
    pub level: f64,
    /// Sub-interval width for predicted transition probabilities; by default
    /// the span the fit held hazards constant over.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_width: Option<f64>,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            n_sims: 1000,
            level: 0.05,
            grid_width: None,
        }
    }
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config field `{field}`: {reason}"))
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Progressive illness-death model with spline hazards and exact deaths.
    pub fn illness_death(knots: usize) -> Self {
        let tr = |from, to| TransitionConfig {
            from,
            to,
            baseline: BaselineKind::Spline,
            knots: Some(knots),
            knot_values: None,
        };
        Self {
            format_version: FORMAT_VERSION,
            seed: 1,
            states: StatesConfig {
                labels: vec!["healthy".into(), "ill".into(), "dead".into()],
            },
            transitions: vec![tr(1, 2), tr(1, 3), tr(2, 3)],
            covariates: CovariateConfig::default(),
            likelihood: LikelihoodConfig {
                grid_width: None,
                exact_death: true,
            },
            data: DataConfig::default(),
            fit: FitOptions::default(),
            prediction: PredictionConfig::default(),
            simulation: Some(Scenario::default()),
        }
    }

    pub fn n_states(&self) -> usize {
        self.states.labels.len()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(invalid(
                "format_version",
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    self.format_version
                ),
            ));
        }
        let d = self.n_states();
        if d < 2 {
            return Err(invalid("states.labels", "at least two states are required"));
        }
        if self.transitions.is_empty() {
            return Err(invalid("transitions", "no transitions configured"));
        }
        for (i, tc) in self.transitions.iter().enumerate() {
            let field = format!("transitions[{}]", tc.label());
            if !(1..=d).contains(&tc.from) || !(1..=d).contains(&tc.to) {
                return Err(invalid(&field, format!("states must lie in 1..={d}")));
            }
            if tc.from == d {
                return Err(invalid(&field, "the last state is absorbing"));
            }
            if self.transitions[..i]
                .iter()
                .any(|o| o.from == tc.from && o.to == tc.to)
            {
                return Err(invalid(&field, "listed twice"));
            }
            match tc.baseline {
                BaselineKind::Spline => {
                    if tc.knots.is_some() && tc.knot_values.is_some() {
                        return Err(invalid(&field, "give either `knots` or `knot_values`"));
                    }
                    if let Some(k) = tc.knots {
                        if k < 3 {
                            return Err(invalid(&field, format!("K = {k}; splines need K >= 3")));
                        }
                    }
                    if let Some(v) = &tc.knot_values {
                        KnotVector::new(v.clone()).map_err(|e| invalid(&field, e))?;
                    }
                }
                BaselineKind::Constant => {
                    if tc.knots.is_some() || tc.knot_values.is_some() {
                        return Err(invalid(&field, "a constant baseline takes no knots"));
                    }
                }
            }
        }
        let names = &self.covariates.names;
        for (i, n) in names.iter().enumerate() {
            if RESERVED_COLUMNS.contains(&n.as_str()) {
                return Err(invalid(
                    "covariates.names",
                    format!("`{n}` is a reserved column"),
                ));
            }
            if names[..i].contains(n) {
                return Err(invalid("covariates.names", format!("`{n}` listed twice")));
            }
        }
        if let Some(h) = self.likelihood.grid_width {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("likelihood.grid_width", "must be positive"));
            }
        }
        if let Some(m) = self.data.max_time {
            if !(m > 0.0) {
                return Err(invalid("data.max_time", "must be positive"));
            }
        }
        let f = &self.fit;
        if !(f.delta > 0.0) {
            return Err(invalid("fit.delta", "must be positive"));
        }
        if f.max_outer == 0 || f.max_inner == 0 {
            return Err(invalid("fit", "iteration caps must be at least 1"));
        }
        if !(f.lambda_min > 0.0 && f.lambda_min < f.lambda_max) {
            return Err(invalid("fit", "need 0 < lambda_min < lambda_max"));
        }
        let p = &self.prediction;
        if p.n_sims < 2 {
            return Err(invalid("prediction.n_sims", "must be at least 2"));
        }
        if !(p.level > 0.0 && p.level < 1.0) {
            return Err(invalid("prediction.level", "must lie in (0, 1)"));
        }
        if p.grid_width.is_some_and(|h| !(h > 0.0)) {
            return Err(invalid("prediction.grid_width", "must be positive"));
        }
        if let Some(s) = &self.simulation {
            s.validate().map_err(|e| invalid("simulation", e))?;
        }
        self.structure()?;
        Ok(())
    }

    pub fn structure(&self) -> Result<TransitionStructure, CliError> {
        TransitionStructure::new(
            self.n_states(),
            self.transitions
                .iter()
                .map(|t| Transition::new(t.from - 1, t.to - 1)),
            self.covariates.names.clone(),
        )
        .map_err(|e| invalid("transitions", e))
    }

    /// Knots of each transition in structure order; `None` for constant baselines.
    pub fn resolve_knots(&self, data: &PanelDataset) -> Result<Vec<Option<Vec<f64>>>, CliError> {
        let structure = self.structure()?;
        let times = data.all_times();
        structure
            .transitions()
            .iter()
            .map(|tr| {
                let tc = self
                    .transitions
                    .iter()
                    .find(|c| c.from == tr.from + 1 && c.to == tr.to + 1)
                    .expect("structure built from config");
                match tc.baseline {
                    BaselineKind::Constant => Ok(None),
                    BaselineKind::Spline => match &tc.knot_values {
                        Some(v) => Ok(Some(v.clone())),
                        None => place_knots(&times, tc.knots.unwrap_or(DEFAULT_KNOTS), &tc.label())
                            .map(|k| Some(k.as_slice().to_vec()))
                            .map_err(|e| CliError::Validation(e.to_string())),
                    },
                }
            })
            .collect()
    }

    /// Model specification from resolved knots (see [`Self::resolve_knots`]).
    pub fn spec_with_knots(&self, knots: &[Option<Vec<f64>>]) -> Result<ModelSpec, CliError> {
        let structure = self.structure()?;
        if knots.len() != structure.transitions().len() {
            return Err(CliError::Validation(format!(
                "{} knot vectors for {} transitions",
                knots.len(),
                structure.transitions().len()
            )));
        }
        let baselines = knots
            .iter()
            .map(|k| match k {
                None => Ok(Baseline::Constant),
                Some(v) => KnotVector::new(v.clone())
                    .map(Baseline::spline)
                    .map_err(|e| CliError::Validation(e.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        ModelSpec::new(structure, baselines, self.covariates.share_beta)
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            likelihood: LikelihoodOptions {
                grid_width: self.likelihood.grid_width,
            },
            ..self.fit.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAV: &str = r#"
format_version = 1

[states]
labels = ["no CAV", "CAV", "dead"]

[[transitions]]
from = 1
to = 2
baseline = "spline"
knots = 10

[[transitions]]
from = 1
to = 3
baseline = "spline"

[[transitions]]
from = 2
to = 3
baseline = "constant"

[covariates]
names = ["dage", "ihd"]
share_beta = true

[likelihood]
grid_width = 1.2
exact_death = true

[data]
max_time = 15
"#;

    #[test]
    fn parses_documented_layout() {
        let c = ModelConfig::from_toml(CAV).unwrap();
        assert_eq!(c.n_states(), 3);
        assert_eq!(c.transitions[2].baseline, BaselineKind::Constant);
        assert_eq!(c.fit_options().likelihood.grid_width, Some(1.2));
        assert_eq!(c.data.max_time, Some(15.0));
        assert_eq!(c.prediction.n_sims, 1000);
        let again = ModelConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn default_illness_death_round_trips() {
        let c = ModelConfig::illness_death(10);
        c.validate().unwrap();
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    fn err(text: &str) -> String {
        ModelConfig::from_toml(text).unwrap_err().to_string()
    }

    #[test]
    fn errors_name_the_field() {
        assert!(err(&CAV.replace("knots = 10", "knots = 2")).contains("K >= 3"));
        assert!(
            err(&CAV.replace("format_version = 1", "format_version = 7"))
                .contains("format_version")
        );
        assert!(err(&CAV.replace("grid_width = 1.2", "grid_width = -1"))
            .contains("likelihood.grid_width"));
        assert!(err(&CAV.replace("max_time = 15", "max_tme = 15")).contains("max_tme"));
        assert!(err(&CAV.replace("from = 2\nto = 3", "from = 3\nto = 1")).contains("transitions"));
        assert!(err(&CAV.replace("\"ihd\"", "\"time\"")).contains("reserved"));
    }
}
