//! Conversion of the heart-transplant CAV data (`cav` in the R package `msm`,
//! exported with `write.csv`) to the ingest format.
//!
//! States 1 (no CAV), 2 (mild), 3 (moderate or severe) and 4 (death) collapse
//! to three: 1, {2, 3} -> 2, 4 -> 3. Covariates are donor age `dage` and
//! `ihd`, an indicator of ischaemic heart disease as primary diagnosis.

use std::io::{Read, Write};

use super::config::{
    BaselineKind, CovariateConfig, DataConfig, LikelihoodConfig, ModelConfig, PredictionConfig,
    StatesConfig, TransitionConfig, FORMAT_VERSION,
};
use super::CliError;
use crate::estimator::FitOptions;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CavReport {
    pub rows: usize,
    pub patients: usize,
    pub ihd_rows: usize,
    /// Rows whose `pdiag` is missing, coded `ihd = 0`.
    pub missing_pdiag: usize,
}

pub fn collapse_state(s: u32) -> Option<u32> {
    match s {
        1 => Some(1),
        2 | 3 => Some(2),
        4 => Some(3),
        _ => None,
    }
}

/// Rewrites the exported table as `id,time,state,dage,ihd`.
pub fn convert<R: Read, W: Write>(
    input: R,
    output: W,
    state_column: &str,
) -> Result<CavReport, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Validation(format!("CSV header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("column `{name}` is missing")))
    };
    let (c_id, c_time, c_state, c_dage, c_pdiag) = (
        col("PTNUM")?,
        col("years")?,
        col(state_column)?,
        col("dage")?,
        col("pdiag")?,
    );
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["id", "time", "state", "dage", "ihd"])
        .map_err(CliError::csv)?;
    let mut report = CavReport {
        rows: 0,
        patients: 0,
        ihd_rows: 0,
        missing_pdiag: 0,
    };
    let mut last_id: Option<String> = None;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::Validation(format!("CSV: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let bad = |name: &str, v: &str| {
            CliError::Validation(format!("line {line}: `{name}` value `{v}` is not usable"))
        };
        let id = field(c_id).to_string();
        let time: f64 = field(c_time)
            .parse()
            .map_err(|_| bad("years", field(c_time)))?;
        let state = field(c_state)
            .parse::<u32>()
            .ok()
            .and_then(collapse_state)
            .ok_or_else(|| bad(state_column, field(c_state)))?;
        let dage: f64 = field(c_dage)
            .parse()
            .map_err(|_| bad("dage", field(c_dage)))?;
        let ihd = match field(c_pdiag) {
            "IHD" => {
                report.ihd_rows += 1;
                1
            }
            "" | "NA" => {
                report.missing_pdiag += 1;
                0
            }
            _ => 0,
        };
        if last_id.as_deref() != Some(id.as_str()) {
            report.patients += 1;
            last_id = Some(id.clone());
        }
        report.rows += 1;
        w.write_record([
            id,
            time.to_string(),
            state.to_string(),
            dage.to_string(),
            ihd.to_string(),
        ])
        .map_err(CliError::csv)?;
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))?;
    Ok(report)
}

/// Three-state model for the converted data: spline baselines with ten knots,
/// shared coefficients for `dage` and `ihd`, grid width 1.2 years, exact
/// death times and follow-up truncated at 15 years.
pub fn config() -> ModelConfig {
    let tr = |from, to| TransitionConfig {
        from,
        to,
        baseline: BaselineKind::Spline,
        knots: Some(10),
        knot_values: None,
    };
    ModelConfig {
        format_version: FORMAT_VERSION,
        seed: 1,
        states: StatesConfig {
            labels: vec!["no CAV".into(), "CAV".into(), "dead".into()],
        },
        transitions: vec![tr(1, 2), tr(1, 3), tr(2, 3)],
        covariates: CovariateConfig {
            names: vec!["dage".into(), "ihd".into()],
            share_beta: true,
        },
        likelihood: LikelihoodConfig {
            grid_width: Some(1.2),
            exact_death: true,
        },
        data: DataConfig {
            max_time: Some(15.0),
        },
        fit: FitOptions::default(),
        prediction: PredictionConfig::default(),
        simulation: None,
    }
}
