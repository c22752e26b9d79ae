use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::cav;
use super::config::ModelConfig;
use super::data::{ingest_path, write_dataset, write_pairs, IngestReport};
use super::fitfile::FitFile;
use super::{
    CavArgs, CliError, CurveArgs, FitArgs, MatrixArgs, PredictArgs, PredictCommon, PredictKind,
    SimulateArgs,
};
use crate::estimator::{self, FitResult};
use crate::inference::{hazard_curve, predict_p, FittedModel, SimulationSettings};
use crate::likelihood::PanelDataset;
use crate::markov::Transition;
use crate::simulate::{simulate_dataset, true_transition_probabilities};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}

pub struct SimulateOutcome {
    pub data: PanelDataset,
    pub truth: Option<DMatrix<f64>>,
}

/// Writes `data.csv` and, unless `truth_paths` is 0, `truth.csv`.
pub fn simulate(args: &SimulateArgs) -> Result<SimulateOutcome, CliError> {
    let config = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::illness_death(crate::cli::config::DEFAULT_KNOTS),
    };
    if config.n_states() != 3 || !config.covariates.names.is_empty() {
        return Err(CliError::Validation(
            "simulate: the simulator generates three-state illness-death data without covariates"
                .into(),
        ));
    }
    let mut scenario = config.simulation.clone().unwrap_or_default();
    scenario.seed = args.seed.unwrap_or(config.seed);
    if let Some(n) = args.n {
        scenario.n_individuals = n;
    }
    if !(args.t0 >= 0.0 && args.t1 > args.t0) {
        return Err(CliError::Validation("simulate: need 0 <= t0 < t1".into()));
    }
    let data = simulate_dataset(&scenario).map_err(|e| CliError::Validation(e.to_string()))?;
    out_dir(&args.out)?;
    let path = args.out.join("data.csv");
    write_dataset(create(&path)?, &data, &[])?;
    let truth = if args.truth_paths > 0 {
        let p = true_transition_probabilities(&scenario, args.t0, args.t1, args.truth_paths);
        let mut w = csv_writer(&args.out.join("truth.csv"))?;
        w.write_record(["from", "to", "t0", "t1", "probability"])
            .map_err(CliError::csv)?;
        for r in 0..3 {
            for s in 0..3 {
                w.write_record([
                    (r + 1).to_string(),
                    (s + 1).to_string(),
                    args.t0.to_string(),
                    args.t1.to_string(),
                    p[(r, s)].to_string(),
                ])
                .map_err(CliError::csv)?;
            }
        }
        finish(w)?;
        Some(p)
    } else {
        None
    };
    Ok(SimulateOutcome { data, truth })
}

pub struct FitOutcome {
    pub converged: bool,
    pub report: IngestReport,
    pub fit: FitResult,
    pub file: FitFile,
}

/// Fits the configured model and writes `parameters.csv`, `lambda.csv`,
/// `edf.csv`, `trace.csv`, `pairs.csv` and `fit.json` to the output directory.
pub fn fit(args: &FitArgs) -> Result<FitOutcome, CliError> {
    let mut config = ModelConfig::load(&args.config)?;
    if let Some(h) = args.grid_width {
        config.likelihood.grid_width = Some(h);
        config.validate()?;
    }
    let (data, report) = ingest_path(&args.data, &config)?;
    log::info!("{report}");
    let knots = config.resolve_knots(&data)?;
    let spec = config.spec_with_knots(&knots)?;
    let result = estimator::fit(&spec, &data, &config.fit_options())?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if !result.converged {
        eprintln!(
            "warning: fit did not converge after {} outer iterations",
            result.iterations
        );
    }
    let file = FitFile::from_fit(&config, knots, &result);
    write_fit_outputs(&args.out, &report, &result, &file)?;
    Ok(FitOutcome {
        converged: result.converged,
        report,
        fit: result,
        file,
    })
}

fn write_fit_outputs(
    dir: &Path,
    report: &IngestReport,
    fit: &FitResult,
    file: &FitFile,
) -> Result<(), CliError> {
    out_dir(dir)?;
    let se = fit.std_errors();
    let mut w = csv_writer(&dir.join("parameters.csv"))?;
    w.write_record(["name", "estimate", "std_error"])
        .map_err(CliError::csv)?;
    for (k, name) in file.parameter_names.iter().enumerate() {
        w.write_record([name.clone(), file.theta[k].to_string(), se[k].to_string()])
            .map_err(CliError::csv)?;
    }
    finish(w)?;

    let labels: Vec<String> = fit
        .spec
        .spline_transitions()
        .iter()
        .map(|&ti| fit.spec.structure().transitions()[ti].to_string())
        .collect();
    let mut w = csv_writer(&dir.join("lambda.csv"))?;
    w.write_record(["transition", "lambda"])
        .map_err(CliError::csv)?;
    for (l, v) in labels.iter().zip(&fit.lambda_hat) {
        w.write_record([l.clone(), v.to_string()])
            .map_err(CliError::csv)?;
    }
    finish(w)?;

    let mut w = csv_writer(&dir.join("edf.csv"))?;
    w.write_record(["term", "edf"]).map_err(CliError::csv)?;
    for (l, v) in labels.iter().zip(&fit.edf_blocks) {
        w.write_record([l.clone(), v.to_string()])
            .map_err(CliError::csv)?;
    }
    w.write_record(["total".to_string(), fit.edf_total.to_string()])
        .map_err(CliError::csv)?;
    finish(w)?;

    let mut w = csv_writer(&dir.join("trace.csv"))?;
    let mut header: Vec<String> = [
        "outer",
        "inner_iterations",
        "pen_loglik",
        "ubre",
        "max_change",
    ]
    .map(String::from)
    .to_vec();
    header.extend(labels.iter().map(|l| format!("lambda[{l}]")));
    w.write_record(&header).map_err(CliError::csv)?;
    for row in &fit.trace {
        let mut rec = vec![
            row.outer.to_string(),
            row.inner_iterations.to_string(),
            row.pen_loglik.to_string(),
            row.ubre.to_string(),
            row.max_change.to_string(),
        ];
        rec.extend(row.lambda.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(CliError::csv)?;
    }
    finish(w)?;

    write_pairs(create(&dir.join("pairs.csv"))?, report)?;
    file.save(&dir.join("fit.json"))
}

fn settings(common: &PredictCommon, file: &FitFile) -> SimulationSettings {
    SimulationSettings {
        n_sims: common.nsims.unwrap_or(file.config.prediction.n_sims),
        level: common.level.unwrap_or(file.config.prediction.level),
        seed: common.seed.unwrap_or(file.config.seed),
    }
}

/// Parses `name=value` pairs into the model's covariate order.
pub fn parse_covariates(pairs: &[String], names: &[String]) -> Result<Vec<f64>, CliError> {
    let mut x = vec![None; names.len()];
    for pair in pairs {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--x `{pair}`: expected NAME=VALUE")))?;
        let m = names.iter().position(|n| n == name.trim()).ok_or_else(|| {
            CliError::Validation(format!("--x: `{name}` is not a model covariate"))
        })?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("--x {name}: `{value}` is not a number")))?;
        x[m] = Some(v);
    }
    names
        .iter()
        .zip(x)
        .map(|(n, v)| v.ok_or_else(|| CliError::Validation(format!("--x {n}=VALUE is required"))))
        .collect()
}

fn output(path: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let file = FitFile::load(&args.fit)?;
    let model = file.model()?;
    match &args.kind {
        PredictKind::Matrix(m) => predict_matrix(&file, &model, m),
        PredictKind::Curve(c) => predict_curve(&file, &model, c),
    }
}

fn predict_matrix(file: &FitFile, model: &FittedModel, args: &MatrixArgs) -> Result<(), CliError> {
    let x = parse_covariates(&args.common.x, &file.config.covariates.names)?;
    let grid = args
        .grid_width
        .or(file.config.prediction.grid_width)
        .unwrap_or(model.approximation_width);
    let p = predict_p(
        model,
        args.t0,
        args.t1,
        &x,
        grid,
        &settings(&args.common, file),
    )?;
    let mut w = output(&args.common.out)?;
    w.write_record(["from", "to", "point", "lower", "upper"])
        .map_err(CliError::csv)?;
    for r in 0..p.nrows() {
        for s in 0..p.ncols() {
            let e = p[(r, s)];
            w.write_record([
                (r + 1).to_string(),
                (s + 1).to_string(),
                e.point.to_string(),
                e.lower.to_string(),
                e.upper.to_string(),
            ])
            .map_err(CliError::csv)?;
        }
    }
    finish(w)
}

fn parse_transition(text: &str) -> Result<Transition, CliError> {
    let bad = || CliError::Validation(format!("--transition `{text}`: expected FROM-TO"));
    let (a, b) = text.split_once('-').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b == 0 {
        return Err(bad());
    }
    Ok(Transition::new(a - 1, b - 1))
}

fn predict_curve(file: &FitFile, model: &FittedModel, args: &CurveArgs) -> Result<(), CliError> {
    let x = parse_covariates(&args.common.x, &file.config.covariates.names)?;
    let spec = &model.spec;
    let transitions: Vec<usize> = match &args.transition {
        Some(t) => {
            let tr = parse_transition(t)?;
            let ti = spec.structure().index_of(tr).ok_or_else(|| {
                CliError::Validation(format!("transition {tr} is not in the fitted model"))
            })?;
            vec![ti]
        }
        None => spec.spline_transitions(),
    };
    if args.points < 2 {
        return Err(CliError::Validation("--points must be at least 2".into()));
    }
    let settings = settings(&args.common, file);
    let mut w = output(&args.common.out)?;
    w.write_record(["from", "to", "t", "point", "lower", "upper"])
        .map_err(CliError::csv)?;
    for ti in transitions {
        let tr = spec.structure().transitions()[ti];
        let end = args
            .to_time
            .or_else(|| spec.baselines()[ti].knots().map(|k| k.last()))
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "--to-time is required for constant transition {tr}"
                ))
            })?;
        if !(end > args.from_time) {
            return Err(CliError::Validation(
                "curve end must exceed --from-time".into(),
            ));
        }
        let n = args.points;
        let grid: Vec<f64> = (0..n)
            .map(|i| args.from_time + (end - args.from_time) * i as f64 / (n - 1) as f64)
            .collect();
        for c in hazard_curve(model, tr, &grid, &x, &settings)? {
            w.write_record([
                (tr.from + 1).to_string(),
                (tr.to + 1).to_string(),
                c.t.to_string(),
                c.estimate.point.to_string(),
                c.estimate.lower.to_string(),
                c.estimate.upper.to_string(),
            ])
            .map_err(CliError::csv)?;
        }
    }
    finish(w)
}

pub fn cav_recipe(args: &CavArgs) -> Result<cav::CavReport, CliError> {
    let input = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let report = cav::convert(
        std::io::BufReader::new(input),
        create(&args.output)?,
        &args.state_column,
    )?;
    eprintln!(
        "{} rows, {} patients, {} IHD rows, {} rows with missing pdiag",
        report.rows, report.patients, report.ihd_rows, report.missing_pdiag
    );
    if let Some(p) = &args.config_out {
        std::fs::write(p, cav::config().to_toml()).map_err(|e| CliError::io(p, e))?;
    }
    Ok(report)
}
