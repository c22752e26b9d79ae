//! Heart-transplant CAV analysis: convert the `cav` table from the R package
//! `msm`, tabulate transitions, fit spline hazards with shared covariate
//! effects and predict five-year probabilities.
//!
//! ```text
//! Rscript -e 'write.csv(msm::cav, "cav.csv")'
//! cargo run --release --example cav_analysis -- cav.csv
//! ```

use msmspline::cli::cav;
use msmspline::cli::data::ingest;
use msmspline::estimator::fit;
use msmspline::inference::{predict_p, FittedModel, SimulationSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: cav_analysis <cav.csv>");
        std::process::exit(2);
    };
    let mut converted = Vec::new();
    let recipe = cav::convert(std::fs::File::open(&path)?, &mut converted, "statemax")?;
    println!("{} rows for {} patients", recipe.rows, recipe.patients);

    let config = cav::config();
    let (data, report) = ingest(converted.as_slice(), &config)?;
    print!("{report}");

    let knots = config.resolve_knots(&data)?;
    let spec = config.spec_with_knots(&knots)?;
    let result = fit(&spec, &data, &config.fit_options())?;
    println!(
        "converged = {} after {} iterations",
        result.converged, result.iterations
    );
    println!("lambda = {:.3?}", result.lambda_hat);
    let se = result.std_errors();
    let q = spec.n_params();
    for k in q - 2..q {
        println!(
            "{:<10} {:>8.4}  (se {:.4})",
            spec.param_name(k),
            result.theta_hat.theta[k],
            se[k]
        );
    }

    // donor aged 26, ischaemic heart disease as primary diagnosis
    let model = FittedModel::from(&result);
    let h = model.approximation_width;
    let p = predict_p(
        &model,
        0.0,
        5.0,
        &[26.0, 1.0],
        h,
        &SimulationSettings::default(),
    )?;
    let e = p[(0, 1)];
    println!(
        "P12(0, 5) = {:.3} ({:.3}, {:.3})",
        e.point, e.lower, e.upper
    );
    Ok(())
}
