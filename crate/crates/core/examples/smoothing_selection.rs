//! UBRE as a function of the smoothing parameter for one spline hazard, and
//! the simplex search that replaces a grid search.
//!
//! ```text
//! cargo run --release --example smoothing_selection
//! ```

use msmspline::estimator::{
    effective_df, fit_theta, initial_theta, optimize_lambda, ubre, FitOptions, WorkingQuantities,
};
use msmspline::likelihood::{evaluate, Individual, Observation, PanelDataset, PenaltyConfig, Want};
use msmspline::markov::{Baseline, ModelParams, ModelSpec, Transition, TransitionStructure};
use msmspline::simulate::stream_rng;
use msmspline::splinebasis::place_knots;
use rand::Rng;

/// Alive/dead panel with Weibull deaths, annual visits and exact death times.
fn weibull_panel(n: usize, seed: u64) -> PanelDataset {
    let mut rng = stream_rng(seed, 0);
    let people = (0..n)
        .map(|i| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let death = 6.0 * (-u.ln()).powf(1.0 / 1.8);
            let mut observations: Vec<Observation> = (0..=10)
                .map(|v| v as f64)
                .take_while(|&t| t < death)
                .map(|time| Observation {
                    time,
                    state: 0,
                    covariates: vec![],
                })
                .collect();
            if death <= 10.0 {
                observations.push(Observation {
                    time: death,
                    state: 1,
                    covariates: vec![],
                });
            }
            Individual {
                id: (i + 1).to_string(),
                observations,
                death_exact: death <= 10.0,
            }
        })
        .filter(|i| i.observations.len() > 1)
        .collect();
    PanelDataset::new(people, 2, 0).expect("valid panel")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = weibull_panel(300, 3);
    let knots = place_knots(&data.all_times(), 8, "1->2")?;
    let structure = TransitionStructure::new(2, [Transition::new(0, 1)], vec![])?;
    let spec = ModelSpec::new(structure, vec![Baseline::spline(knots)], false)?;
    let options = FitOptions::default();

    // working quantities after scoring to convergence at lambda = 1
    let penalty = PenaltyConfig::new(&spec, vec![1.0]);
    let inner = fit_theta(
        &spec,
        &penalty,
        &initial_theta(&spec, &data),
        &data,
        &options,
    )?;
    let params = ModelParams {
        theta: inner.theta.clone(),
    };
    let eval = evaluate(
        &spec,
        &params,
        &data,
        &options.likelihood,
        Want::ScoreAndFisher,
    )?;
    let working = WorkingQuantities::new(inner.theta, eval.score.unwrap(), eval.fisher.unwrap())?;

    println!("log10(lambda)      UBRE     edf");
    for e in (-8..=12).step_by(2) {
        let l = [10f64.powi(e)];
        let (_, edf) = effective_df(&l, &working, &penalty).unwrap();
        println!("{e:>13} {:>9.4} {edf:>7.3}", ubre(&l, &working, &penalty));
    }
    let found = optimize_lambda(&working, &penalty, &[1.0], &options);
    println!(
        "simplex: lambda {:.4e}, UBRE {:.4} after {} iterations",
        found.lambda[0], found.ubre, found.iterations
    );
    Ok(())
}
