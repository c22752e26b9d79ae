//! Simulation-based intervals: hazard curves and a transition probability
//! matrix from draws of the fitted parameters.
//!
//! ```text
//! cargo run --release --example confidence_bands -- [seed]
//! ```

use msmspline::estimator::{fit, quantile_knot_spec, FitOptions};
use msmspline::inference::{hazard_curve, predict_p, FittedModel, SimulationSettings};
use msmspline::markov::{Transition, TransitionStructure};
use msmspline::simulate::{simulate_dataset, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(1);
    let data = simulate_dataset(&Scenario {
        seed,
        ..Scenario::default()
    })?;
    let spec = quantile_knot_spec(TransitionStructure::illness_death(vec![]), &data, 10, false)?;
    let result = fit(&spec, &data, &FitOptions::default())?;
    let model = FittedModel::from(&result);
    let settings = SimulationSettings::default();

    let grid: Vec<f64> = (0..=12).map(|i| i as f64).collect();
    for tr in [Transition::new(0, 1), Transition::new(1, 2)] {
        println!("hazard {tr}:");
        for c in hazard_curve(&model, tr, &grid, &[], &settings)? {
            println!(
                "  t {:>4.1}  {:.4}  ({:.4}, {:.4}){}",
                c.t,
                c.estimate.point,
                c.estimate.lower,
                c.estimate.upper,
                if c.extrapolated {
                    "  beyond the knots"
                } else {
                    ""
                }
            );
        }
    }

    let p = predict_p(&model, 0.0, 10.0, &[], model.approximation_width, &settings)?;
    println!(
        "P(0, 10) with 95% intervals from {} draws:",
        settings.n_sims
    );
    for r in 0..p.nrows() {
        let cells: Vec<String> = (0..p.ncols())
            .map(|s| {
                let e = p[(r, s)];
                format!("{:.3} ({:.3}, {:.3})", e.point, e.lower, e.upper)
            })
            .collect();
        println!("  {}", cells.join("  "));
    }
    Ok(())
}
