//! Transition probabilities of an illness-death model with time-varying
//! hazards, and their derivatives with respect to a parameter.
//!
//! ```text
//! cargo run --example transition_probabilities
//! ```

use msmspline::markov::{
    build_generator, dp_auto, dq_dtheta, interval_prob, transition_matrix, Baseline, EigenDecomp,
    ModelParams, ModelSpec, TransitionStructure,
};
use msmspline::splinebasis::KnotVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let knots = KnotVector::new(vec![0.0, 2.5, 5.0, 7.5, 10.0])?;
    let spec = ModelSpec::new(
        TransitionStructure::illness_death(vec![]),
        vec![
            Baseline::spline(knots.clone()),
            Baseline::Constant,
            Baseline::spline(knots),
        ],
        false,
    )?;
    // log-hazard values at the knots for 1->2 and 2->3, one log-rate for 1->3
    let theta = vec![
        -2.5, -1.8, -1.6, -1.7, -2.0, //
        -2.5, //
        -2.4, -2.1, -1.8, -1.5, -1.2,
    ];
    let params = ModelParams::from_vec(&spec, theta)?;

    let q = build_generator(&spec, &params, 0.0, &[])?;
    println!("Q(0) ={q:.4}");
    println!("exp(5 Q(0)) ={:.4}", transition_matrix(&q, 5.0)?);

    // piecewise-constant hazards: finer grids converge
    for grid in [None, Some(1.0), Some(0.1), Some(0.01)] {
        let p = interval_prob(&spec, &params, 0.0, 10.0, &[], grid)?;
        println!(
            "grid {:>6}: p11 {:.4}  p12 {:.4}  p13 {:.4}  p22 {:.4}",
            grid.map_or("none".to_string(), |h| h.to_string()),
            p[(0, 0)],
            p[(0, 1)],
            p[(0, 2)],
            p[(1, 1)]
        );
    }

    // derivative of exp(5 Q(2)) with respect to the second 1->2 coefficient
    let q2 = build_generator(&spec, &params, 2.0, &[])?;
    let dq = dq_dtheta(&spec, &params, 2.0, &[], 1)?;
    let dp = dp_auto(&q2, &EigenDecomp::new(&q2), &dq, 5.0);
    println!("dP/dtheta_2 over 5 years from t = 2:{dp:.5}");
    println!(
        "row sums of the derivative: {:?}",
        dp.column_sum().as_slice()
    );
    Ok(())
}
