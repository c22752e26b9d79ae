//! The cubic regression spline basis: values at the knots are the
//! coefficients, so `B(t)` interpolates and sums to one.
//!
//! ```text
//! cargo run --example spline_basis
//! ```

use msmspline::splinebasis::{place_knots, BasisSpec, KnotVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let times: Vec<f64> = (0..=60).map(|i| (i as f64 * 0.25).powf(1.2)).collect();
    let knots = place_knots(&times, 6, "example")?;
    println!("knots at quantiles: {:.3?}", knots.as_slice());

    let basis = BasisSpec::new(knots.clone());
    println!(
        "\n     t  {}  sum",
        (1..=basis.dim())
            .map(|k| format!("  B{k}  "))
            .collect::<String>()
    );
    for i in 0..=8 {
        let t = knots.first() + (knots.last() - knots.first()) * i as f64 / 8.0;
        let b = basis.eval(t);
        let cells: String = b.iter().map(|v| format!("{v:7.3}")).collect();
        println!("{t:6.2} {cells} {:6.3}", b.sum());
    }

    // the penalty measures integrated squared curvature and ignores lines
    let block = basis.penalty_matrix();
    let line: Vec<f64> = knots.as_slice().iter().map(|t| 0.5 - 0.2 * t).collect();
    let bump: Vec<f64> = knots
        .as_slice()
        .iter()
        .map(|t| (-(t - 5.0).powi(2)).exp())
        .collect();
    println!(
        "\npenalty of a straight line: {:.2e}",
        block.quad_form(&line)
    );
    println!("penalty of a bump:          {:.4}", block.quad_form(&bump));

    let beyond = BasisSpec::new(KnotVector::new(vec![0.0, 1.0, 2.0])?);
    println!(
        "linear continuation past the last knot: B(3) = {:.3?}",
        beyond.eval(3.0).as_slice()
    );
    Ok(())
}
