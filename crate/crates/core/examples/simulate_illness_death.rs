//! Simulated illness-death panel data: log-normal onset, exponential death
//! without illness and Gompertz death after illness, observed annually.
//!
//! ```text
//! cargo run --release --example simulate_illness_death -- [N] [seed]
//! ```

use msmspline::simulate::{simulate_dataset, true_transition_probabilities, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n = args.next().map(|a| a.parse()).transpose()?.unwrap_or(200);
    let seed = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1);
    let scenario = Scenario {
        n_individuals: n,
        seed,
        ..Scenario::default()
    };
    let data = simulate_dataset(&scenario)?;
    let visits: Vec<usize> = data
        .individuals()
        .iter()
        .map(|i| i.observations.len())
        .collect();
    println!(
        "{} individuals, {} rows, {} to {} observations each",
        data.len(),
        data.n_rows(),
        visits.iter().min().unwrap(),
        visits.iter().max().unwrap()
    );
    println!("successive state pairs (from row to column):");
    for (r, row) in data.pair_table().iter().enumerate() {
        println!("  {}: {:?}", r + 1, row);
    }

    let first = &data.individuals()[0];
    println!("individual {}:", first.id);
    for o in &first.observations {
        println!("  t = {:>8.4}  state {}", o.time, o.state + 1);
    }

    let truth = true_transition_probabilities(&scenario, 0.0, 10.0, 200_000);
    println!("Monte-Carlo P(0, 10) of the generating process:{truth:.3}");
    Ok(())
}
