//! Interval-censored illness-death panel data.
//!
//! Event laws on the time-since-baseline clock: 1->2 log-normal, 1->3
//! exponential, 2->3 Gompertz (`h(t) = rate * exp(shape * t)`). A path that
//! enters state 2 at time `u` draws its death time from the Gompertz law
//! conditioned on exceeding `u`. Every draw is an inverse-CDF transform of one
//! uniform variate.
//!
//! Individuals are visited every `followup_interval` years until
//! `study_length`; deaths are recorded at their exact time.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::likelihood::{Individual, Observation, PanelDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("invalid scenario: {field} {reason}")]
    Invalid { field: &'static str, reason: String },
}

pub const HEALTHY: usize = 0;
pub const ILL: usize = 1;
pub const DEAD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Log-normal 1->2 event time: mean of log time.
    pub lognormal_mu: f64,
    /// Log-normal 1->2 event time: sd of log time.
    pub lognormal_sigma: f64,
    /// Exponential 1->3 rate.
    pub exp_rate: f64,
    pub gompertz_shape: f64,
    pub gompertz_rate: f64,
    pub study_length: f64,
    pub followup_interval: f64,
    pub n_individuals: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            lognormal_mu: 1.25,
            lognormal_sigma: 1.0,
            exp_rate: (-2.5f64).exp(),
            gompertz_shape: 0.1,
            gompertz_rate: (-2.5f64).exp(),
            study_length: 15.0,
            followup_interval: 1.0,
            n_individuals: 200,
            seed: 1,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimulateError::Invalid {
                    field,
                    reason: format!("must be positive and finite, got {v}"),
                })
            }
        };
        positive("lognormal_sigma", self.lognormal_sigma)?;
        positive("exp_rate", self.exp_rate)?;
        positive("gompertz_rate", self.gompertz_rate)?;
        positive("study_length", self.study_length)?;
        positive("followup_interval", self.followup_interval)?;
        if !self.lognormal_mu.is_finite() || !self.gompertz_shape.is_finite() {
            return Err(SimulateError::Invalid {
                field: "lognormal_mu/gompertz_shape",
                reason: "must be finite".into(),
            });
        }
        if self.followup_interval > self.study_length {
            return Err(SimulateError::Invalid {
                field: "followup_interval",
                reason: "exceeds study_length, leaving a single visit".into(),
            });
        }
        if self.n_individuals == 0 {
            return Err(SimulateError::Invalid {
                field: "n_individuals",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Scheduled visit times `0, h, 2h, ...` not beyond the study end.
    pub fn visit_times(&self) -> Vec<f64> {
        let n = (self.study_length / self.followup_interval + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.followup_interval).collect()
    }

    fn gompertz_cumhaz(&self, t: f64) -> f64 {
        if self.gompertz_shape == 0.0 {
            self.gompertz_rate * t
        } else {
            self.gompertz_rate / self.gompertz_shape * (self.gompertz_shape * t).exp_m1()
        }
    }

    /// Death time from state 2 given alive at `u`, from uniform `v` in (0, 1).
    pub fn gompertz_conditional(&self, u: f64, v: f64) -> f64 {
        let target = self.gompertz_cumhaz(u) - v.ln();
        if self.gompertz_shape == 0.0 {
            return target / self.gompertz_rate;
        }
        let arg = self.gompertz_shape * target / self.gompertz_rate;
        if arg <= -1.0 {
            // negative shape: the event never happens
            return f64::INFINITY;
        }
        arg.ln_1p() / self.gompertz_shape
    }

    /// 1->2 event time given no event by `u`, from uniform `v` in (0, 1).
    pub fn lognormal_conditional(&self, u: f64, v: f64) -> f64 {
        let std = Normal::standard();
        let surv_u = if u > 0.0 {
            std.cdf(-(u.ln() - self.lognormal_mu) / self.lognormal_sigma)
        } else {
            1.0
        };
        // S(T) = v S(u)  with  S(t) = Phi(-(ln t - mu) / sigma)
        let z = std.inverse_cdf(v * surv_u);
        (self.lognormal_mu - self.lognormal_sigma * z).exp()
    }

    /// 1->3 event time given no event by `u`.
    pub fn exponential_conditional(&self, u: f64, v: f64) -> f64 {
        u - v.ln() / self.exp_rate
    }

    /// Survival function of the unconditional 1->2 time.
    pub fn lognormal_survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        Normal::standard().cdf(-(t.ln() - self.lognormal_mu) / self.lognormal_sigma)
    }

    pub fn gompertz_survival(&self, t: f64) -> f64 {
        (-self.gompertz_cumhaz(t)).exp()
    }
}

/// Uniform draw strictly inside (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Per-stream generator: reproducible regardless of scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Visited states with their entry times, starting with the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub events: Vec<(usize, f64)>,
}

impl Trajectory {
    pub fn state_at(&self, t: f64) -> usize {
        self.events
            .iter()
            .take_while(|(_, entry)| *entry <= t)
            .last()
            .map(|(s, _)| *s)
            .unwrap_or(self.events[0].0)
    }

    pub fn death_time(&self) -> Option<f64> {
        self.events
            .iter()
            .find(|(s, _)| *s == DEAD)
            .map(|(_, t)| *t)
    }
}

/// Path from state 1 at time 0 until death or the study end.
pub fn sample_path(scenario: &Scenario, rng: &mut impl Rng) -> Trajectory {
    sample_path_from(scenario, HEALTHY, 0.0, scenario.study_length, rng)
}

/// Path starting in `state` at time `start`, stopped at death or `horizon`.
pub fn sample_path_from(
    scenario: &Scenario,
    state: usize,
    start: f64,
    horizon: f64,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut events = vec![(state, start)];
    let mut current = state;
    let mut now = start;
    loop {
        let (next, at) = match current {
            HEALTHY => {
                let t12 = scenario.lognormal_conditional(now, open_unit(rng));
                let t13 = scenario.exponential_conditional(now, open_unit(rng));
                if t12 < t13 {
                    (ILL, t12)
                } else {
                    (DEAD, t13)
                }
            }
            ILL => (DEAD, scenario.gompertz_conditional(now, open_unit(rng))),
            _ => break,
        };
        if at > horizon {
            break;
        }
        events.push((next, at));
        current = next;
        now = at;
    }
    Trajectory { events }
}

/// Panel record of one path: living state at each scheduled visit before
/// death, then the exact death time (if within the study).
pub fn observe(id: &str, trajectory: &Trajectory, scenario: &Scenario) -> Individual {
    let death = trajectory
        .death_time()
        .filter(|d| *d <= scenario.study_length);
    let mut observations: Vec<Observation> = scenario
        .visit_times()
        .into_iter()
        .filter(|v| death.is_none_or(|d| *v < d))
        .map(|v| Observation {
            time: v,
            state: trajectory.state_at(v),
            covariates: vec![],
        })
        .collect();
    if let Some(d) = death {
        observations.push(Observation {
            time: d,
            state: DEAD,
            covariates: vec![],
        });
    }
    Individual {
        id: id.to_string(),
        observations,
        death_exact: death.is_some(),
    }
}

/// `n_individuals` independent paths, individual `i` drawn from stream `i`.
pub fn simulate_dataset(scenario: &Scenario) -> Result<PanelDataset, SimulateError> {
    scenario.validate()?;
    let people: Vec<Individual> = (0..scenario.n_individuals)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(scenario.seed, i as u64);
            let path = sample_path(scenario, &mut rng);
            observe(&(i + 1).to_string(), &path, scenario)
        })
        .collect();
    Ok(PanelDataset::new(people, 3, 0).expect("simulated records are valid"))
}

/// Default number of Monte-Carlo paths per starting state.
pub const TRUTH_PATHS: usize = 1_000_000;

/// Monte-Carlo `P(t0, t1)` of the generating process: `n_paths` paths start in
/// each living state at `t0` and the state at `t1` is tallied.
pub fn true_transition_probabilities(
    scenario: &Scenario,
    t0: f64,
    t1: f64,
    n_paths: usize,
) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(3, 3);
    p[(DEAD, DEAD)] = 1.0;
    if t1 <= t0 {
        return DMatrix::identity(3, 3);
    }
    const CHUNK: usize = 10_000;
    for start in [HEALTHY, ILL] {
        let n_chunks = n_paths.div_ceil(CHUNK);
        let counts: Vec<[usize; 3]> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                // streams disjoint from those used by simulate_dataset
                let mut rng = stream_rng(
                    scenario.seed ^ 0x7472_7574_6800_0000,
                    ((start as u64) << 40) | c as u64,
                );
                let mut tally = [0usize; 3];
                let n = CHUNK.min(n_paths - c * CHUNK);
                for _ in 0..n {
                    let path = sample_path_from(scenario, start, t0, t1, &mut rng);
                    tally[path.state_at(t1)] += 1;
                }
                tally
            })
            .collect();
        for tally in counts {
            for s in 0..3 {
                p[(start, s)] += tally[s] as f64;
            }
        }
        for s in 0..3 {
            p[(start, s)] /= n_paths as f64;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gompertz_draws_exceed_conditioning_time() {
        let sc = Scenario::default();
        let mut rng = stream_rng(3, 0);
        for &u in &[0.0, 0.5, 2.0, 9.0, 14.5] {
            for _ in 0..2000 {
                assert!(sc.gompertz_conditional(u, open_unit(&mut rng)) > u);
            }
        }
    }

    #[test]
    fn lognormal_median() {
        let sc = Scenario::default();
        let mut rng = stream_rng(11, 0);
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| sc.lognormal_conditional(0.0, open_unit(&mut rng)))
            .collect();
        draws.sort_by(f64::total_cmp);
        let med = draws[50_000];
        assert!((med / 1.25f64.exp() - 1.0).abs() < 0.02, "median {med}");
    }

    #[test]
    fn observe_schedules() {
        let sc = Scenario::default();
        let death = Trajectory {
            events: vec![(HEALTHY, 0.0), (DEAD, 2.4)],
        };
        let rec = observe("1", &death, &sc);
        let times: Vec<f64> = rec.observations.iter().map(|o| o.time).collect();
        assert_eq!(times, vec![0.0, 1.0, 2.0, 2.4]);
        assert!(rec.death_exact);

        let ill = Trajectory {
            events: vec![(HEALTHY, 0.0), (ILL, 3.5)],
        };
        let rec = observe("2", &ill, &sc);
        assert_eq!(rec.observations[3].state, HEALTHY);
        assert_eq!(rec.observations[4].state, ILL);
        assert_eq!(rec.observations[4].time, 4.0);

        let none = Trajectory {
            events: vec![(HEALTHY, 0.0)],
        };
        let rec = observe("3", &none, &sc);
        assert_eq!(rec.observations.len(), 16);
        assert!(rec.observations.iter().all(|o| o.state == HEALTHY));
        assert!(!rec.death_exact);
    }

    #[test]
    fn dataset_is_reproducible_and_progressive() {
        let sc = Scenario {
            n_individuals: 50,
            seed: 9,
            ..Scenario::default()
        };
        let a = simulate_dataset(&sc).unwrap();
        let b = simulate_dataset(&sc).unwrap();
        assert_eq!(a, b);
        let table = a.pair_table();
        assert_eq!(table[ILL][HEALTHY], 0);
        assert!(a.individuals().iter().all(|i| i.observations.len() <= 16));
        let bad = Scenario {
            n_individuals: 0,
            ..Scenario::default()
        };
        assert!(simulate_dataset(&bad).is_err());
    }

    #[test]
    fn truth_identity_at_zero_length() {
        let sc = Scenario::default();
        assert_eq!(
            true_transition_probabilities(&sc, 3.0, 3.0, 10),
            DMatrix::identity(3, 3)
        );
    }
}
