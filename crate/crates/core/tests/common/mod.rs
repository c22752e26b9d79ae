#![allow(dead_code)]

use msmspline::likelihood::{Individual, LikelihoodOptions, Observation, PanelDataset};
use msmspline::markov::{
    interval_prob, Baseline, ModelParams, ModelSpec, Transition, TransitionStructure,
};
use msmspline::splinebasis::KnotVector;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random model with at most `max_states` states. The last state is absorbing
/// and reachable from state 1; living states may move both ways.
pub fn random_spec(rng: &mut impl Rng, max_states: usize) -> ModelSpec {
    let d = rng.random_range(2..=max_states);
    let death = d - 1;
    let mut trs = Vec::new();
    for r in 0..death {
        for s in 0..d {
            if s != r && (s == death && r == 0 || rng.random_bool(0.5)) {
                trs.push(Transition::new(r, s));
            }
        }
    }
    let n_cov = rng.random_range(0..=2);
    let names = (0..n_cov).map(|m| format!("x{m}")).collect();
    let structure = TransitionStructure::new(d, trs, names).unwrap();
    let baselines = structure
        .transitions()
        .iter()
        .map(|_| {
            if rng.random_bool(0.6) {
                let k = rng.random_range(3..=6);
                let mut knots: Vec<f64> = (0..k - 2).map(|_| rng.random_range(0.3..5.7)).collect();
                knots.push(0.0);
                knots.push(6.0);
                knots.sort_by(f64::total_cmp);
                knots.dedup_by(|a, b| (*a - *b).abs() < 0.05);
                while knots.len() < 3 {
                    knots.insert(1, 3.0);
                    knots.dedup_by(|a, b| (*a - *b).abs() < 0.05);
                }
                Baseline::spline(KnotVector::new(knots).unwrap())
            } else {
                Baseline::Constant
            }
        })
        .collect();
    let share = n_cov > 0 && rng.random_bool(0.5);
    ModelSpec::new(structure, baselines, share).unwrap()
}

pub fn random_params(rng: &mut impl Rng, spec: &ModelSpec) -> ModelParams {
    let mut theta = DVector::zeros(spec.n_params());
    for k in 0..spec.n_params() {
        theta[k] = match spec.role(k) {
            msmspline::markov::ParamRole::Alpha { .. } => -1.5 + 0.4 * normal(rng),
            _ => 0.3 * normal(rng),
        };
    }
    ModelParams { theta }
}

/// Panel data drawn from the model itself, so every observed pair has positive
/// probability.
pub fn random_data(
    rng: &mut impl Rng,
    spec: &ModelSpec,
    params: &ModelParams,
    n: usize,
    options: &LikelihoodOptions,
) -> PanelDataset {
    let d = spec.n_states();
    let death = d - 1;
    let p = spec.structure().n_covariates();
    let people = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
            let mut state = rng.random_range(0..death);
            let mut t = rng.random_range(0.0..1.0);
            let visits = rng.random_range(2..=6);
            let mut observations = vec![Observation {
                time: t,
                state,
                covariates: x.clone(),
            }];
            for _ in 1..visits {
                let t1 = t + rng.random_range(0.2..1.5);
                let pm = interval_prob(spec, params, t, t1, &x, options.grid_width).unwrap();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = d - 1;
                for s in 0..d {
                    acc += pm[(state, s)];
                    if u < acc {
                        next = s;
                        break;
                    }
                }
                state = next;
                t = t1;
                observations.push(Observation {
                    time: t,
                    state,
                    covariates: x.clone(),
                });
                if state == death {
                    break;
                }
            }
            Individual {
                id: (i + 1).to_string(),
                observations,
                death_exact: rng.random_bool(0.5),
            }
        })
        .collect();
    PanelDataset::new(people, d, p).unwrap()
}

pub struct Instance {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub data: PanelDataset,
    pub options: LikelihoodOptions,
}

pub fn random_instance(rng: &mut impl Rng, max_states: usize, max_n: usize) -> Instance {
    let spec = random_spec(rng, max_states);
    let params = random_params(rng, &spec);
    let options = LikelihoodOptions {
        grid_width: rng.random_bool(0.3).then_some(0.4),
    };
    let n = rng.random_range(5..=max_n);
    let data = random_data(rng, &spec, &params, n, &options);
    Instance {
        spec,
        params,
        data,
        options,
    }
}

/// Two-state alive/dead data with Weibull deaths, annual visits for ten years
/// and exact death times.
pub fn weibull_two_state(seed: u64, n: usize, shape: f64, scale: f64) -> PanelDataset {
    let mut rng = rng(seed);
    let people = (0..n)
        .map(|i| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let death = scale * (-u.ln()).powf(1.0 / shape);
            let mut observations = Vec::new();
            for v in 0..=10 {
                let t = v as f64;
                if t >= death {
                    break;
                }
                observations.push(Observation {
                    time: t,
                    state: 0,
                    covariates: vec![],
                });
            }
            let exact = death <= 10.0;
            if exact {
                observations.push(Observation {
                    time: death,
                    state: 1,
                    covariates: vec![],
                });
            }
            Individual {
                id: (i + 1).to_string(),
                observations,
                death_exact: exact,
            }
        })
        .filter(|ind| ind.observations.len() >= 2)
        .collect();
    PanelDataset::new(people, 2, 0).unwrap()
}

/// Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_statistic(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// KS distance when infinite entries mark draws censored beyond the range:
/// only the finite part of the empirical CDF is compared.
pub fn ks_censored(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .take_while(|x| x.is_finite())
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
