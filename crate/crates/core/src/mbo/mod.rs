//! Surrogate-based tuning of filterbank edges under a fixed evaluation budget.

mod space;
mod surrogate;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use space::{
    initial_design, latin_hypercube, Constraint, Dimension, SearchSpace, MODULATION_BOUNDS_HZ,
    SPECTRAL_BOUNDS_HZ,
};
pub use surrogate::{expected_improvement, fit_surrogate, Hyperparameters, Surrogate};

use crate::error::{Error, Result};
use crate::features::FilterbankConfig;
use crate::hash::mix_seed;

pub const CANDIDATE_COUNT: usize = 2048;
pub const REFINED_COUNT: usize = 5;
/// Error assigned to configurations whose evaluation failed.
pub const FAILED_ERROR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MboSettings {
    pub budget: usize,
    pub init_n: usize,
}

impl Default for MboSettings {
    fn default() -> Self {
        Self {
            budget: 80,
            init_n: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: usize,
    pub point: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MboResult {
    pub best_point: Vec<f64>,
    pub best_error: f64,
    pub history: Vec<Evaluation>,
    pub budget_used: usize,
}

impl MboResult {
    pub fn best_config(
        &self,
        space: &SearchSpace,
        filter_order: usize,
    ) -> Result<FilterbankConfig> {
        space.to_filterbank(&self.best_point, filter_order)
    }

    /// Best error seen after each evaluation.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::INFINITY, |best, e| {
                *best = best.min(e.error);
                Some(*best)
            })
            .collect()
    }

    /// CSV with columns `iteration`, one per dimension, `error`.
    pub fn write_history_csv(&self, space: &SearchSpace, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iteration".to_string()];
        header.extend(space.dims.iter().map(|d| d.name.clone()));
        header.push("error".into());
        w.write_record(&header)?;
        for e in &self.history {
            let mut row = vec![e.iteration.to_string()];
            row.extend(e.point.iter().map(|v| v.to_string()));
            row.push(e.error.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ei_at(model: &Surrogate, space: &SearchSpace, unit: &[f64], best: f64) -> (f64, Vec<f64>) {
    let repaired = space.repair(&space.from_unit(unit));
    let u = space.to_unit(&repaired);
    (model.expected_improvement(&u, best), u)
}

fn score_all(
    model: &Surrogate,
    space: &SearchSpace,
    cands: &[Vec<f64>],
    best: f64,
) -> Vec<(f64, Vec<f64>)> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cands
            .par_iter()
            .map(|c| ei_at(model, space, c, best))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cands.iter().map(|c| ei_at(model, space, c, best)).collect()
    }
}

/// Coordinate pattern search on EI starting from `start`.
fn refine(
    model: &Surrogate,
    space: &SearchSpace,
    start: (f64, Vec<f64>),
    best: f64,
) -> (f64, Vec<f64>) {
    let (mut val, mut x) = start;
    let mut step = 0.05;
    let mut evals = 0;
    while step > 1e-3 && evals < 400 {
        let mut moved = false;
        for d in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut cand = x.clone();
                cand[d] = (cand[d] + dir * step).clamp(0.0, 1.0);
                let (v, u) = ei_at(model, space, &cand, best);
                evals += 1;
                if v > val {
                    val = v;
                    x = u;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (val, x)
}

/// Maximize expected improvement over random candidates, then polish the
/// best few by pattern search. Returns a repaired point in search-space units.
pub fn propose_next(model: &Surrogate, space: &SearchSpace, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = space.len();
    let cands: Vec<Vec<f64>> = (0..CANDIDATE_COUNT)
        .map(|_| (0..dims).map(|_| rng.random::<f64>()).collect())
        .collect();
    let best = model.best_target();
    let mut scored = score_all(model, space, &cands, best);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let winner = scored
        .into_iter()
        .take(REFINED_COUNT)
        .map(|s| refine(model, space, s, best))
        .fold(None::<(f64, Vec<f64>)>, |acc, s| match acc {
            Some(a) if a.0 >= s.0 => Some(a),
            _ => Some(s),
        })
        .expect("candidate set is non-empty");
    space.repair(&space.from_unit(&winner.1))
}

/// Run the initial design, then fit/propose/evaluate until the budget is used.
pub fn optimize<F>(
    mut objective: F,
    space: &SearchSpace,
    budget: usize,
    init_n: usize,
    seed: u64,
) -> Result<MboResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if init_n < 2 || budget < init_n {
        return Err(Error::Argument(format!(
            "need budget >= init_n >= 2, got budget {budget}, init_n {init_n}"
        )));
    }
    let mut eval = |x: &[f64]| match objective(x) {
        Ok(v) if v.is_finite() => v,
        _ => FAILED_ERROR,
    };
    let mut history = Vec::with_capacity(budget);
    for point in initial_design(space, init_n, mix_seed(seed, 0))? {
        let error = eval(&point);
        history.push(Evaluation {
            iteration: history.len(),
            point,
            error,
        });
    }
    while history.len() < budget {
        let it = history.len() as u64;
        let inputs: Vec<Vec<f64>> = history.iter().map(|e| space.to_unit(&e.point)).collect();
        let targets: Vec<f64> = history.iter().map(|e| e.error).collect();
        let model = fit_surrogate(inputs, targets, mix_seed(seed, 1 << 32 | it))?;
        let point = propose_next(&model, space, mix_seed(seed, 2 << 32 | it));
        let error = eval(&point);
        history.push(Evaluation {
            iteration: history.len(),
            point,
            error,
        });
    }
    let best = history
        .iter()
        .min_by(|a, b| a.error.total_cmp(&b.error))
        .expect("budget is at least two");
    Ok(MboResult {
        best_point: best.point.clone(),
        best_error: best.error,
        budget_used: history.len(),
        history,
    })
}

/// Two-dimensional Branin function on [-5, 10] x [0, 15].
pub fn branin(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
    let c = 5.0 / std::f64::consts::PI;
    let t = 1.0 / (8.0 * std::f64::consts::PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn branin_grid_min() -> f64 {
        let n = 1501;
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let x1 = -5.0 + 15.0 * i as f64 / (n - 1) as f64;
                let x2 = 15.0 * j as f64 / (n - 1) as f64;
                best = best.min(branin(&[x1, x2]));
            }
        }
        best
    }

    #[test]
    fn branin_converges_and_is_reproducible() {
        let space = SearchSpace::boxed(&[(-5.0, 10.0), (0.0, 15.0)]).unwrap();
        let f = |x: &[f64]| Ok(branin(x));
        let a = optimize(f, &space, 40, 8, 11).unwrap();
        let b = optimize(f, &space, 40, 8, 11).unwrap();
        assert_eq!(a, b);
        let target = branin_grid_min();
        assert!((target - 0.397887).abs() < 1e-3);
        assert!(
            a.best_error <= target * 1.05,
            "{} vs {target}",
            a.best_error
        );
        assert!(a.incumbent_trace().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn budget_equal_to_init_returns_design_best() {
        let space = SearchSpace::boxed(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let r = optimize(|x: &[f64]| Ok(x[0] + x[1]), &space, 6, 6, 2).unwrap();
        let design = initial_design(&space, 6, mix_seed(2, 0)).unwrap();
        let best = design
            .iter()
            .map(|x| x[0] + x[1])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.budget_used, 6);
        assert_eq!(r.best_error, best);
    }

    #[test]
    fn failures_score_worst_case() {
        let space = SearchSpace::boxed(&[(0.0, 1.0)]).unwrap();
        let mut n = 0;
        let r = optimize(
            |x: &[f64]| {
                n += 1;
                if n % 3 == 0 {
                    Err(Error::Training("boom".into()))
                } else {
                    Ok(x[0] * 0.5)
                }
            },
            &space,
            9,
            3,
            0,
        )
        .unwrap();
        assert_eq!(r.history[2].error, FAILED_ERROR);
        assert!(r.best_error < FAILED_ERROR);
    }

    #[test]
    fn bad_budgets() {
        let space = SearchSpace::boxed(&[(0.0, 1.0)]).unwrap();
        assert!(optimize(|_: &[f64]| Ok(0.0), &space, 3, 4, 0).is_err());
        assert!(optimize(|_: &[f64]| Ok(0.0), &space, 3, 1, 0).is_err());
    }

    #[test]
    fn one_dimensional_quadratic_finds_minimum() {
        let space = SearchSpace::boxed(&[(0.0, 1.0)]).unwrap();
        let f = |x: f64| (x - 0.3).powi(2);
        let mut xs: Vec<f64> = vec![0.0, 0.1, 0.5, 0.7, 0.85, 1.0];
        for round in 0..10 {
            let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            let model = fit_surrogate(xs.iter().map(|&x| vec![x]).collect(), ys, round).unwrap();
            let next = propose_next(&model, &space, 100 + round);
            xs.push(next[0]);
        }
        let best = xs
            .iter()
            .copied()
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((best - 0.3).abs() < 0.1, "{best}");
        assert!((xs.last().unwrap() - 0.3).abs() < 0.1);
    }

    #[test]
    fn single_observation_proposal_explores() {
        let space = SearchSpace::boxed(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let hyper = Hyperparameters {
            lengthscales: vec![0.2, 0.2],
            signal_variance: 1.0,
            noise_variance: 1e-8,
        };
        let model =
            Surrogate::with_hyperparameters(vec![vec![0.4, 0.6]], vec![0.5], hyper).unwrap();
        let next = propose_next(&model, &space, 9);
        assert!((next[0] - 0.4).hypot(next[1] - 0.6) > 1e-3);
    }

    #[test]
    fn filterbank_proposals_are_feasible_and_history_written() {
        let space = SearchSpace::filterbank(3, 3);
        let target = SearchSpace::from_filterbank(&FilterbankConfig::default());
        let unit_target = space.to_unit(&target);
        let sphere = |x: &[f64]| {
            Ok(space
                .to_unit(x)
                .iter()
                .zip(&unit_target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
        };
        let r = optimize(sphere, &space, 30, 24, 4).unwrap();
        let init_best = r.history[..24]
            .iter()
            .map(|e| e.error)
            .fold(f64::INFINITY, f64::min);
        assert!(r.best_error <= init_best);
        for e in &r.history {
            let cfg = space.to_filterbank(&e.point, 4).unwrap();
            assert_eq!(space.repair(&e.point), e.point);
            assert!(cfg.validate(20_000).is_ok());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.csv");
        r.write_history_csv(&space, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 14);
    }
}
