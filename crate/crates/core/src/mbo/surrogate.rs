use std::f64::consts::LN_10;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

// natural logs of [0.01, 10], [0.01, 100] and [1e-8, 1]
const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-2.0 * LN_10, LN_10);
const LOG_SIGNAL_BOUNDS: (f64, f64) = (-2.0 * LN_10, 2.0 * LN_10);
const LOG_NOISE_BOUNDS: (f64, f64) = (-8.0 * LN_10, 0.0);
const RESTARTS: usize = 6;
const ASCENT_STEPS: usize = 150;

/// Kernel hyperparameters on unit-box inputs and standardized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    fn to_log(&self) -> Vec<f64> {
        self.lengthscales
            .iter()
            .map(|l| l.ln())
            .chain([self.signal_variance.ln(), self.noise_variance.ln()])
            .collect()
    }

    fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Self {
            lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }
}

fn log_bounds(dims: usize) -> Vec<(f64, f64)> {
    let mut b = vec![LOG_LENGTHSCALE_BOUNDS; dims];
    b.push(LOG_SIGNAL_BOUNDS);
    b.push(LOG_NOISE_BOUNDS);
    b
}

/// Gaussian-process regression with a squared-exponential ARD kernel.
#[derive(Debug, Clone)]
pub struct Surrogate {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    hyper: Hyperparameters,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn sq_exp(a: &[f64], b: &[f64], lengthscales: &[f64], signal: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    signal * (-0.5 * r2).exp()
}

fn signal_kernel(inputs: &[Vec<f64>], hyper: &Hyperparameters) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = sq_exp(
                &inputs[i],
                &inputs[j],
                &hyper.lengthscales,
                hyper.signal_variance,
            );
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn standardize(targets: &[f64]) -> (f64, f64, DVector<f64>) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(targets.len(), targets.iter().map(|v| (v - mean) / scale));
    (mean, scale, y)
}

fn check_observations(inputs: &[Vec<f64>], targets: &[f64], min: usize) -> Result<usize> {
    if inputs.len() != targets.len() {
        return Err(Error::Argument(
            "inputs and targets differ in length".into(),
        ));
    }
    if inputs.len() < min {
        return Err(Error::Argument(format!(
            "surrogate needs at least {min} observations"
        )));
    }
    let d = inputs[0].len();
    if d == 0 || inputs.iter().any(|x| x.len() != d) {
        return Err(Error::Argument(
            "observations have inconsistent dimension".into(),
        ));
    }
    if inputs
        .iter()
        .flatten()
        .chain(targets)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Argument(
            "observations contain non-finite values".into(),
        ));
    }
    Ok(d)
}

/// Log marginal likelihood and its gradient w.r.t. the log hyperparameters.
fn log_likelihood(inputs: &[Vec<f64>], y: &DVector<f64>, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
    let hyper = Hyperparameters::from_log(theta);
    let n = inputs.len();
    let d = hyper.lengthscales.len();
    let kf = signal_kernel(inputs, &hyper);
    let k = &kf + DMatrix::identity(n, n) * hyper.noise_variance;
    let chol = k.cholesky()?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
        * 2.0;
    let ll =
        -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !ll.is_finite() {
        return None;
    }
    let w = &alpha * alpha.transpose() - chol.inverse();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            for (g, (l, (a, b))) in grad[..d].iter_mut().zip(
                hyper
                    .lengthscales
                    .iter()
                    .zip(inputs[i].iter().zip(&inputs[j])),
            ) {
                *g += wk * ((a - b) / l).powi(2);
            }
            grad[d] += wk;
        }
        grad[d + 1] += w[(i, i)] * hyper.noise_variance;
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Some((ll, grad))
}

fn project(theta: &mut [f64], bounds: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(bounds) {
        *t = t.clamp(*lo, *hi);
    }
}

/// Projected gradient ascent with an adaptive, backtracking step.
fn ascend(
    inputs: &[Vec<f64>],
    y: &DVector<f64>,
    start: Vec<f64>,
    bounds: &[(f64, f64)],
) -> Option<(f64, Vec<f64>)> {
    let mut theta = start;
    let (mut ll, mut grad) = log_likelihood(inputs, y, &theta)?;
    let mut step = 0.1;
    for _ in 0..ASCENT_STEPS {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let mut accepted = false;
        while step > 1e-7 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t + step * g / norm.max(1.0))
                .collect();
            project(&mut cand, bounds);
            match log_likelihood(inputs, y, &cand) {
                Some((l, g)) if l > ll => {
                    let gain = l - ll;
                    theta = cand;
                    ll = l;
                    grad = g;
                    step *= 1.5;
                    accepted = gain > 1e-10;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Some((ll, theta))
}

impl Surrogate {
    /// Condition a GP with fixed hyperparameters on the observations.
    pub fn with_hyperparameters(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        let d = check_observations(&inputs, &targets, 1)?;
        if hyper.lengthscales.len() != d {
            return Err(Error::Argument(format!(
                "expected {d} lengthscales, got {}",
                hyper.lengthscales.len()
            )));
        }
        if hyper
            .lengthscales
            .iter()
            .chain([&hyper.signal_variance, &hyper.noise_variance])
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Argument("hyperparameters must be positive".into()));
        }
        let (y_mean, y_scale, y) = standardize(&targets);
        let n = inputs.len();
        let kf = signal_kernel(&inputs, &hyper);
        let mut jitter = 0.0;
        let chol = loop {
            let k = &kf + DMatrix::identity(n, n) * (hyper.noise_variance + jitter);
            if let Some(c) = k.cholesky() {
                break c;
            }
            jitter = if jitter == 0.0 {
                1e-12 * hyper.signal_variance
            } else {
                jitter * 10.0
            };
            if jitter > hyper.signal_variance {
                return Err(Error::Training(
                    "kernel matrix is not positive definite".into(),
                ));
            }
        };
        let alpha = chol.solve(&y);
        Ok(Self {
            inputs,
            targets,
            y_mean,
            y_scale,
            hyper,
            chol,
            alpha,
        })
    }

    pub fn dims(&self) -> usize {
        self.hyper.lengthscales.len()
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Noise variance in target units.
    pub fn noise_variance(&self) -> f64 {
        self.hyper.noise_variance * self.y_scale * self.y_scale
    }

    /// Prior variance of the latent function in target units.
    pub fn prior_variance(&self) -> f64 {
        self.hyper.signal_variance * self.y_scale * self.y_scale
    }

    pub fn best_target(&self) -> f64 {
        self.targets.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Posterior mean and latent-function variance at a unit-box point.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let ks = DVector::from_iterator(
            n,
            self.inputs
                .iter()
                .map(|xi| sq_exp(x, xi, &self.hyper.lengthscales, self.hyper.signal_variance)),
        );
        let mean = self.y_mean + self.y_scale * ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.hyper.signal_variance - v.norm_squared()).max(0.0);
        (mean, var * self.y_scale * self.y_scale)
    }

    /// Expected reduction below `best` for a minimisation problem.
    pub fn expected_improvement(&self, x: &[f64], best: f64) -> f64 {
        let (mean, var) = self.predict(x);
        expected_improvement(mean, var.sqrt(), best)
    }
}

pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gap = best - mean;
    if sd < 1e-300 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (gap * cdf + sd * pdf).max(0.0)
}

/// Fit hyperparameters by maximizing the marginal likelihood from several
/// seeded starting points.
pub fn fit_surrogate(inputs: Vec<Vec<f64>>, targets: Vec<f64>, seed: u64) -> Result<Surrogate> {
    let d = check_observations(&inputs, &targets, 2)?;
    let (_, _, y) = standardize(&targets);
    let bounds = log_bounds(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![Hyperparameters {
        lengthscales: vec![0.3; d],
        signal_variance: 1.0,
        noise_variance: 1e-4,
    }
    .to_log()];
    for _ in 1..RESTARTS {
        starts.push(
            bounds
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..hi))
                .collect(),
        );
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        if let Some((ll, theta)) = ascend(&inputs, &y, start, &bounds) {
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, theta));
            }
        }
    }
    let theta = match best {
        Some((_, t)) => t,
        None => Hyperparameters {
            lengthscales: vec![0.3; d],
            signal_variance: 1.0,
            noise_variance: 1e-2,
        }
        .to_log(),
    };
    Surrogate::with_hyperparameters(inputs, targets, Hyperparameters::from_log(&theta))
}
