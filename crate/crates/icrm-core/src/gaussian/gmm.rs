//! Two-component Gaussian mixture fits on unlabeled context.
//!
//! EM with k-means++-style seeding, a diagonal covariance floor, restart
//! selection by final log-likelihood, and an optional diagonal-only
//! constraint on the M step. Restarts run concurrently; the winner is the
//! highest likelihood with ties broken by the lowest restart index, so the
//! result does not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// EM hyperparameters. Defaults: 5 restarts, 500 iterations, `1e-8`
/// log-likelihood tolerance, `1e-6` covariance floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Added to every covariance diagonal at each M step.
    pub cov_floor: f64,
    /// Zero the off-diagonal entries in the M step.
    pub diagonal_only: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 500,
            tol: 1e-8,
            cov_floor: 1e-6,
            diagonal_only: false,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// A fitted two-component mixture.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: [f64; 2],
    pub means: [DVector<f64>; 2],
    pub covs: [DMatrix<f64>; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the context carries no spread (all points identical), in
    /// which case the two components collapse onto the same atom.
    pub degenerate: bool,
    /// Log-likelihood after each iteration of the winning restart;
    /// non-decreasing up to the covariance-floor perturbation.
    pub trace: Vec<f64>,
}

/// Fit a two-component Gaussian mixture to the unlabeled `context` by EM,
/// maximizing the likelihood of the observed inputs.
///
/// Requires at least four points. All-identical points produce a flagged
/// degenerate fit rather than an error.
pub fn fit_gmm_em(context: &[Vec<f64>], config: &EmConfig) -> Result<GmmFit> {
    if context.len() < 4 {
        return Err(Error::ContextTooShort(context.len()));
    }
    let d = context[0].len();
    let points: Vec<DVector<f64>> = context
        .iter()
        .map(|x| DVector::from_row_slice(x))
        .collect();
    let degenerate = points.iter().all(|p| p == &points[0]);

    let fits: Vec<GmmFit> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            let seed = rng::derive_seed(config.seed, &[restart as u64]);
            run_single(&points, d, config, seed)
        })
        .collect();
    let mut best: Option<GmmFit> = None;
    for fit in fits {
        let better = match &best {
            None => true,
            Some(b) => fit.log_likelihood > b.log_likelihood,
        };
        if better {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one restart");
    fit.degenerate = degenerate;
    Ok(fit)
}

fn run_single(points: &[DVector<f64>], d: usize, config: &EmConfig, seed: u64) -> GmmFit {
    let n = points.len();
    let mut rng = rng::stream(seed);

    // k-means++-style seeding: first mean uniform, second proportional to
    // squared distance from the first.
    let first = points[rng.random_range(0..n)].clone();
    let dist_sq: Vec<f64> = points.iter().map(|p| (p - &first).norm_squared()).collect();
    let total: f64 = dist_sq.iter().sum();
    let second = if total > 0.0 {
        let mut u: f64 = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist_sq.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        points[pick].clone()
    } else {
        first.clone()
    };

    let scatter = pooled_scatter(points, d, config);
    let mut weights = [0.5f64, 0.5];
    let mut means = [first, second];
    let mut covs = [scatter.clone(), scatter];

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut responsibilities = vec![[0.0f64; 2]; n];

    for iter in 0..config.max_iter {
        iterations = iter + 1;

        // E step in log space.
        let comp: Vec<Gaussian> = (0..2)
            .map(|k| Gaussian::new(&means[k], &covs[k]))
            .collect();
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let l0 = weights[0].ln() + comp[0].log_density(p);
            let l1 = weights[1].ln() + comp[1].log_density(p);
            let m = l0.max(l1);
            let s = (l0 - m).exp() + (l1 - m).exp();
            ll += m + s.ln();
            responsibilities[i] = [(l0 - m).exp() / s, (l1 - m).exp() / s];
        }
        trace.push(ll);
        if iter > 0 {
            let gain = ll - trace[iter - 1];
            if gain.abs() < config.tol {
                converged = true;
                break;
            }
        }

        // M step with floored covariances.
        for k in 0..2 {
            let nk: f64 = responsibilities.iter().map(|r| r[k]).sum();
            weights[k] = nk / n as f64;
            let mut mean = DVector::zeros(d);
            for (i, p) in points.iter().enumerate() {
                mean += p * responsibilities[i][k];
            }
            mean /= nk.max(f64::MIN_POSITIVE);
            let mut cov = DMatrix::zeros(d, d);
            for (i, p) in points.iter().enumerate() {
                let c = p - &mean;
                cov += (&c * c.transpose()) * responsibilities[i][k];
            }
            cov /= nk.max(f64::MIN_POSITIVE);
            if config.diagonal_only {
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            cov[(i, j)] = 0.0;
                        }
                    }
                }
            }
            for i in 0..d {
                cov[(i, i)] += config.cov_floor;
            }
            means[k] = mean;
            covs[k] = cov;
        }
    }

    GmmFit {
        weights,
        means,
        covs,
        log_likelihood: *trace.last().unwrap_or(&f64::NEG_INFINITY),
        iterations,
        converged,
        degenerate: false,
        trace,
    }
}

fn pooled_scatter(points: &[DVector<f64>], d: usize, config: &EmConfig) -> DMatrix<f64> {
    let n = points.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov /= n;
    if config.diagonal_only {
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    cov[(i, j)] = 0.0;
                }
            }
        }
    }
    for i in 0..d {
        cov[(i, i)] += config.cov_floor.max(1e-9);
    }
    cov
}

/// Cached Cholesky view of one Gaussian component.
struct Gaussian {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let mut cov = cov.clone();
        // The floor keeps covariances SPD in ordinary runs; a widening jitter
        // retry covers pathological responsibility collapse.
        let mut jitter = 0.0;
        let chol = loop {
            match cov.clone().cholesky() {
                Some(c) => break c,
                None => {
                    jitter = if jitter == 0.0 { 1e-9 } else { jitter * 10.0 };
                    for i in 0..d {
                        cov[(i, i)] += jitter;
                    }
                }
            }
        };
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Self { mean: mean.clone(), chol_l: chol.l(), log_norm }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let centered = x - &self.mean;
        let solved = self
            .chol_l
            .solve_lower_triangular(&centered)
            .expect("Cholesky factor is nonsingular");
        self.log_norm - 0.5 * solved.norm_squared()
    }
}
