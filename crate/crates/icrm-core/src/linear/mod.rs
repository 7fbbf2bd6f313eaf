//! Pooled least squares versus regression on the context-extended feature
//! space, in closed form and empirically.
//!
//! The data generating process per environment `e`: centered noise
//! `(x̄₁, x̄₂)` with a fixed within-environment covariance, features
//! `x₁ = x̄₁` and `x₂ = μ₂ᵉ + x̄₂` where `μ₂ᵉ` is the environment mean of
//! `x₂`, and the target `y = α x₁ + β μ₂ᵉ + ε`. Pooling environments and
//! regressing `y` on `(x₁, x₂)` through the origin biases the `x₁`
//! coefficient whenever `β ≠ 0` and the within-environment covariance
//! `σ₁₂ ≠ 0`; regressing on the extended features `(x₁, x₂, μ₁ᵉ, μ₂ᵉ)`
//! recovers `(α, 0, 0, β)`. Expected test error as a function of the
//! variance of `x₁` is affine with slope `(α − α′)²` for the pooled fit and
//! flat for the extended fit.

pub mod nonlinear;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Population description of the linear multi-environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEnvSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Within-environment variance of `x₁` (same in every environment).
    pub sigma1_sq: f64,
    /// Within-environment variance of the centered part of `x₂`.
    pub sigma2_sq: f64,
    /// Within-environment covariance of `(x₁, x̄₂)`.
    pub sigma12: f64,
    /// Finite distribution of the environment mean `μ₂ᵉ`: `(value, prob)`.
    pub mu2_dist: Vec<(f64, f64)>,
    /// Variance of the independent noise `ε`.
    pub noise_var: f64,
}

impl LinearEnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma1_sq <= 0.0
            || self.sigma2_sq <= 0.0
            || self.sigma1_sq * self.sigma2_sq - self.sigma12 * self.sigma12 <= 0.0
        {
            return Err(Error::InvalidEnvParams(
                "within-environment covariance of (x1, x2) is not SPD".into(),
            ));
        }
        if self.noise_var < 0.0 {
            return Err(Error::InvalidEnvParams("negative noise variance".into()));
        }
        if self.mu2_dist.is_empty() {
            return Err(Error::InvalidEnvParams("empty mu2 distribution".into()));
        }
        let total: f64 = self.mu2_dist.iter().map(|(_, p)| p).sum();
        if self.mu2_dist.iter().any(|&(_, p)| p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidEnvParams(format!(
                "mu2 distribution sums to {total}"
            )));
        }
        Ok(())
    }

    /// `δ = E[(μ₂ᵉ)²]` across environments.
    pub fn delta(&self) -> f64 {
        self.mu2_dist.iter().map(|&(v, p)| p * v * v).sum()
    }

    /// Reference instance used throughout: `α = β = 1`, unit variances,
    /// `σ₁₂ = 0.5`, and `μ₂ᵉ` uniform on `{-√1.5, 0, +√1.5}` so that
    /// `δ = E[(μ₂ᵉ)²] = 1` with three distinct environments.
    pub fn reference() -> Self {
        let m = (1.5f64).sqrt();
        Self {
            alpha: 1.0,
            beta: 1.0,
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
            sigma12: 0.5,
            mu2_dist: vec![(-m, 1.0 / 3.0), (0.0, 1.0 / 3.0), (m, 1.0 - 2.0 / 3.0)],
            noise_var: 0.25,
        }
    }
}

/// Population second moments of the pooled features.
fn pooled_moments(spec: &LinearEnvSpec) -> (Matrix2<f64>, Vector2<f64>) {
    let delta = spec.delta();
    let lambda = Matrix2::new(
        spec.sigma1_sq,
        spec.sigma12,
        spec.sigma12,
        spec.sigma2_sq + delta,
    );
    let rho = Vector2::new(
        spec.alpha * spec.sigma1_sq,
        spec.alpha * spec.sigma12 + spec.beta * delta,
    );
    (lambda, rho)
}

/// Population pooled least-squares coefficients `(α̃, β̃)`: the solve of
/// `Λ_xx b = ρ_xy` with `Λ_xx = E[x xᵀ]`, `ρ_xy = E[x y]`.
pub fn population_erm_coeffs(spec: &LinearEnvSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let (lambda, rho) = pooled_moments(spec);
    let solved = lambda.lu().solve(&rho).ok_or(Error::SingularMoments)?;
    Ok((solved[0], solved[1]))
}

/// Explicit bias formula for the pooled `x₁` coefficient:
/// `α′ = α − σ₁₂ β δ / (σ₁² (σ₂² + δ) − σ₁₂²)`.
pub fn closed_form_alpha_prime(spec: &LinearEnvSpec) -> f64 {
    let delta = spec.delta();
    spec.alpha
        - spec.sigma12 * spec.beta * delta
            / (spec.sigma1_sq * (spec.sigma2_sq + delta) - spec.sigma12 * spec.sigma12)
}

/// One simulated observation with its extended features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSample {
    pub x1: f64,
    pub x2: f64,
    /// Environment mean of `x₁`; identically zero in this family but carried
    /// as a feature so its zero coefficient is an estimated outcome.
    pub mu1: f64,
    pub mu2: f64,
    pub y: f64,
    pub env: usize,
}

/// Draw `n` pooled samples. The environment is drawn per sample from the
/// `μ₂` distribution; within-environment noise is Gaussian with the spec's
/// covariance.
pub fn simulate(spec: &LinearEnvSpec, n: usize, seed: u64) -> Result<Vec<LinearSample>> {
    spec.validate()?;
    let mut rng = rng::stream(seed);
    // Cholesky of [[s1, s12], [s12, s2]].
    let l11 = spec.sigma1_sq.sqrt();
    let l21 = spec.sigma12 / l11;
    let l22 = (spec.sigma2_sq - l21 * l21).sqrt();
    let noise_sd = spec.noise_var.sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut env = spec.mu2_dist.len() - 1;
        for (i, &(_, p)) in spec.mu2_dist.iter().enumerate() {
            acc += p;
            if u < acc {
                env = i;
                break;
            }
        }
        let mu2 = spec.mu2_dist[env].0;
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let x1 = l11 * z1;
        let x2 = mu2 + l21 * z1 + l22 * z2;
        let eps: f64 = StandardNormal.sample(&mut rng);
        let y = spec.alpha * x1 + spec.beta * mu2 + noise_sd * eps;
        out.push(LinearSample { x1, x2, mu1: 0.0, mu2, y, env });
    }
    Ok(out)
}

/// Pooled empirical least squares of `y` on `(x₁, x₂)` through the origin,
/// by normal equations solved through an SVD factorization.
///
/// Needs at least `10 * dim` samples and a full-rank design; rank
/// deficiency is an error naming the offending feature columns.
pub fn fit_erm_empirical(data: &[LinearSample]) -> Result<(f64, f64)> {
    let names = ["x1", "x2"];
    let rows: Vec<[f64; 2]> = data.iter().map(|s| [s.x1, s.x2]).collect();
    let coeffs = solve_ols(&rows, data, &names, RankPolicy::Reject)?;
    Ok((coeffs[0], coeffs[1]))
}

/// Empirical least squares on the extended features `(x₁, x₂, μ₁ᵉ, μ₂ᵉ)`
/// through the origin. Rank-deficient designs (for example the
/// identically-zero `μ₁` column) resolve to the minimum-norm solution.
pub fn fit_icrm_extended(data: &[LinearSample]) -> Result<[f64; 4]> {
    let names = ["x1", "x2", "mu1", "mu2"];
    let rows: Vec<[f64; 4]> = data.iter().map(|s| [s.x1, s.x2, s.mu1, s.mu2]).collect();
    let coeffs = solve_ols(&rows, data, &names, RankPolicy::MinimumNorm)?;
    Ok([coeffs[0], coeffs[1], coeffs[2], coeffs[3]])
}

enum RankPolicy {
    Reject,
    MinimumNorm,
}

fn solve_ols<const K: usize>(
    rows: &[[f64; K]],
    data: &[LinearSample],
    names: &[&str; K],
    policy: RankPolicy,
) -> Result<Vec<f64>> {
    if rows.len() < 10 * K {
        return Err(Error::InvalidEnvParams(format!(
            "{} samples < 10 * dim = {}",
            rows.len(),
            10 * K
        )));
    }
    let mut gram = DMatrix::zeros(K, K);
    let mut rhs = DVector::zeros(K);
    for (row, sample) in rows.iter().zip(data) {
        for i in 0..K {
            rhs[i] += row[i] * sample.y;
            for j in 0..K {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }
    let n = rows.len() as f64;
    gram /= n;
    rhs /= n;

    let svd = gram.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < K {
        if let RankPolicy::Reject = policy {
            // Columns with weight in a null direction are the offenders.
            let v_t = svd.v_t.as_ref().expect("computed");
            let mut offending = Vec::new();
            for (si, &s) in svd.singular_values.iter().enumerate() {
                if s <= tol {
                    for j in 0..K {
                        if v_t[(si, j)].abs() > 1e-8 && !offending.contains(&names[j].to_string()) {
                            offending.push(names[j].to_string());
                        }
                    }
                }
            }
            return Err(Error::RankDeficient(offending));
        }
    }
    let solved = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::InvalidEnvParams(e.to_string()))?
        * rhs;
    Ok(solved.iter().copied().collect())
}

/// Fitted coefficient summary: the pooled pair, the extended four-vector,
/// and the closed-form biased coefficient they are checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub erm_coeffs: (f64, f64),
    pub icrm_coeffs: [f64; 4],
    pub closed_form_alpha_prime: f64,
}

/// One row of the test-error curve at a given `σ₁²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveRow {
    pub sigma1_sq: f64,
    pub erm_error: f64,
    pub icrm_full_context_error: f64,
    pub icrm_empty_context_error: f64,
}

/// Expected squared error in a test environment with mean `test_mu2` of a
/// frozen linear predictor `a₁ x₁ + a₂ x₂`:
/// `(α−a₁)² σ₁² + (β−a₂)² μ₂² + a₂² σ₂² − 2 (α−a₁) a₂ σ₁₂ + σ_ε²`.
pub fn plain_predictor_error(
    spec: &LinearEnvSpec,
    sigma1_sq: f64,
    coeffs: (f64, f64),
    test_mu2: f64,
) -> f64 {
    let (a1, a2) = coeffs;
    let da = spec.alpha - a1;
    let db = spec.beta - a2;
    da * da * sigma1_sq + db * db * test_mu2 * test_mu2 + a2 * a2 * spec.sigma2_sq
        - 2.0 * da * a2 * spec.sigma12
        + spec.noise_var
}

/// Expected squared error of a frozen extended predictor
/// `a₁ x₁ + a₂ x₂ + m₁ μ₁ + m₂ μ₂` when the true means are supplied
/// (`μ₁ = 0`, `μ₂ = test_mu2`).
pub fn extended_predictor_error(
    spec: &LinearEnvSpec,
    sigma1_sq: f64,
    coeffs: &[f64; 4],
    test_mu2: f64,
) -> f64 {
    let [a1, a2, _m1, m2] = *coeffs;
    let da = spec.alpha - a1;
    let dm = spec.beta - a2 - m2;
    da * da * sigma1_sq + a2 * a2 * spec.sigma2_sq - 2.0 * da * a2 * spec.sigma12
        + dm * dm * test_mu2 * test_mu2
        + spec.noise_var
}

/// Analytic error curves over a grid of `σ₁²` values with all coefficients
/// frozen: the pooled predictor, the extended predictor with the true means
/// supplied, and the extended predictor with zero defaults for the
/// unobserved means.
pub fn test_error_curve(
    spec: &LinearEnvSpec,
    erm_coeffs: (f64, f64),
    icrm_coeffs: &[f64; 4],
    sigma1_grid: &[f64],
    test_mu2: f64,
) -> Result<Vec<ErrorCurveRow>> {
    if sigma1_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(sigma1_grid
        .iter()
        .map(|&s1| ErrorCurveRow {
            sigma1_sq: s1,
            erm_error: plain_predictor_error(spec, s1, erm_coeffs, test_mu2),
            icrm_full_context_error: extended_predictor_error(spec, s1, icrm_coeffs, test_mu2),
            // Zero defaults for the mean features reduce the predictor to
            // its (x1, x2) part.
            icrm_empty_context_error: plain_predictor_error(
                spec,
                s1,
                (icrm_coeffs[0], icrm_coeffs[1]),
                test_mu2,
            ),
        })
        .collect())
}

/// Monte Carlo cross-check of [`plain_predictor_error`]: empirical mean
/// squared error of the frozen predictor in a simulated test environment
/// with the given `σ₁²` and mean.
pub fn mc_plain_predictor_error(
    spec: &LinearEnvSpec,
    sigma1_sq: f64,
    coeffs: (f64, f64),
    test_mu2: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let test_spec = LinearEnvSpec {
        sigma1_sq,
        mu2_dist: vec![(test_mu2, 1.0)],
        ..spec.clone()
    };
    let data = simulate(&test_spec, n, seed)?;
    let mse = data
        .iter()
        .map(|s| {
            let pred = coeffs.0 * s.x1 + coeffs.1 * s.x2;
            (s.y - pred) * (s.y - pred)
        })
        .sum::<f64>()
        / n as f64;
    Ok(mse)
}

/// Write the error curves as CSV with columns
/// `sigma1_sq, erm_error, icrm_full_context_error, icrm_empty_context_error`.
pub fn write_curve_csv(rows: &[ErrorCurveRow], path: &std::path::Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "sigma1_sq",
        "erm_error",
        "icrm_full_context_error",
        "icrm_empty_context_error",
    ])?;
    for row in rows {
        writer.write_record([
            row.sigma1_sq.to_string(),
            row.erm_error.to_string(),
            row.icrm_full_context_error.to_string(),
            row.icrm_empty_context_error.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
