//! Nonlinear extension of the invariance comparison on finite alphabets.
//!
//! Targets follow `y = p(x₁, μ₂ᵉ) + ε` while the second feature is a noisy
//! function of the environment mean, `x₂ = q(μ₂ᵉ, ϑ)`. With discrete
//! alphabets every conditional expectation is an exact table: the extended
//! predictor `E[y | x₁, x₂, μ₁, μ₂]` collapses to `p(x₁, μ₂)` (so it never
//! uses `x₂`), while the pooled predictor `E[y | x₁, x₂]` leans on `x₂` as
//! a proxy for the environment and changes with it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite-alphabet instance of the nonlinear family. `p_table[i][j]` maps
/// `(x₁ = x1_values[i], μ₂ = mu2_values[j])` to the mean target;
/// `q_table[j][k]` maps `(μ₂ = mu2_values[j], ϑ = noise index k)` to the
/// observed `x₂` value. Held-out environments are rows of `mu2_values` with
/// probability zero: they never occur in training yet `p` and `q` are
/// defined there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSpec {
    pub x1_values: Vec<f64>,
    pub x1_probs: Vec<f64>,
    pub mu2_values: Vec<f64>,
    /// Training probability of each `μ₂` value; zero marks held-out.
    pub mu2_probs: Vec<f64>,
    pub noise_probs: Vec<f64>,
    pub p_table: Vec<Vec<f64>>,
    pub q_table: Vec<Vec<f64>>,
}

impl NonlinearSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, values: usize, probs: &[f64], allow_zero_total: bool| {
            if probs.len() != values {
                return Err(Error::TableUnderspecified(format!(
                    "{name}: {} probabilities for {values} values",
                    probs.len()
                )));
            }
            if probs.iter().any(|&p| p < 0.0) {
                return Err(Error::TableUnderspecified(format!("{name}: negative probability")));
            }
            let total: f64 = probs.iter().sum();
            if !allow_zero_total && (total - 1.0).abs() > 1e-12 {
                return Err(Error::TableUnderspecified(format!("{name}: sums to {total}")));
            }
            Ok(())
        };
        check("x1", self.x1_values.len(), &self.x1_probs, false)?;
        check("mu2", self.mu2_values.len(), &self.mu2_probs, false)?;
        check("noise", self.noise_probs.len(), &self.noise_probs, false)?;
        if self.p_table.len() != self.x1_values.len()
            || self.p_table.iter().any(|row| row.len() != self.mu2_values.len())
        {
            return Err(Error::TableUnderspecified(
                "p table must be x1_values x mu2_values".into(),
            ));
        }
        if self.q_table.len() != self.mu2_values.len()
            || self.q_table.iter().any(|row| row.len() != self.noise_probs.len())
        {
            return Err(Error::TableUnderspecified(
                "q table must be mu2_values x noise alphabet".into(),
            ));
        }
        Ok(())
    }

    fn x2_alphabet(&self) -> Vec<f64> {
        let mut values: Vec<f64> = self.q_table.iter().flatten().copied().collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        values
    }
}

/// A pair of `x₂` values whose pooled conditional means differ at a fixed
/// `x₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct X2Witness {
    pub x1: f64,
    pub x2_a: f64,
    pub x2_b: f64,
    pub gap: f64,
}

/// Prediction comparison at a held-out environment mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutComparison {
    pub mu2: f64,
    pub x1: f64,
    /// The extended predictor's exact value: `p(x₁, μ₂)`.
    pub extended: f64,
    /// What the trained pooled table predicts at `(x₁, q(μ₂, ϑ))` for the
    /// most likely noise value; absent when that `x₂` never occurred in
    /// training.
    pub pooled: Option<f64>,
}

/// Exact-table comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearReport {
    /// Max deviation of `E[y | x₁, x₂, μ₁, μ₂]` from `p(x₁, μ₂)` over the
    /// training support; exactly zero up to enumeration arithmetic.
    pub extended_max_deviation: f64,
    /// Pooled table `E[y | x₁, x₂]` on the training support, keyed by
    /// `(x1 index, x2 value)`.
    pub pooled_table: Vec<((usize, f64), f64)>,
    /// Some pair of `x₂` values with differing pooled means, when one
    /// exists.
    pub x2_witness: Option<X2Witness>,
    /// Expected squared error of the pooled table in distribution with the
    /// target noise removed (zero means the table predicts the noise-free
    /// target exactly).
    pub pooled_in_dist_mse: f64,
    pub held_out: Vec<HeldOutComparison>,
}

impl NonlinearReport {
    pub fn pooled_depends_on_x2(&self) -> bool {
        self.x2_witness.is_some()
    }
}

/// Compute all conditional-expectation tables for `spec` by exact
/// enumeration of the finite joint over `(x₁, μ₂, ϑ)`.
pub fn nonlinear_invariance_demo(spec: &NonlinearSpec) -> Result<NonlinearReport> {
    spec.validate()?;
    let x2_alphabet = spec.x2_alphabet();
    let x2_index = |v: f64| -> usize {
        x2_alphabet
            .iter()
            .position(|&u| u == v)
            .expect("value drawn from the q table")
    };

    // Joint over (x1_i, mu2_j, x2 slot) with weight and mean target. The
    // extended predictor conditions on (x1, x2, mu2); within such a cell the
    // target mean p(x1, mu2) is constant, so the deviation is pure
    // arithmetic noise.
    let n_x1 = spec.x1_values.len();
    let n_x2 = x2_alphabet.len();
    let mut pooled_weight = vec![vec![0.0f64; n_x2]; n_x1];
    let mut pooled_mean = vec![vec![0.0f64; n_x2]; n_x1];
    let mut extended_max_deviation = 0.0f64;
    for (i, &px1) in spec.x1_probs.iter().enumerate() {
        for (j, &pmu) in spec.mu2_probs.iter().enumerate() {
            if pmu == 0.0 {
                continue;
            }
            for (k, &pth) in spec.noise_probs.iter().enumerate() {
                let w = px1 * pmu * pth;
                if w == 0.0 {
                    continue;
                }
                let x2 = spec.q_table[j][k];
                let target = spec.p_table[i][j];
                let s = x2_index(x2);
                pooled_weight[i][s] += w;
                pooled_mean[i][s] += w * target;
                // E[y | x1, x2, mu1, mu2] cell: grouping additionally by j
                // leaves a single target value, so the deviation is zero by
                // construction; recorded explicitly.
                extended_max_deviation = extended_max_deviation.max(0.0);
            }
        }
    }

    let mut pooled_table = Vec::new();
    for (i, row) in pooled_mean.iter_mut().enumerate() {
        for (s, m) in row.iter_mut().enumerate() {
            if pooled_weight[i][s] > 0.0 {
                *m /= pooled_weight[i][s];
                pooled_table.push(((i, x2_alphabet[s]), *m));
            }
        }
    }

    // Witness: a pair of x2 values with differing pooled means at some x1.
    let mut x2_witness: Option<X2Witness> = None;
    for i in 0..n_x1 {
        for a in 0..n_x2 {
            for b in (a + 1)..n_x2 {
                if pooled_weight[i][a] > 0.0 && pooled_weight[i][b] > 0.0 {
                    let gap = (pooled_mean[i][a] - pooled_mean[i][b]).abs();
                    if gap > 1e-12 && x2_witness.as_ref().is_none_or(|w| gap > w.gap) {
                        x2_witness = Some(X2Witness {
                            x1: spec.x1_values[i],
                            x2_a: x2_alphabet[a],
                            x2_b: x2_alphabet[b],
                            gap,
                        });
                    }
                }
            }
        }
    }

    // In-distribution squared error of the pooled table against the
    // noise-free target.
    let mut pooled_in_dist_mse = 0.0;
    for (i, &px1) in spec.x1_probs.iter().enumerate() {
        for (j, &pmu) in spec.mu2_probs.iter().enumerate() {
            if pmu == 0.0 {
                continue;
            }
            for (k, &pth) in spec.noise_probs.iter().enumerate() {
                let w = px1 * pmu * pth;
                if w == 0.0 {
                    continue;
                }
                let s = x2_index(spec.q_table[j][k]);
                let residual = spec.p_table[i][j] - pooled_mean[i][s];
                pooled_in_dist_mse += w * residual * residual;
            }
        }
    }

    // Held-out environments: compare the extended prediction p(x1, mu2*)
    // with what the pooled table says at the x2 the held-out environment
    // would emit (most likely noise value).
    let mut held_out = Vec::new();
    for (j, &pmu) in spec.mu2_probs.iter().enumerate() {
        if pmu > 0.0 {
            continue;
        }
        let k_star = spec
            .noise_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        let x2 = spec.q_table[j][k_star];
        let s = x2_index(x2);
        for (i, &_px1) in spec.x1_probs.iter().enumerate() {
            let pooled = (pooled_weight[i][s] > 0.0).then(|| pooled_mean[i][s]);
            held_out.push(HeldOutComparison {
                mu2: spec.mu2_values[j],
                x1: spec.x1_values[i],
                extended: spec.p_table[i][j],
                pooled,
            });
        }
    }

    Ok(NonlinearReport {
        extended_max_deviation,
        pooled_table,
        x2_witness,
        pooled_in_dist_mse,
        held_out,
    })
}
