//! Trainable in-context predictors with hand-derived gradients.
//!
//! The learner is deliberately the smallest mechanism that can route
//! query-specific information out of a context: single-head kernel
//! attention with one scalar temperature. For a query `x` and context
//! `(x_1 .. x_m)`,
//!
//! ```text
//! a(x, c) = sum_j softmax_j(-|x - x_j|^2 / tau) * x_j
//! f(x, c) = head . concat(x, a) + bias        (a = 0 on empty context)
//! ```
//!
//! Training minimizes the summed autoregressive squared error along a
//! sequence (step `j` predicts target `j` from the unlabeled prefix) by
//! plain gradient descent with a fixed step, so runs reproduce bit for bit.
//! Gradients for the head, the bias, and `log tau` are analytic and checked
//! against central finite differences.
//!
//! The comparison baseline ([`mean_embed`]) replaces the query-dependent
//! summary with the context mean of a fixed feature map, and
//! [`rank_task`] provides the counting problem on which that mean embedding
//! provably loses information.

pub mod mean_embed;
pub mod rank_task;

pub use mean_embed::{
    embedding_collision_search, mean_embed_forward, mean_embed_train_least_squares,
    CollisionSearch, CollisionSearchOutcome, FeatureMap, IdentityMap, MeanEmbedParams,
    RandomFeatureMap,
};
pub use rank_task::{rank_label, sample_rank_sequence, sign_test_p_value, RankTaskInstance};

use serde::{Deserialize, Serialize};

use crate::env_core::ContextWindow;
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the kernel-attention predictor. The temperature is stored
/// as `log tau` so every represented value is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// Head over `concat(query, attended summary)`: length `2 d`.
    pub head: Vec<f64>,
    pub bias: f64,
    pub log_tau: f64,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        Self { head: vec![0.0; 2 * dim], bias: 0.0, log_tau: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.head.len() / 2
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// A sequence with real-valued targets for the regression losses used here.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl RegressionSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Softmax attention weights of `query` over `context` at temperature
/// `tau`, scores `-|x - x_j|^2 / tau`.
pub fn attention_weights(query: &[f64], context: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let scores: Vec<f64> = context
        .iter()
        .map(|item| -dist_sq(query, item) / tau)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    weights
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Forward pass: attended summary (zero vector on an empty context), then
/// the linear head on `concat(query, summary)`.
pub fn attention_forward(x: &[f64], context: &ContextWindow, params: &AttentionParams) -> f64 {
    let d = params.dim();
    debug_assert_eq!(x.len(), d);
    let mut out = params.bias;
    for (i, &xi) in x.iter().enumerate() {
        out += params.head[i] * xi;
    }
    if !context.is_empty() {
        let weights = attention_weights(x, &context.items, params.tau());
        for (j, item) in context.items.iter().enumerate() {
            for (i, &v) in item.iter().enumerate() {
                out += params.head[d + i] * weights[j] * v;
            }
        }
    }
    out
}

/// Gradient of the summed squared-error autoregressive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub head: Vec<f64>,
    pub bias: f64,
    pub log_tau: f64,
}

/// Loss and analytic gradient of `sum_j (f(x_j; c_j) - y_j)^2` over the
/// sequence, with `c_j` the unlabeled prefix before step `j`.
///
/// The `log tau` path: with scores `s_j = -d_j / tau`,
/// `d s_j / d log tau = d_j / tau`, so the attended summary moves by
/// `(1/tau) sum_j w_j (d_j - dbar) x_j` where `dbar` is the
/// attention-weighted mean of the squared distances.
pub fn attention_loss_grad(
    seq: &RegressionSequence,
    params: &AttentionParams,
) -> (f64, AttentionGrad) {
    let d = params.dim();
    let tau = params.tau();
    let mut loss = 0.0;
    let mut grad = AttentionGrad { head: vec![0.0; 2 * d], bias: 0.0, log_tau: 0.0 };
    for j in 0..seq.len() {
        let x = &seq.inputs[j];
        let context = &seq.inputs[..j];
        let mut summary = vec![0.0; d];
        let mut weights = Vec::new();
        let mut dists = Vec::new();
        if !context.is_empty() {
            dists = context.iter().map(|item| dist_sq(x, item)).collect();
            weights = attention_weights(x, context, tau);
            for (w, item) in weights.iter().zip(context) {
                for (i, &v) in item.iter().enumerate() {
                    summary[i] += w * v;
                }
            }
        }
        let mut out = params.bias;
        for i in 0..d {
            out += params.head[i] * x[i] + params.head[d + i] * summary[i];
        }
        let residual = out - seq.targets[j];
        loss += residual * residual;
        let g = 2.0 * residual;
        grad.bias += g;
        for i in 0..d {
            grad.head[i] += g * x[i];
            grad.head[d + i] += g * summary[i];
        }
        if !context.is_empty() {
            let dbar: f64 = weights.iter().zip(&dists).map(|(w, dist)| w * dist).sum();
            // d summary / d log tau, contracted with the summary head.
            let mut coupling = 0.0;
            for ((w, dist), item) in weights.iter().zip(&dists).zip(context) {
                let scale = w * (dist - dbar) / tau;
                for (i, &v) in item.iter().enumerate() {
                    coupling += params.head[d + i] * scale * v;
                }
            }
            grad.log_tau += g * coupling;
        }
    }
    (loss, grad)
}

/// Central finite-difference gradient for checking the analytic one.
pub fn attention_grad_finite_diff(
    seq: &RegressionSequence,
    params: &AttentionParams,
    step: f64,
) -> AttentionGrad {
    let loss_at = |p: &AttentionParams| attention_loss_grad(seq, p).0;
    let mut grad = AttentionGrad { head: vec![0.0; params.head.len()], bias: 0.0, log_tau: 0.0 };
    for i in 0..params.head.len() {
        let mut plus = params.clone();
        plus.head[i] += step;
        let mut minus = params.clone();
        minus.head[i] -= step;
        grad.head[i] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
    }
    let mut plus = params.clone();
    plus.bias += step;
    let mut minus = params.clone();
    minus.bias -= step;
    grad.bias = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
    let mut plus = params.clone();
    plus.log_tau += step;
    let mut minus = params.clone();
    minus.log_tau -= step;
    grad.log_tau = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
    grad
}

/// Gradient-descent configuration: fixed step, fixed iteration count,
/// divergence guard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Separate step size for `log tau` (temperature moves on a log scale).
    pub tau_learning_rate: f64,
    pub seed: u64,
    /// Abort when the per-sequence loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            tau_learning_rate: 1e-3,
            seed: 0,
            divergence_threshold: 1e6,
        }
    }
}

/// Train by plain gradient descent on sequences from `generator`
/// (`generator(step, seed)` must be deterministic). Returns the trained
/// parameters and the per-step loss trace.
pub fn train<G>(
    generator: G,
    init: AttentionParams,
    config: &TrainConfig,
) -> Result<(AttentionParams, Vec<f64>)>
where
    G: Fn(usize, u64) -> RegressionSequence,
{
    let mut params = init;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let seq = generator(step, rng::derive_seed(config.seed, &[step as u64]));
        let (loss, grad) = attention_loss_grad(&seq, &params);
        if !loss.is_finite() || loss > config.divergence_threshold {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        for (p, g) in params.head.iter_mut().zip(&grad.head) {
            *p -= config.learning_rate * g;
        }
        params.bias -= config.learning_rate * grad.bias;
        params.log_tau -= config.tau_learning_rate * grad.log_tau;
    }
    Ok((params, trace))
}

/// Write a loss trace as `step, loss` CSV.
pub fn write_loss_trace_csv(trace: &[f64], path: &std::path::Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["step", "loss"])?;
    for (step, loss) in trace.iter().enumerate() {
        writer.write_record([step.to_string(), loss.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}
