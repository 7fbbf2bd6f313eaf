//! The rank-counting task: the label of a query against a context is the
//! number of context items strictly greater than it. The label depends on
//! the full order statistics of the context, which is exactly what a
//! fixed-dimensional mean embedding cannot carry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

use super::RegressionSequence;

/// Number of context items strictly greater than the query.
pub fn rank_label(query: f64, context: &[f64]) -> usize {
    context.iter().filter(|&&v| query < v).count()
}

/// A fixed context with scored queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTaskInstance {
    pub context: Vec<f64>,
    pub queries: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RankTaskInstance {
    /// Draw a context and queries uniform on `[0, 1]` and label them with
    /// the exact rank counts.
    pub fn sample(context_len: usize, n_queries: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed);
        let context: Vec<f64> = (0..context_len).map(|_| rng.random::<f64>()).collect();
        let queries: Vec<f64> = (0..n_queries).map(|_| rng.random::<f64>()).collect();
        let labels = queries.iter().map(|&q| rank_label(q, &context)).collect();
        Self { context, queries, labels }
    }
}

/// An autoregressive rank sequence: step `j`'s target is the rank of input
/// `j` within the preceding inputs.
pub fn sample_rank_sequence(len: usize, seed: u64) -> RegressionSequence {
    let mut rng = rng::stream(seed);
    let values: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
    let targets = (0..len)
        .map(|j| rank_label(values[j], &values[..j]) as f64)
        .collect();
    RegressionSequence {
        inputs: values.into_iter().map(|v| vec![v]).collect(),
        targets,
    }
}

/// One-sided sign test: probability of at least `wins` successes in
/// `trials` fair coin flips. Ties must be excluded by the caller.
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    if wins > trials {
        return 0.0;
    }
    // Exact binomial tail; trials are small here.
    let mut log_choose = vec![0.0f64; trials + 1];
    for k in 1..=trials {
        log_choose[k] =
            log_choose[k - 1] + ((trials - k + 1) as f64).ln() - (k as f64).ln();
    }
    let log_half_n = trials as f64 * 0.5f64.ln();
    (wins..=trials)
        .map(|k| (log_choose[k] + log_half_n).exp())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_labels_count_strictly_greater_items() {
        let context = [0.2, 0.8, 0.5, 0.5];
        assert_eq!(rank_label(0.3, &context), 3);
        assert_eq!(rank_label(0.5, &context), 1);
        assert_eq!(rank_label(0.9, &context), 0);
        assert_eq!(rank_label(-1.0, &context), 4);
    }

    #[test]
    fn instances_carry_exact_labels() {
        let inst = RankTaskInstance::sample(16, 32, 7);
        for (q, l) in inst.queries.iter().zip(&inst.labels) {
            assert_eq!(*l, rank_label(*q, &inst.context));
        }
    }

    #[test]
    fn sequences_label_each_prefix() {
        let seq = sample_rank_sequence(10, 3);
        assert_eq!(seq.targets[0], 0.0);
        for j in 0..seq.len() {
            let prefix: Vec<f64> = seq.inputs[..j].iter().map(|v| v[0]).collect();
            assert_eq!(seq.targets[j], rank_label(seq.inputs[j][0], &prefix) as f64);
        }
    }

    #[test]
    fn sign_test_tail_values() {
        // P(X >= 15 | n = 20) = 0.02069...; P(X >= 10) > 0.5.
        assert!(sign_test_p_value(15, 20) < 0.05);
        assert!(sign_test_p_value(14, 20) > 0.05);
        assert!(sign_test_p_value(10, 20) > 0.5);
        assert_abs_diff_eq!(sign_test_p_value(0, 20), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sign_test_p_value(20, 20), 0.5f64.powi(20), epsilon = 1e-18);
    }
}
