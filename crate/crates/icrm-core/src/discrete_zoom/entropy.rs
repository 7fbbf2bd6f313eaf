//! Conditional-entropy evaluation over enumerated discrete joints.
//!
//! `H(Y | X)`, `H(Y | X, E)` and `I(Y; E | X)` come from full enumeration.
//! `H(Y | X, C_t)` is computed exactly while the ordered context space
//! `alphabet^t` fits a state budget (default `10^6`), and by Monte Carlo over
//! sampled contexts above it, with the standard error reported. The exact
//! path internally enumerates context multisets weighted by multinomial
//! coefficients, which is identical to ordered enumeration because the
//! per-environment likelihood of a context depends only on its symbol
//! counts.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::rng;

use super::BayesNetSpec;

/// Default bound on `alphabet^t` below which the curve is exact.
pub const DEFAULT_EXACT_STATE_BUDGET: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct EntropyCurveConfig {
    /// Context lengths to evaluate.
    pub ts: Vec<usize>,
    /// Monte Carlo sample count used beyond the exact budget.
    pub mc_contexts: usize,
    pub seed: u64,
    /// Switch to Monte Carlo once `alphabet^t` exceeds this.
    pub exact_state_budget: f64,
}

impl EntropyCurveConfig {
    pub fn new(t_max: usize, mc_contexts: usize, seed: u64) -> Self {
        Self {
            ts: (0..=t_max).collect(),
            mc_contexts,
            seed,
            exact_state_budget: DEFAULT_EXACT_STATE_BUDGET,
        }
    }

    pub fn at(ts: Vec<usize>, mc_contexts: usize, seed: u64) -> Self {
        Self { ts, mc_contexts, seed, exact_state_budget: DEFAULT_EXACT_STATE_BUDGET }
    }
}

/// One point of the `H(Y | X, C_t)` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub t: usize,
    pub nats: f64,
    pub exact: bool,
    /// Monte Carlo standard error; zero on exact points.
    pub std_err: f64,
}

/// Entropy summary of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub h_y_given_x: f64,
    pub h_y_given_x_e: f64,
    pub i_y_e_given_x: f64,
    pub h_y_given_x_c: BTreeMap<usize, CurvePoint>,
}

/// Exact `H(Y | X)` in nats.
pub fn h_y_given_x(spec: &BayesNetSpec) -> f64 {
    let mut total = 0.0;
    for x in 0..spec.n_symbols() {
        let px = spec.x_marginal(x);
        if px == 0.0 {
            continue;
        }
        let mut py = vec![0.0; spec.n_labels()];
        for e in 0..spec.n_envs() {
            let w = spec.env_prior[e] * spec.x_given_e[e][x] / px;
            for (y, p) in py.iter_mut().enumerate() {
                *p += w * spec.y_given_xe[e][x][y];
            }
        }
        total += px * entropy_of(&py);
    }
    total
}

/// Exact `H(Y | X, E)` in nats.
pub fn h_y_given_x_e(spec: &BayesNetSpec) -> f64 {
    let mut total = 0.0;
    for e in 0..spec.n_envs() {
        for x in 0..spec.n_symbols() {
            let w = spec.env_prior[e] * spec.x_given_e[e][x];
            if w == 0.0 {
                continue;
            }
            total += w * entropy_of(&spec.y_given_xe[e][x]);
        }
    }
    total
}

fn entropy_of(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Posterior predictive `P(Y | X = query, C)` where the context enters only
/// through its symbol counts.
pub fn predict_from_counts(spec: &BayesNetSpec, query: usize, counts: &[usize]) -> Vec<f64> {
    let log_w = env_log_weights(spec, query, counts);
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut py = vec![0.0; spec.n_labels()];
    if max == f64::NEG_INFINITY {
        return py;
    }
    let mut total = 0.0;
    for e in 0..spec.n_envs() {
        let w = (log_w[e] - max).exp();
        total += w;
        for (y, p) in py.iter_mut().enumerate() {
            *p += w * spec.y_given_xe[e][query][y];
        }
    }
    for p in py.iter_mut() {
        *p /= total;
    }
    py
}

fn env_log_weights(spec: &BayesNetSpec, query: usize, counts: &[usize]) -> Vec<f64> {
    (0..spec.n_envs())
        .map(|e| {
            let mut lw = spec.env_prior[e].ln() + spec.x_given_e[e][query].ln();
            for (x, &c) in counts.iter().enumerate() {
                if c > 0 {
                    lw += c as f64 * spec.x_given_e[e][x].ln();
                }
            }
            lw
        })
        .collect()
}

/// Expected autoregressive step loss at context length `t` of an arbitrary
/// count-symmetric predictor, by exact enumeration:
/// `E_{(C_t, X, Y)}[-ln f(X, C_t)[Y]]`.
///
/// With `f = predict_from_counts` this equals `H(Y | X, C_t)`.
pub fn expected_loss_exact<F>(spec: &BayesNetSpec, t: usize, f: F) -> f64
where
    F: Fn(usize, &[usize]) -> Vec<f64>,
{
    let n_x = spec.n_symbols();
    let ln_fact = ln_factorials(t);
    let mut total = 0.0;
    let mut counts = vec![0usize; n_x];
    for_each_composition(t, n_x, &mut counts, &mut |counts| {
        let mut ln_multinomial = ln_fact[t];
        for &c in counts.iter() {
            ln_multinomial -= ln_fact[c];
        }
        for query in 0..n_x {
            let log_w = env_log_weights(spec, query, counts);
            let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue; // context impossible in every environment
            }
            // P(C = this multiset, X = query) and P(Y | C, X) in one pass.
            let mut weight_sum = 0.0;
            let mut py = vec![0.0; spec.n_labels()];
            for e in 0..spec.n_envs() {
                let w = (log_w[e] - max).exp();
                weight_sum += w;
                for (y, p) in py.iter_mut().enumerate() {
                    *p += w * spec.y_given_xe[e][query][y];
                }
            }
            for p in py.iter_mut() {
                *p /= weight_sum;
            }
            let p_cq = (ln_multinomial + max).exp() * weight_sum;
            let preds = f(query, counts);
            let mut step = 0.0;
            for (y, &p_true) in py.iter().enumerate() {
                if p_true > 0.0 {
                    step += p_true * -preds[y].max(f64::MIN_POSITIVE).ln();
                }
            }
            total += p_cq * step;
        }
    });
    total
}

/// Exact `H(Y | X, C_t)`.
pub fn conditional_entropy_exact(spec: &BayesNetSpec, t: usize) -> f64 {
    expected_loss_exact(spec, t, |query, counts| predict_from_counts(spec, query, counts))
}

/// Monte Carlo `H(Y | X, C_t)`: mean and standard error over sampled
/// `(environment, context, query)` triples.
pub fn conditional_entropy_mc<R: Rng>(
    spec: &BayesNetSpec,
    t: usize,
    mc_contexts: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..mc_contexts {
        let (_e, xs, _ys) = spec.sample_sequence(t + 1, rng);
        let mut counts = vec![0usize; spec.n_symbols()];
        for &x in &xs[..t] {
            counts[x] += 1;
        }
        let query = xs[t];
        let h = entropy_of(&predict_from_counts(spec, query, &counts));
        sum += h;
        sum_sq += h * h;
    }
    let n = mc_contexts as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let se = (var / n).sqrt();
    (mean, se)
}

/// Full entropy report for `spec` over the configured context lengths.
pub fn entropy_curve(spec: &BayesNetSpec, config: &EntropyCurveConfig) -> Result<EntropyReport> {
    spec.validate()?;
    let hx = h_y_given_x(spec);
    let hxe = h_y_given_x_e(spec);
    let n_x = spec.n_symbols() as f64;
    let mut curve = BTreeMap::new();
    for (i, &t) in config.ts.iter().enumerate() {
        let exact = n_x.powi(t as i32) <= config.exact_state_budget;
        let point = if exact {
            CurvePoint { t, nats: conditional_entropy_exact(spec, t), exact: true, std_err: 0.0 }
        } else {
            let mut rng = rng::stream(rng::derive_seed(config.seed, &[t as u64, i as u64]));
            let (nats, std_err) =
                conditional_entropy_mc(spec, t, config.mc_contexts.max(1), &mut rng);
            CurvePoint { t, nats, exact: false, std_err }
        };
        curve.insert(t, point);
    }
    Ok(EntropyReport {
        h_y_given_x: hx,
        h_y_given_x_e: hxe,
        i_y_e_given_x: (hx - hxe).max(0.0),
        h_y_given_x_c: curve,
    })
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = vec![0.0; n + 1];
    for k in 2..=n {
        table[k] = table[k - 1] + (k as f64).ln();
    }
    table
}

fn for_each_composition(
    total: usize,
    parts: usize,
    buf: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    fn rec(remaining: usize, idx: usize, buf: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if idx + 1 == buf.len() {
            buf[idx] = remaining;
            f(buf);
            return;
        }
        for v in 0..=remaining {
            buf[idx] = v;
            rec(remaining - v, idx + 1, buf, f);
        }
    }
    debug_assert_eq!(buf.len(), parts);
    rec(total, 0, buf, f);
}

/// Helper for tests and perturbation checks: a count-symmetric predictor
/// built by mixing the exact predictor with noise and renormalizing.
pub fn perturbed_predictor<'a>(
    spec: &'a BayesNetSpec,
    noise: &[f64],
    magnitude: f64,
) -> impl Fn(usize, &[usize]) -> Vec<f64> + 'a {
    let noise = noise.to_vec();
    move |query, counts| {
        let mut p = predict_from_counts(spec, query, counts);
        let k = p.len();
        for (y, v) in p.iter_mut().enumerate() {
            let jitter = noise[(query * k + y) % noise.len()].abs();
            *v = (*v + magnitude * jitter).max(1e-9);
        }
        let total: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= total;
        }
        p
    }
}
