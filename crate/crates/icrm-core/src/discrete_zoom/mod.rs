//! Exact in-context prediction on finite discrete environments.
//!
//! A [`BayesNetSpec`] is a fully enumerated joint over `(E, X, Y)`: a prior
//! over environments, a per-environment table `P(X | E)` and a table
//! `P(Y | X, E)`. Within an environment, examples are iid, so the posterior
//! over environments given an unlabeled context factorizes over context
//! items. The exact in-context predictor mixes the per-environment
//! conditionals by that posterior; with an empty context it collapses to the
//! pooled predictor, and as the context grows it concentrates on the data's
//! environment.
//!
//! The posterior here is an exact stand-in for the amortization map that a
//! trained sequence model would have to learn: it sends `(query, context)` to
//! the environment features relevant for the query.

mod entropy;
mod scenarios;

pub use entropy::{
    conditional_entropy_exact, conditional_entropy_mc, entropy_curve, expected_loss_exact,
    h_y_given_x, h_y_given_x_e, perturbed_predictor, predict_from_counts, CurvePoint,
    EntropyCurveConfig, EntropyReport, DEFAULT_EXACT_STATE_BUDGET,
};
pub use scenarios::{
    dag_case_scenario, faithfulness_report, xor_scenario, DagCase, FaithfulnessReport, CI_TOL,
    MIN_DROP,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env_core::{ContextWindow, EnvId, PredictiveDistribution, Provenance, Sequence};
use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Fully enumerated discrete joint over `(E, X, Y)`.
///
/// * `env_prior[e]` — `P(E = e)`
/// * `x_given_e[e][x]` — `P(X = x | E = e)`
/// * `y_given_xe[e][x][y]` — `P(Y = y | X = x, E = e)`
///
/// All rows must sum to one within `1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesNetSpec {
    pub env_prior: Vec<f64>,
    pub x_given_e: Vec<Vec<f64>>,
    pub y_given_xe: Vec<Vec<Vec<f64>>>,
}

impl BayesNetSpec {
    pub fn new(
        env_prior: Vec<f64>,
        x_given_e: Vec<Vec<f64>>,
        y_given_xe: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let spec = Self { env_prior, x_given_e, y_given_xe };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n_envs = self.env_prior.len();
        if n_envs == 0 {
            return Err(Error::InvalidTable("no environments".into()));
        }
        check_row("env_prior", &self.env_prior)?;
        if self.x_given_e.len() != n_envs || self.y_given_xe.len() != n_envs {
            return Err(Error::InvalidTable("table env counts disagree".into()));
        }
        let n_x = self.x_given_e[0].len();
        let n_y = self
            .y_given_xe
            .first()
            .and_then(|t| t.first())
            .map(Vec::len)
            .unwrap_or(0);
        if n_x == 0 || n_y == 0 {
            return Err(Error::InvalidTable("empty alphabet".into()));
        }
        for e in 0..n_envs {
            if self.x_given_e[e].len() != n_x {
                return Err(Error::InvalidTable(format!("x row {e} has wrong width")));
            }
            check_row(&format!("x_given_e[{e}]"), &self.x_given_e[e])?;
            if self.y_given_xe[e].len() != n_x {
                return Err(Error::InvalidTable(format!("y table {e} has wrong x count")));
            }
            for x in 0..n_x {
                if self.y_given_xe[e][x].len() != n_y {
                    return Err(Error::InvalidTable(format!(
                        "y row ({e}, {x}) has wrong width"
                    )));
                }
                check_row(&format!("y_given_xe[{e}][{x}]"), &self.y_given_xe[e][x])?;
            }
        }
        Ok(())
    }

    pub fn n_envs(&self) -> usize {
        self.env_prior.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.x_given_e[0].len()
    }

    pub fn n_labels(&self) -> usize {
        self.y_given_xe[0][0].len()
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    fn check_symbol(&self, symbol: usize) -> Result<()> {
        if symbol >= self.n_symbols() {
            return Err(Error::SymbolOutsideAlphabet {
                symbol,
                alphabet: self.n_symbols(),
            });
        }
        Ok(())
    }

    /// Marginal `P(X = x)` under the environment mixture.
    pub fn x_marginal(&self, x: usize) -> f64 {
        (0..self.n_envs())
            .map(|e| self.env_prior[e] * self.x_given_e[e][x])
            .sum()
    }

    /// Draw `(environment, xs, ys)` with the context and query iid in the
    /// sampled environment.
    pub fn sample_sequence<R: Rng>(&self, t: usize, rng: &mut R) -> (usize, Vec<usize>, Vec<usize>) {
        let e = sample_index(&self.env_prior, rng);
        let mut xs = Vec::with_capacity(t);
        let mut ys = Vec::with_capacity(t);
        for _ in 0..t {
            let x = sample_index(&self.x_given_e[e], rng);
            let y = sample_index(&self.y_given_xe[e][x], rng);
            xs.push(x);
            ys.push(y);
        }
        (e, xs, ys)
    }

    /// Same draw packaged as an env-core [`Sequence`] of one-hot-free scalar
    /// symbols, for use with the autoregressive loss harness.
    pub fn sample_env_sequence<R: Rng>(&self, t: usize, rng: &mut R) -> Sequence {
        let (e, xs, ys) = self.sample_sequence(t, rng);
        Sequence {
            inputs: xs.into_iter().map(|x| vec![x as f64]).collect(),
            targets: ys,
            provenance: Provenance::EnvPure(EnvId(e as u32)),
        }
    }
}

fn check_row(name: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
        return Err(Error::InvalidTable(format!("{name} has entries outside [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidTable(format!("{name} sums to {sum}")));
    }
    Ok(())
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Posterior over environments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPosterior {
    probs: Vec<f64>,
}

impl EnvPosterior {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Interpret a real-vector context as discrete symbols (each item is a
/// one-element vector holding the symbol index).
pub fn context_symbols(spec: &BayesNetSpec, context: &ContextWindow) -> Result<Vec<usize>> {
    context
        .items
        .iter()
        .map(|item| {
            let v = item.first().copied().unwrap_or(f64::NAN);
            let s = v as usize;
            if v.fract() != 0.0 || v < 0.0 || s >= spec.n_symbols() {
                Err(Error::SymbolOutsideAlphabet {
                    symbol: s,
                    alphabet: spec.n_symbols(),
                })
            } else {
                Ok(s)
            }
        })
        .collect()
}

/// Exact `P(E | X = query, C = context)`.
///
/// Proportional to `prior[e] * P(query | e) * prod_j P(c_j | e)`; a context
/// impossible under every environment is an error rather than a NaN.
pub fn posterior_over_envs(
    spec: &BayesNetSpec,
    context: &[usize],
    query: usize,
) -> Result<EnvPosterior> {
    spec.check_symbol(query)?;
    for &c in context {
        spec.check_symbol(c)?;
    }
    let mut weights = vec![0.0; spec.n_envs()];
    for e in 0..spec.n_envs() {
        // Likelihoods multiply; log space keeps long contexts stable.
        let mut log_w = spec.env_prior[e].ln() + spec.x_given_e[e][query].ln();
        for &c in context {
            log_w += spec.x_given_e[e][c].ln();
        }
        weights[e] = log_w;
    }
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ImpossibleContext);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(EnvPosterior { probs: weights })
}

/// Exact in-context prediction `P(Y | X = query, C = context)`.
///
/// Mixes the per-environment conditionals by the context posterior. With an
/// empty context this is exactly the pooled predictor.
pub fn icrm_exact_predict(
    spec: &BayesNetSpec,
    query: usize,
    context: &[usize],
) -> Result<PredictiveDistribution> {
    let posterior = posterior_over_envs(spec, context, query)?;
    let mut probs = vec![0.0; spec.n_labels()];
    for e in 0..spec.n_envs() {
        let w = posterior.probs[e];
        for (y, p) in probs.iter_mut().enumerate() {
            *p += w * spec.y_given_xe[e][query][y];
        }
    }
    normalize_exact(&mut probs);
    PredictiveDistribution::new(probs)
}

/// Pooled predictor `P(Y | X = query)` under the environment mixture.
pub fn pooled_bayes_predict(spec: &BayesNetSpec, query: usize) -> Result<PredictiveDistribution> {
    icrm_exact_predict(spec, query, &[])
}

/// Wrap a spec as an env-core [`crate::env_core::Predictor`] closure over
/// symbol-valued inputs.
pub fn exact_predictor(
    spec: &BayesNetSpec,
) -> impl Fn(&[f64], &ContextWindow) -> Result<PredictiveDistribution> + '_ {
    move |x: &[f64], c: &ContextWindow| {
        let symbols = context_symbols(spec, c)?;
        let query = x[0] as usize;
        icrm_exact_predict(spec, query, &symbols)
    }
}

/// Guard against f64 drift so the distribution invariant (sum within 1e-12)
/// holds exactly.
fn normalize_exact(probs: &mut [f64]) {
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
    let total: f64 = probs.iter().sum();
    let drift = total - 1.0;
    if drift != 0.0 {
        // Push the residual onto the largest entry.
        let imax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        probs[imax] -= drift;
    }
}

/// Total variation distance between two distributions over the same labels.
pub fn total_variation(a: &PredictiveDistribution, b: &PredictiveDistribution) -> f64 {
    a.probs()
        .iter()
        .zip(b.probs())
        .map(|(pa, pb)| (pa - pb).abs())
        .sum::<f64>()
        / 2.0
}
