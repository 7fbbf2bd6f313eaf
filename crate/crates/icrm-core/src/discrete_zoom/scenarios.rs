//! Canonical discrete scenarios.
//!
//! `xor_scenario` is the two-environment benchmark where the label is the
//! query XOR the environment: pooled prediction stays maximally uncertain in
//! the minority direction while context identifies the environment and
//! drives the conditional entropy to zero.
//!
//! `dag_case_scenario` instantiates the three directed structures under
//! which context provably helps at every length: the query a child of the
//! label, the query a parent of the label, and the query a collider child of
//! label and environment. All variables are binary. Conditional-probability
//! tables are randomized, and a draw is rejected unless faithfulness holds:
//! no accidental independence at tolerance `1e-9`, and the exact
//! `H(Y | X, C_t)` curve strictly drops for `t = 0..=3` by more than `1e-6`
//! nats per step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

use super::entropy::{conditional_entropy_exact, h_y_given_x, h_y_given_x_e};
use super::BayesNetSpec;

/// Independence tolerance for the conditional-independence checks.
pub const CI_TOL: f64 = 1e-9;
/// Required strict drop per context step on generated scenarios.
pub const MIN_DROP: f64 = 1e-6;

/// The two-environment XOR joint: uniform prior, `P(X=1|E=1) = 0.9`,
/// `P(X=1|E=0) = 0.1`, `Y = X xor E`.
pub fn xor_scenario() -> BayesNetSpec {
    BayesNetSpec::new(
        vec![0.5, 0.5],
        vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        vec![
            // E = 0: Y = X.
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            // E = 1: Y = not X.
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        ],
    )
    .expect("hand-written tables are valid")
}

/// The three directed structures for which a single unlabeled context item
/// already reduces label uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagCase {
    /// `E -> Y`, `Y -> X`: the query is a child of the label.
    QueryChildOfLabel,
    /// `E -> X`, `E -> Y`, `X -> Y`: the query is a parent of the label.
    QueryParentOfLabel,
    /// `Y -> X <- E` with `Y` independent of `E` marginally: the query is a
    /// collider child, so conditioning on it couples label and environment.
    QueryCollider,
}

impl DagCase {
    pub const ALL: [DagCase; 3] = [
        DagCase::QueryChildOfLabel,
        DagCase::QueryParentOfLabel,
        DagCase::QueryCollider,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DagCase::QueryChildOfLabel => "query-child-of-label",
            DagCase::QueryParentOfLabel => "query-parent-of-label",
            DagCase::QueryCollider => "query-collider",
        }
    }
}

/// Faithfulness evidence for a generated scenario: the witnessed dependence
/// margins and the exact entropy drops for `t = 0..=3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessReport {
    pub x_env_dependence: f64,
    pub i_y_e_given_x: f64,
    pub drops: Vec<f64>,
}

impl FaithfulnessReport {
    pub fn is_faithful(&self) -> bool {
        self.x_env_dependence > CI_TOL
            && self.i_y_e_given_x > CI_TOL
            && self.drops.iter().all(|&d| d > MIN_DROP)
    }
}

/// Compute the faithfulness evidence for any spec.
pub fn faithfulness_report(spec: &BayesNetSpec) -> FaithfulnessReport {
    let mut x_dep = 0.0f64;
    for x in 0..spec.n_symbols() {
        let marginal = spec.x_marginal(x);
        for e in 0..spec.n_envs() {
            x_dep = x_dep.max((spec.x_given_e[e][x] - marginal).abs());
        }
    }
    let i = (h_y_given_x(spec) - h_y_given_x_e(spec)).max(0.0);
    let mut drops = Vec::with_capacity(3);
    let mut prev = conditional_entropy_exact(spec, 0);
    for t in 1..=3 {
        let h = conditional_entropy_exact(spec, t);
        drops.push(prev - h);
        prev = h;
    }
    FaithfulnessReport { x_env_dependence: x_dep, i_y_e_given_x: i, drops }
}

/// Generate a binary-variable scenario for `case`, rejecting unfaithful CPT
/// draws. Deterministic given `seed`.
pub fn dag_case_scenario(case: DagCase, seed: u64) -> Result<(BayesNetSpec, FaithfulnessReport)> {
    let mut rng = rng::stream(rng::derive_seed(seed, &[case as u64]));
    const MAX_ATTEMPTS: usize = 500;
    for _ in 0..MAX_ATTEMPTS {
        let spec = draw_case(case, &mut rng);
        let report = faithfulness_report(&spec);
        if report.is_faithful() {
            return Ok((spec, report));
        }
    }
    Err(Error::Scenario {
        scenario: case.name().to_string(),
        reason: format!("no faithful CPT draw in {MAX_ATTEMPTS} attempts"),
    })
}

fn draw_case<R: Rng>(case: DagCase, rng: &mut R) -> BayesNetSpec {
    // Bernoulli parameters kept away from 0, 1/2 and 1 so dependence margins
    // are comfortably above the CI tolerance.
    let mut theta = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    match case {
        DagCase::QueryChildOfLabel => {
            // P(E), P(Y|E), P(X|Y); X depends on E only through Y.
            let pe = theta(0.3, 0.7);
            let py_e = [theta(0.05, 0.35), theta(0.65, 0.95)];
            let px_y = [theta(0.05, 0.35), theta(0.65, 0.95)];
            let env_prior = exact_simplex(&[1.0 - pe, pe]);
            let mut x_given_e = Vec::new();
            let mut y_given_xe = Vec::new();
            for e in 0..2 {
                let py1 = py_e[e];
                let px1 = |y: usize| px_y[y];
                // P(x|e) = sum_y P(y|e) P(x|y)
                let px1_e = (1.0 - py1) * px1(0) + py1 * px1(1);
                x_given_e.push(exact_simplex(&[1.0 - px1_e, px1_e]));
                let mut rows = Vec::new();
                for x in 0..2 {
                    // P(y|x,e) ~ P(y|e) P(x|y)
                    let lx = |y: usize| if x == 1 { px1(y) } else { 1.0 - px1(y) };
                    let w0 = (1.0 - py1) * lx(0);
                    let w1 = py1 * lx(1);
                    rows.push(exact_simplex(&[w0, w1]));
                }
                y_given_xe.push(rows);
            }
            BayesNetSpec::new(env_prior, x_given_e, y_given_xe).expect("valid by construction")
        }
        DagCase::QueryParentOfLabel => {
            // P(E), P(X|E), P(Y|X,E): already in spec form.
            let pe = theta(0.3, 0.7);
            let px_e = [theta(0.05, 0.35), theta(0.65, 0.95)];
            let py_xe: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| theta(0.05, 0.95)).collect())
                .collect();
            let env_prior = exact_simplex(&[1.0 - pe, pe]);
            let x_given_e: Vec<Vec<f64>> =
                (0..2).map(|e| exact_simplex(&[1.0 - px_e[e], px_e[e]])).collect();
            let y_given_xe: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|e| {
                    (0..2)
                        .map(|x| exact_simplex(&[1.0 - py_xe[e][x], py_xe[e][x]]))
                        .collect()
                })
                .collect();
            BayesNetSpec::new(env_prior, x_given_e, y_given_xe).expect("valid by construction")
        }
        DagCase::QueryCollider => {
            // P(E), P(Y) shared across environments, P(X|Y,E).
            let pe = theta(0.3, 0.7);
            let py = theta(0.3, 0.7);
            let px_ye: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| theta(0.05, 0.95)).collect())
                .collect();
            let env_prior = exact_simplex(&[1.0 - pe, pe]);
            let mut x_given_e = Vec::new();
            let mut y_given_xe = Vec::new();
            for e in 0..2 {
                let px1 = |y: usize| px_ye[e][y];
                let px1_e = (1.0 - py) * px1(0) + py * px1(1);
                x_given_e.push(exact_simplex(&[1.0 - px1_e, px1_e]));
                let mut rows = Vec::new();
                for x in 0..2 {
                    let lx = |y: usize| if x == 1 { px1(y) } else { 1.0 - px1(y) };
                    rows.push(exact_simplex(&[(1.0 - py) * lx(0), py * lx(1)]));
                }
                y_given_xe.push(rows);
            }
            BayesNetSpec::new(env_prior, x_given_e, y_given_xe).expect("valid by construction")
        }
    }
}

/// Normalize and nudge so the row sums to one bit-exactly.
fn exact_simplex(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut row: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let drift: f64 = row.iter().sum::<f64>() - 1.0;
    if drift != 0.0 {
        let imax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        row[imax] -= drift;
    }
    row
}
