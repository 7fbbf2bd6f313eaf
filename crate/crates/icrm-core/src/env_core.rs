//! Environment-indexed datasets, sequence samplers, and the autoregressive
//! loss harness that every predictor plugs into.
//!
//! A dataset is a collection of `(x, y, e)` triplets grouped by environment.
//! Training sequences are drawn either from a single environment (the default
//! regime) or from the pooled dataset (the "mix" ablation). Predictors are
//! plain functions from `(query, context)` to a distribution over labels and
//! are scored by the summed cross-entropy along a sequence, where the context
//! at step `j` is the unlabeled prefix `x_1 .. x_{j-1}` and the first context
//! is empty.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Probabilities below this are clamped before taking logs, and losses report
/// how often clamping fired. Exact zeros are rejected instead of clamped.
pub const PROB_CLAMP: f64 = 1e-12;

/// Opaque environment identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct EnvId(pub u32);

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One observation: feature vector, label, and source environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
    pub e: EnvId,
}

/// Ordered unlabeled inputs preceding a query.
///
/// May be empty (the zero-context case). `env_hint` is diagnostic only;
/// predictors never read it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextWindow {
    pub items: Vec<Vec<f64>>,
    pub env_hint: Option<EnvId>,
}

impl ContextWindow {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(items: Vec<Vec<f64>>) -> Self {
        Self { items, env_hint: None }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How a training sequence was sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// All items drawn from the one named environment.
    EnvPure(EnvId),
    /// Items drawn iid from the pooled dataset.
    Mix,
}

/// An input/target sequence of equal lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub provenance: Provenance,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Context seen by the predictor at step `j` (0-based): inputs `0..j`.
    pub fn context_at(&self, j: usize) -> ContextWindow {
        let mut w = ContextWindow::new(self.inputs[..j].to_vec());
        if let Provenance::EnvPure(e) = self.provenance {
            w.env_hint = Some(e);
        }
        w
    }
}

/// Probability vector over the `K` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// Validates entries in `[0, 1]` and a total of one within `1e-12`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no labels".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "sum {total} deviates from 1 by more than 1e-12"
            )));
        }
        Ok(Self { probs })
    }

    /// Point mass on one label.
    pub fn delta(label: usize, n_labels: usize) -> Self {
        let mut probs = vec![0.0; n_labels];
        probs[label] = 1.0;
        Self { probs }
    }

    pub fn uniform(n_labels: usize) -> Self {
        Self { probs: vec![1.0 / n_labels as f64; n_labels] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_labels(&self) -> usize {
        self.probs.len()
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Cross-entropy `-ln p[label]` in nats with clamped probability.
    ///
    /// Returns the loss and whether the clamp fired. An exact zero on the
    /// true label is the caller's error to surface, so it is not clamped
    /// here; see [`autoregressive_loss`].
    pub fn cross_entropy(&self, label: usize) -> (f64, bool) {
        let p = self.probs[label];
        let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        (-clamped.ln(), clamped != p)
    }
}

/// A predictor maps `(query, context)` to a label distribution.
pub trait Predictor {
    fn predict(&self, x: &[f64], context: &ContextWindow) -> Result<PredictiveDistribution>;
}

impl<F> Predictor for F
where
    F: Fn(&[f64], &ContextWindow) -> Result<PredictiveDistribution>,
{
    fn predict(&self, x: &[f64], context: &ContextWindow) -> Result<PredictiveDistribution> {
        self(x, context)
    }
}

/// Environment-indexed dataset with a consistent feature dimension and label
/// count.
#[derive(Debug, Clone)]
pub struct Dataset {
    envs: BTreeMap<EnvId, Vec<LabeledExample>>,
    dim: usize,
    n_labels: usize,
    n_total: usize,
}

impl Dataset {
    /// Build from triplets; the label count is inferred as `max(y) + 1`.
    pub fn from_examples(examples: Vec<LabeledExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n_labels = examples.iter().map(|ex| ex.y).max().unwrap() + 1;
        Self::from_examples_with_labels(examples, n_labels)
    }

    /// Build with an explicit label count `K`; every `y` must be `< K`.
    pub fn from_examples_with_labels(
        examples: Vec<LabeledExample>,
        n_labels: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = examples[0].x.len();
        let mut envs: BTreeMap<EnvId, Vec<LabeledExample>> = BTreeMap::new();
        for (index, ex) in examples.into_iter().enumerate() {
            if ex.x.len() != dim {
                return Err(Error::InvalidExample {
                    index,
                    reason: format!("dimension {} != {}", ex.x.len(), dim),
                });
            }
            if ex.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidExample { index, reason: "non-finite feature".into() });
            }
            if ex.y >= n_labels {
                return Err(Error::InvalidExample {
                    index,
                    reason: format!("label {} >= K = {}", ex.y, n_labels),
                });
            }
            envs.entry(ex.e).or_default().push(ex);
        }
        let n_total = envs.values().map(Vec::len).sum();
        Ok(Self { envs, dim, n_labels, n_total })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn len(&self) -> usize {
        self.n_total
    }

    pub fn is_empty(&self) -> bool {
        self.n_total == 0
    }

    pub fn env_ids(&self) -> impl Iterator<Item = EnvId> + '_ {
        self.envs.keys().copied()
    }

    pub fn env_examples(&self, env: EnvId) -> Result<&[LabeledExample]> {
        self.envs
            .get(&env)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownEnvironment(env.0))
    }

    pub fn pooled(&self) -> impl Iterator<Item = &LabeledExample> {
        self.envs.values().flatten()
    }

    /// Load from JSON lines, one `{"x": [..], "y": int, "e": int}` per line.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut examples = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str::<LabeledExample>(&line)?);
        }
        Self::from_examples(examples)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ex in self.pooled() {
            serde_json::to_writer(&mut file, ex)?;
            writeln!(file)?;
        }
        Ok(())
    }
}

/// Draw a length-`t` sequence from one environment, with replacement.
///
/// Deterministic given `seed`; every item carries the environment's
/// provenance.
pub fn sample_icrm_sequence(
    dataset: &Dataset,
    env: EnvId,
    t: usize,
    seed: u64,
) -> Result<Sequence> {
    if t == 0 {
        return Err(Error::ZeroLengthSequence);
    }
    let pool = dataset.env_examples(env)?;
    if pool.is_empty() {
        return Err(Error::EmptyEnvironment(env.0));
    }
    let mut rng = rng::stream(seed);
    let mut inputs = Vec::with_capacity(t);
    let mut targets = Vec::with_capacity(t);
    for _ in 0..t {
        let ex = &pool[rng.random_range(0..pool.len())];
        inputs.push(ex.x.clone());
        targets.push(ex.y);
    }
    Ok(Sequence { inputs, targets, provenance: Provenance::EnvPure(env) })
}

/// Draw a length-`t` sequence iid from the pooled multiset of all
/// environments.
pub fn sample_mix_sequence(dataset: &Dataset, t: usize, seed: u64) -> Result<Sequence> {
    if t == 0 {
        return Err(Error::ZeroLengthSequence);
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool: Vec<&LabeledExample> = dataset.pooled().collect();
    let mut rng = rng::stream(seed);
    let mut inputs = Vec::with_capacity(t);
    let mut targets = Vec::with_capacity(t);
    for _ in 0..t {
        let ex = pool[rng.random_range(0..pool.len())];
        inputs.push(ex.x.clone());
        targets.push(ex.y);
    }
    Ok(Sequence { inputs, targets, provenance: Provenance::Mix })
}

/// Loss of one sequence broken down per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_step: Vec<f64>,
    /// Steps where the true-label probability was clamped before the log.
    pub clamped_steps: usize,
}

/// Summed cross-entropy of `predictor` along `seq`, in nats.
///
/// Step `j` scores the prediction for `inputs[j]` given the unlabeled prefix
/// `inputs[..j]`; the first step sees an empty context. A predicted
/// probability of exactly zero on the true label is an error, not a silent
/// infinity; positive probabilities below [`PROB_CLAMP`] are clamped and
/// counted.
pub fn autoregressive_loss<P: Predictor>(predictor: &P, seq: &Sequence) -> Result<f64> {
    autoregressive_loss_detailed(predictor, seq).map(|b| b.total)
}

/// As [`autoregressive_loss`], also reporting per-step losses and clamps.
pub fn autoregressive_loss_detailed<P: Predictor>(
    predictor: &P,
    seq: &Sequence,
) -> Result<LossBreakdown> {
    let mut per_step = Vec::with_capacity(seq.len());
    let mut clamped_steps = 0;
    for j in 0..seq.len() {
        let context = seq.context_at(j);
        let dist = predictor.predict(&seq.inputs[j], &context)?;
        let label = seq.targets[j];
        if dist.probs()[label] == 0.0 {
            return Err(Error::InfiniteLoss { step: j, label });
        }
        let (loss, clamped) = dist.cross_entropy(label);
        if clamped {
            clamped_steps += 1;
        }
        per_step.push(loss);
    }
    Ok(LossBreakdown { total: per_step.iter().sum(), per_step, clamped_steps })
}
