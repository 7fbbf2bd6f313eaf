//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the lab's operations.
///
/// Variants mirror the contract violations of each subsystem rather than the
/// call sites, so callers can match on the failure mode they care about.
#[derive(Debug, Error)]
pub enum Error {
    // ── datasets and sequences ────────────────────────────────────────
    #[error("unknown environment id {0}")]
    UnknownEnvironment(u32),
    #[error("environment {0} holds no examples")]
    EmptyEnvironment(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence length must be positive")]
    ZeroLengthSequence,
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("predictive distribution invalid: {0}")]
    InvalidDistribution(String),
    #[error("predicted probability of the true label {label} is zero at step {step}")]
    InfiniteLoss { step: usize, label: usize },

    // ── discrete inference ────────────────────────────────────────────
    #[error("symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutsideAlphabet { symbol: usize, alphabet: usize },
    #[error("context has zero likelihood under every environment")]
    ImpossibleContext,
    #[error("table row does not sum to one: {0}")]
    InvalidTable(String),

    // ── Gaussian parameters and fits ──────────────────────────────────
    #[error("covariance for class {class} is not SPD (min eigenvalue {min_eig:.3e})")]
    NotSpd { class: usize, min_eig: f64 },
    #[error("invalid environment parameters: {0}")]
    InvalidEnvParams(String),
    #[error("flat parameter vector has length {got}, expected {expected}")]
    FlatLengthMismatch { got: usize, expected: usize },
    #[error("class {label} has {count} examples; need at least 2")]
    ClassUnderrepresented { label: usize, count: usize },
    #[error("context of {0} points is too short to fit a two-component mixture (need >= 4)")]
    ContextTooShort(usize),

    // ── linear regression ─────────────────────────────────────────────
    #[error("second-moment matrix is singular")]
    SingularMoments,
    #[error("design matrix is rank deficient; offending feature columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("finite lookup table underspecified: {0}")]
    TableUnderspecified(String),
    #[error("empty grid")]
    EmptyGrid,

    // ── training ──────────────────────────────────────────────────────
    #[error("training diverged at step {step} with loss {loss:.3e}")]
    Diverged { step: usize, loss: f64 },

    // ── runner / IO ───────────────────────────────────────────────────
    #[error("config error: {0}")]
    Config(String),
    #[error("scenario `{scenario}` failed: {reason}")]
    Scenario { scenario: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
