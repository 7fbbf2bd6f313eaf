//! A desk-scale laboratory for in-context risk minimization.
//!
//! The crate studies one question on synthetic multi-environment data: what
//! does a predictor gain by paying attention to the unlabeled examples that
//! precede a query? It provides
//!
//! * [`env_core`] — environment-indexed datasets, sequence samplers, and the
//!   autoregressive cross-entropy harness all predictors plug into;
//! * [`discrete_zoom`] — exact in-context prediction on enumerated discrete
//!   joints, with conditional-entropy curves that quantify how fast context
//!   closes the gap between the pooled and the per-environment predictor;
//! * [`gaussian`] — the label-conditional Gaussian data generation process,
//!   parameter-space geometry with label-swap permutations, and the
//!   test-time algorithm that fits a two-component mixture and matches it to
//!   the nearest training environment;
//! * [`linear`] — closed-form analysis of pooled least squares versus
//!   regression on the context-extended feature space, including the bias of
//!   the pooled coefficient and test-error curves;
//! * [`amortized`] — a trainable kernel-attention in-context learner with
//!   hand-derived gradients, the mean-embedding baseline it is compared
//!   against, and the rank-counting task where mean embeddings provably
//!   collide;
//! * [`runner`] — declarative experiment configs, deterministic seeding, and
//!   CSV/JSON reports.

pub mod amortized;
pub mod discrete_zoom;
pub mod env_core;
pub mod error;
pub mod gaussian;
pub mod linear;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
