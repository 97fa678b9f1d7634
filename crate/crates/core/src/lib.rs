//! Differentially private stochastic variational inference for latent
//! Dirichlet allocation.
//!
//! Each minibatch's expected sufficient statistics are perturbed with a
//! calibrated Gaussian mechanism before the stochastic M-step. The noise
//! level comes from [`privacy::solve_budget`], which maps a total
//! `(epsilon, delta)` budget to a per-iteration budget using zCDP
//! composition and amplification by subsampling, with linear and advanced
//! composition available as baselines.
//!
//! Modules, bottom up:
//!
//! - [`corpus`]: sparse bag-of-words documents, vocabulary, truncation and
//!   minibatch sampling.
//! - [`privacy`]: Gaussian calibration, zCDP calculus, the budget solver
//!   and the forward accountant.
//! - [`vi`]: Dirichlet expectations, the per-document E-step, sufficient
//!   statistics, perturbation and the M-step.
//! - [`trainer`]: the training loop, held-out perplexity, top words and
//!   the on-disk model and trace formats.
//! - [`synthetic`]: LDA-generated corpora with known topics.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod privacy;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod vi;

pub use corpus::{Corpus, CorpusError, Document, MinibatchSpec, Vocabulary};
pub use privacy::{
    AccountantLedger, BudgetSpec, CompositionMethod, DpBudget, PerIterationBudget, PrivacyError,
    ZcdpBudget,
};
pub use trainer::{TrainError, TrainOutput, TrainerConfig, TrainingTrace};
pub use vi::{ExpectedLogBeta, LocalPosterior, SufficientStats, TopicMatrix, VariationalError};
