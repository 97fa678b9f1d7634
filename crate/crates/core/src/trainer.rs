//! The private training loop and its evaluation artifacts.

use std::io::{self, BufRead, Write};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Corpus, CorpusError, Document, MinibatchSpec, Vocabulary};
use crate::privacy::{
    self, AccountantLedger, BudgetSpec, CompositionMethod, DpBudget, PerIterationBudget,
    PrivacyError,
};
use crate::rng::{self, StreamPurpose};
use crate::vi::{self, BatchItem, EStepOptions, TopicMatrix, VariationalError};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const TRACE_HEADER: &str = "iteration,docs_seen,perplexity,epsilon_spent";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("model file: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Total privacy target of a run. `method = None` trains without noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySettings {
    pub method: CompositionMethod,
    pub epsilon_tot: f64,
    pub delta_tot: f64,
}

impl PrivacySettings {
    pub fn none() -> Self {
        Self {
            method: CompositionMethod::None,
            epsilon_tot: 0.0,
            delta_tot: 0.0,
        }
    }

    pub fn new(method: CompositionMethod, epsilon_tot: f64, delta_tot: f64) -> Self {
        Self {
            method,
            epsilon_tot,
            delta_tot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub topics: usize,
    pub batch_size: usize,
    /// Documents longer than this are subsampled down to it.
    pub max_doc_len: u64,
    pub iterations: u64,
    pub alpha: f64,
    pub eta: f64,
    pub tau0: f64,
    pub kappa: f64,
    pub seed: u64,
    pub privacy: PrivacySettings,
    pub eval_every: u64,
    pub tol: f64,
    pub max_inner: usize,
}

impl TrainerConfig {
    /// Defaults: `alpha = eta = 1/K`, `tau0 = 1024`, `kappa = 0.7`,
    /// E-step tolerance `1e-3` with at most 100 sweeps, a checkpoint every
    /// `max(1, J/20)` iterations, and no privacy.
    pub fn new(topics: usize, batch_size: usize, max_doc_len: u64, iterations: u64) -> Self {
        let k = topics.max(1) as f64;
        Self {
            topics,
            batch_size,
            max_doc_len,
            iterations,
            alpha: 1.0 / k,
            eta: 1.0 / k,
            tau0: 1024.0,
            kappa: 0.7,
            seed: 0,
            privacy: PrivacySettings::none(),
            eval_every: default_eval_every(iterations),
            tol: 1e-3,
            max_inner: 100,
        }
    }

    pub fn e_step_options(&self) -> EStepOptions {
        EStepOptions {
            alpha: self.alpha,
            tol: self.tol,
            max_inner: self.max_inner,
        }
    }

    pub fn validate(&self, doc_count: usize) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.topics == 0 {
            return fail("topics must be >= 1".into());
        }
        if self.batch_size == 0 || self.batch_size > doc_count {
            return fail(format!(
                "batch size {} must lie in 1..={doc_count}",
                self.batch_size
            ));
        }
        if self.max_doc_len == 0 {
            return fail("max document length must be >= 1".into());
        }
        for (name, x) in [("alpha", self.alpha), ("eta", self.eta)] {
            if !(x > 0.0 && x.is_finite()) {
                return fail(format!("{name} must be positive, got {x}"));
            }
        }
        if !(self.tau0 >= 0.0) {
            return fail(format!("tau0 must be >= 0, got {}", self.tau0));
        }
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return fail(format!("kappa must lie in (0.5, 1], got {}", self.kappa));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if !(self.tol > 0.0) || self.max_inner == 0 {
            return fail("E-step tolerance and sweep limit must be positive".into());
        }
        Ok(())
    }

    /// The budget spec the run spends against, or `None` for a
    /// non-private run. Sensitivity is `N / S` and the sampling ratio `S / D`.
    pub fn budget_spec(&self, doc_count: usize) -> Option<BudgetSpec> {
        self.privacy.method.is_private().then(|| BudgetSpec {
            epsilon_tot: self.privacy.epsilon_tot,
            delta_tot: self.privacy.delta_tot,
            iterations: self.iterations,
            sampling_ratio: self.batch_size as f64 / doc_count as f64,
            sensitivity: vi::sensitivity_bound(self.max_doc_len, self.batch_size),
            method: self.privacy.method,
        })
    }
}

pub fn default_eval_every(iterations: u64) -> u64 {
    (iterations / 20).max(1)
}

/// Number of iterations needed to see `docs` documents at batch size `S`.
pub fn iterations_for_docs(docs: u64, batch_size: usize) -> u64 {
    docs.div_ceil(batch_size as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u64,
    pub docs_seen: u64,
    pub perplexity: Option<f64>,
    pub epsilon_spent: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainingTrace {
    /// CSV with header `iteration,docs_seen,perplexity,epsilon_spent`.
    /// A missing perplexity is written as an empty field.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> io::Result<()> {
        writeln!(writer, "{TRACE_HEADER}")?;
        for c in &self.checkpoints {
            let perplexity = c.perplexity.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                writer,
                "{},{},{},{}",
                c.iteration, c.docs_seen, perplexity, c.epsilon_spent
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TopicMatrix,
    pub trace: TrainingTrace,
    /// Present for private runs; one entry per completed iteration.
    pub ledger: Option<AccountantLedger>,
    pub budget_spec: Option<BudgetSpec>,
    pub budget: Option<PerIterationBudget>,
}

/// Initial topics: entries uniform on `[eta + 0.5, eta + 1.5]`, scaled by
/// `D N / (K V)` so the total mass is on the order of the words seen by a
/// full pass. Only public quantities enter the scale.
pub fn init_topics(config: &TrainerConfig, doc_count: usize, vocab_size: usize) -> TopicMatrix {
    let mut rng = rng::stream(config.seed, StreamPurpose::Init, 0);
    let scale =
        doc_count as f64 * config.max_doc_len as f64 / (config.topics as f64 * vocab_size as f64);
    let lambda = Array2::from_shape_simple_fn((config.topics, vocab_size), || {
        scale * (config.eta + 0.5 + rng.gen::<f64>())
    });
    TopicMatrix::new(lambda).expect("positive initialization")
}

/// Runs `J` iterations of: sample a minibatch, truncate its documents,
/// fit local posteriors, aggregate statistics, perturb them (private runs
/// only), and blend them into the topics.
///
/// For private runs the budget is solved before any document is read, and
/// an infeasible budget aborts the run. `eval_docs`, when given, is scored
/// at every checkpoint.
pub fn train(
    corpus: &Corpus,
    config: &TrainerConfig,
    eval_docs: Option<&[Document]>,
) -> Result<TrainOutput, TrainError> {
    let doc_count = corpus.doc_count();
    let vocab_size = corpus.vocab_size();
    config.validate(doc_count)?;
    if let Some(docs) = eval_docs {
        if docs.is_empty() {
            return Err(TrainError::EmptyTestSet);
        }
    }

    let budget_spec = config.budget_spec(doc_count);
    let budget = budget_spec
        .as_ref()
        .map(privacy::solve_budget)
        .transpose()?;
    let mut ledger = match &budget_spec {
        Some(spec) => Some(AccountantLedger::new(spec.method, spec.delta_tot)?),
        None => None,
    };

    let batches = MinibatchSpec::new(config.batch_size, doc_count, config.seed)?;
    let opts = config.e_step_options();
    let mut model = init_topics(config, doc_count, vocab_size);
    let mut trace = TrainingTrace::default();

    for t in 1..=config.iterations {
        let elog_beta = model.expected_log_beta();
        let batch = corpus::sample_minibatch(corpus, &batches, t)?;
        let fitted = batch
            .par_iter()
            .map(|&id| {
                let doc = corpus::truncate_by_id(
                    &corpus.documents()[id],
                    config.max_doc_len,
                    config.seed,
                    id,
                );
                let posterior = vi::e_step_document(&doc, &elog_beta, &opts)?;
                Ok((id, doc, posterior))
            })
            .collect::<Result<Vec<_>, VariationalError>>()?;
        let items: Vec<BatchItem<'_>> = fitted
            .iter()
            .map(|(id, doc, posterior)| BatchItem {
                doc_id: *id,
                doc,
                posterior,
            })
            .collect();
        let mut stats = vi::aggregate_stats(&items, config.topics, vocab_size, config.batch_size)?;

        if let (Some(spec), Some(budget), Some(ledger)) = (&budget_spec, &budget, ledger.as_mut()) {
            let mut noise = rng::stream(config.seed, StreamPurpose::Noise, t);
            stats = vi::perturb_stats(&stats, budget.sigma, &mut noise)?;
            ledger.record(
                t,
                spec.sensitivity,
                budget.sigma,
                budget.delta_iter,
                spec.sampling_ratio,
            )?;
        }

        let rate = vi::learning_rate(t, config.tau0, config.kappa);
        model = vi::m_step(&model, &stats, config.eta, doc_count, rate)?;

        if t % config.eval_every == 0 || t == config.iterations {
            let perplexity = eval_docs
                .map(|docs| heldout_perplexity(docs, &model, &opts))
                .transpose()?;
            trace.checkpoints.push(Checkpoint {
                iteration: t,
                docs_seen: t * config.batch_size as u64,
                perplexity,
                epsilon_spent: ledger.as_ref().map_or(0.0, |l| l.accounted().epsilon),
            });
        }
    }

    Ok(TrainOutput {
        model,
        trace,
        ledger,
        budget_spec,
        budget,
    })
}

/// Per-word perplexity bound `exp(-sum_d ELBO_d / sum_d n_d)` of held-out
/// documents, with each document's local posterior fitted by the E-step
/// against the trained topics.
pub fn heldout_perplexity(
    docs: &[Document],
    model: &TopicMatrix,
    opts: &EStepOptions,
) -> Result<f64, TrainError> {
    if docs.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let elog_beta = model.expected_log_beta();
    let bounds = docs
        .par_iter()
        .map(|doc| {
            let post = vi::e_step_document(doc, &elog_beta, opts)?;
            vi::document_bound(doc, &post.gamma, &elog_beta, opts.alpha)
        })
        .collect::<Result<Vec<f64>, VariationalError>>()?;
    let bound: f64 = bounds.iter().sum();
    let words: u64 = docs.iter().map(Document::total_words).sum();
    Ok((-bound / words as f64).exp())
}

/// The `n` most probable terms of every topic, ties broken by term id.
pub fn top_words(
    model: &TopicMatrix,
    vocab: &Vocabulary,
    n: usize,
) -> Result<Vec<Vec<(String, f64)>>, TrainError> {
    if vocab.len() != model.vocab_size() {
        return Err(TrainError::Config(format!(
            "vocabulary has {} terms but the model has {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let n = n.min(vocab.len());
    let probs = model.normalized();
    Ok(probs
        .outer_iter()
        .map(|row| {
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ids.into_iter()
                .take(n)
                .map(|id| (vocab.terms()[id].clone(), row[id]))
                .collect()
        })
        .collect())
}

/// Renders top words as `topic k:` blocks of `term probability` lines,
/// probabilities to four decimals.
pub fn format_top_words(tables: &[Vec<(String, f64)>]) -> String {
    let mut out = String::new();
    for (k, rows) in tables.iter().enumerate() {
        out.push_str(&format!("topic {k}:\n"));
        for (term, p) in rows {
            out.push_str(&format!("{term} {p:.4}\n"));
        }
    }
    out
}

/// On-disk model: topics plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub format_version: u32,
    pub topics: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub eta: f64,
    /// Row-major, one row per topic.
    pub lambda: Vec<Vec<f64>>,
    pub budget_spec: Option<BudgetSpec>,
    pub per_iteration: Option<PerIterationBudget>,
    pub accounted: Option<DpBudget>,
}

impl ModelDump {
    pub fn from_output(output: &TrainOutput, config: &TrainerConfig) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            topics: output.model.topics(),
            vocab_size: output.model.vocab_size(),
            alpha: config.alpha,
            eta: config.eta,
            lambda: output.model.rows(),
            budget_spec: output.budget_spec,
            per_iteration: output.budget,
            accounted: output.ledger.as_ref().map(AccountantLedger::accounted),
        }
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<(), TrainError> {
        serde_json::to_writer_pretty(&mut writer, self)
            .map_err(|e| TrainError::Model(e.to_string()))?;
        writeln!(writer)?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, TrainError> {
        let dump: Self =
            serde_json::from_reader(reader).map_err(|e| TrainError::Model(e.to_string()))?;
        if dump.format_version != MODEL_FORMAT_VERSION {
            return Err(TrainError::Model(format!(
                "unsupported format version {}",
                dump.format_version
            )));
        }
        if dump.lambda.len() != dump.topics
            || dump.lambda.iter().any(|r| r.len() != dump.vocab_size)
        {
            return Err(TrainError::Model(format!(
                "lambda does not match declared shape {} x {}",
                dump.topics, dump.vocab_size
            )));
        }
        Ok(dump)
    }

    pub fn topic_matrix(&self) -> Result<TopicMatrix, TrainError> {
        Ok(TopicMatrix::from_rows(self.lambda.clone())?)
    }
}
