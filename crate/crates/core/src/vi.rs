//! Variational updates for LDA.
//!
//! The global posterior over topics is a Dirichlet per topic with
//! parameters `lambda` (K x V). Each document gets a local Dirichlet over
//! topic proportions (`gamma`) and, per distinct term, a categorical over
//! topics (`phi`). The E-step fits the local posteriors against
//! `E[log beta]`; the minibatch's expected sufficient statistics are the
//! only data-dependent quantity the M-step sees, and are what gets
//! perturbed for privacy.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::corpus::Document;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Global variational Dirichlet parameters, one row per topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicMatrix {
    lambda: Array2<f64>,
}

impl TopicMatrix {
    pub fn new(lambda: Array2<f64>) -> Result<Self, VariationalError> {
        let (k, v) = lambda.dim();
        if k == 0 || v < 2 {
            return Err(VariationalError::Dimension(format!(
                "topic matrix must be at least 1 x 2, got {k} x {v}"
            )));
        }
        if let Some(bad) = lambda.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(VariationalError::Domain(format!(
                "topic matrix entries must be positive and finite, found {bad}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, VariationalError> {
        let k = rows.len();
        let v = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != v) {
            return Err(VariationalError::Dimension("ragged topic rows".into()));
        }
        let flat = rows.into_iter().flatten().collect();
        let lambda = Array2::from_shape_vec((k, v), flat)
            .map_err(|e| VariationalError::Dimension(e.to_string()))?;
        Self::new(lambda)
    }

    pub fn topics(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn lambda(&self) -> &Array2<f64> {
        &self.lambda
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.lambda.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Row-normalized topic-word probabilities.
    pub fn normalized(&self) -> Array2<f64> {
        let mut p = self.lambda.clone();
        for mut row in p.outer_iter_mut() {
            let total: f64 = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        p
    }

    pub fn expected_log_beta(&self) -> ExpectedLogBeta {
        let mut elog = Array2::zeros(self.lambda.dim());
        for (src, mut dst) in self.lambda.outer_iter().zip(elog.outer_iter_mut()) {
            let row = dirichlet_expectation(src);
            dst.assign(&ndarray::Array1::from(row));
        }
        ExpectedLogBeta { elog_beta: elog }
    }
}

/// `E[log beta_kv]` under `q(beta_k) = Dirichlet(lambda_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLogBeta {
    elog_beta: Array2<f64>,
}

impl ExpectedLogBeta {
    pub fn from_array(elog_beta: Array2<f64>) -> Self {
        Self { elog_beta }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.elog_beta
    }

    pub fn topics(&self) -> usize {
        self.elog_beta.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.elog_beta.ncols()
    }
}

/// `psi(params_v) - psi(sum params)` for each coordinate.
pub fn expected_log_dirichlet(params: &[f64]) -> Result<Vec<f64>, VariationalError> {
    if params.is_empty() {
        return Err(VariationalError::Dimension(
            "empty Dirichlet parameter".into(),
        ));
    }
    if let Some(bad) = params.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
        return Err(VariationalError::Domain(format!(
            "Dirichlet parameters must be positive, found {bad}"
        )));
    }
    Ok(dirichlet_expectation(ArrayView1::from(params)))
}

fn dirichlet_expectation(params: ArrayView1<'_, f64>) -> Vec<f64> {
    let psi_total = digamma(params.sum());
    params.iter().map(|&x| digamma(x) - psi_total).collect()
}

/// Local posterior of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPosterior {
    /// Dirichlet parameters of `q(theta_d)`, length K.
    pub gamma: Vec<f64>,
    /// One length-K topic distribution per distinct term of the document,
    /// aligned with `Document::entries`.
    pub phi: Vec<Vec<f64>>,
    /// Fixed-point sweeps performed.
    pub sweeps: usize,
}

/// Inner-loop controls of the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepOptions {
    pub alpha: f64,
    /// Stop once the mean absolute change of gamma drops below this.
    pub tol: f64,
    pub max_inner: usize,
}

impl EStepOptions {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            tol: 1e-3,
            max_inner: 100,
        }
    }
}

/// Writes the normalized topic responsibilities for one term into `out`,
/// given `E[log theta]`. Normalization happens in log space after
/// subtracting the maximum. Returns the log normalizer.
fn responsibilities(
    elog_beta: &Array2<f64>,
    term: usize,
    elog_theta: &[f64],
    out: &mut [f64],
) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = elog_beta[[k, term]] + elog_theta[k];
        max = max.max(*slot);
    }
    let mut total = 0.0;
    for slot in out.iter_mut() {
        *slot = (*slot - max).exp();
        total += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= total;
    }
    max + total.ln()
}

/// Alternates `phi <- normalize(exp(E[log beta] + E[log theta]))` and
/// `gamma <- alpha + sum_n phi` for one document until gamma settles.
///
/// The returned `gamma` is always the update computed from the returned
/// `phi`, so `sum(gamma) = K alpha + total_words` up to rounding.
pub fn e_step_document(
    doc: &Document,
    elog_beta: &ExpectedLogBeta,
    opts: &EStepOptions,
) -> Result<LocalPosterior, VariationalError> {
    let beta = &elog_beta.elog_beta;
    let k = beta.nrows();
    if doc.max_term() >= beta.ncols() {
        return Err(VariationalError::Dimension(format!(
            "document uses term {} but E[log beta] has {} columns",
            doc.max_term(),
            beta.ncols()
        )));
    }
    if !(opts.alpha > 0.0) {
        return Err(VariationalError::Domain(format!(
            "alpha must be positive, got {}",
            opts.alpha
        )));
    }

    let entries = doc.entries();
    let mut gamma = vec![opts.alpha + doc.total_words() as f64 / k as f64; k];
    let mut phi = vec![vec![0.0; k]; entries.len()];
    let mut next = vec![0.0; k];
    let mut sweeps = 0;
    let max_inner = opts.max_inner.max(1);
    while sweeps < max_inner {
        sweeps += 1;
        let elog_theta = dirichlet_expectation(ArrayView1::from(&gamma[..]));
        next.fill(opts.alpha);
        for (row, &(term, count)) in phi.iter_mut().zip(entries) {
            responsibilities(beta, term, &elog_theta, row);
            let weight = f64::from(count);
            for (g, p) in next.iter_mut().zip(row.iter()) {
                *g += weight * p;
            }
        }
        let change: f64 = gamma
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / k as f64;
        std::mem::swap(&mut gamma, &mut next);
        if change < opts.tol {
            break;
        }
    }
    Ok(LocalPosterior { gamma, phi, sweeps })
}

/// Per-document variational lower bound on `log p(w_d | lambda)` with the
/// topic matrix held at its expectation:
/// `E_q[log p(w, theta, z)] - E_q[log q(theta, z)]`, where `phi` is taken
/// at its optimum for `gamma`.
pub fn document_bound(
    doc: &Document,
    gamma: &[f64],
    elog_beta: &ExpectedLogBeta,
    alpha: f64,
) -> Result<f64, VariationalError> {
    let beta = &elog_beta.elog_beta;
    let k = beta.nrows();
    if gamma.len() != k {
        return Err(VariationalError::Dimension(format!(
            "gamma has {} entries for {k} topics",
            gamma.len()
        )));
    }
    if doc.max_term() >= beta.ncols() {
        return Err(VariationalError::Dimension(format!(
            "document uses term {} but E[log beta] has {} columns",
            doc.max_term(),
            beta.ncols()
        )));
    }
    let elog_theta = dirichlet_expectation(ArrayView1::from(gamma));
    let mut scratch = vec![0.0; k];

    // Word terms: sum_v n_v log sum_k exp(E[log theta_k] + E[log beta_kv]).
    let mut bound = 0.0;
    for &(term, count) in doc.entries() {
        bound += f64::from(count) * responsibilities(beta, term, &elog_theta, &mut scratch);
    }

    // E[log p(theta | alpha)] - E[log q(theta | gamma)].
    let gamma_sum: f64 = gamma.iter().sum();
    for (&g, &e) in gamma.iter().zip(&elog_theta) {
        bound += (alpha - g) * e + ln_gamma(g) - ln_gamma(alpha);
    }
    bound += ln_gamma(alpha * k as f64) - ln_gamma(gamma_sum);
    Ok(bound)
}

/// One processed minibatch document. `doc_id` fixes the reduction order.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub doc_id: usize,
    pub doc: &'a Document,
    pub posterior: &'a LocalPosterior,
}

/// Minibatch expected sufficient statistics, already divided by `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    stats: Array2<f64>,
    scale: f64,
}

impl SufficientStats {
    pub fn from_array(stats: Array2<f64>, scale: f64) -> Self {
        Self { stats, scale }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.stats
    }

    /// The `1/S` factor already applied.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn total(&self) -> f64 {
        self.stats.sum()
    }
}

/// `s_kv = (1/S) sum_d count_dv phi_dvk`, reduced in ascending `doc_id`
/// order so the result does not depend on how the batch was scheduled.
pub fn aggregate_stats(
    items: &[BatchItem<'_>],
    topics: usize,
    vocab_size: usize,
    batch_size: usize,
) -> Result<SufficientStats, VariationalError> {
    if batch_size == 0 {
        return Err(VariationalError::Domain(
            "batch size must be positive".into(),
        ));
    }
    let mut order: Vec<&BatchItem<'_>> = items.iter().collect();
    order.sort_by_key(|item| item.doc_id);

    let mut stats = Array2::<f64>::zeros((topics, vocab_size));
    for item in order {
        let entries = item.doc.entries();
        if item.posterior.phi.len() != entries.len() {
            return Err(VariationalError::Dimension(format!(
                "document {} has {} terms but {} phi rows",
                item.doc_id,
                entries.len(),
                item.posterior.phi.len()
            )));
        }
        for (&(term, count), row) in entries.iter().zip(&item.posterior.phi) {
            if term >= vocab_size || row.len() != topics {
                return Err(VariationalError::Dimension(format!(
                    "term {term} / {} topics outside {topics} x {vocab_size}",
                    row.len()
                )));
            }
            let weight = f64::from(count);
            for (k, p) in row.iter().enumerate() {
                stats[[k, term]] += weight * p;
            }
        }
    }
    let scale = 1.0 / batch_size as f64;
    stats.mapv_inplace(|x| x * scale);
    Ok(SufficientStats { stats, scale })
}

/// L2 sensitivity bound `N / S` of the normalized statistics when every
/// document has at most `N` words.
pub fn sensitivity_bound(max_doc_len: u64, batch_size: usize) -> f64 {
    max_doc_len as f64 / batch_size as f64
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate and clamps
/// negative results to zero.
pub fn perturb_stats<R: Rng + ?Sized>(
    stats: &SufficientStats,
    sigma: f64,
    rng: &mut R,
) -> Result<SufficientStats, VariationalError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(VariationalError::Domain(format!(
            "noise scale must be finite and nonnegative, got {sigma}"
        )));
    }
    let noised = stats.stats.mapv(|s| {
        let z: f64 = rng.sample(StandardNormal);
        (s + sigma * z).max(0.0)
    });
    Ok(SufficientStats {
        stats: noised,
        scale: stats.scale,
    })
}

/// Stochastic M-step: blends `lambda_prev` toward `eta + D s`.
pub fn m_step(
    lambda_prev: &TopicMatrix,
    stats: &SufficientStats,
    eta: f64,
    doc_count: usize,
    rate: f64,
) -> Result<TopicMatrix, VariationalError> {
    if lambda_prev.lambda.dim() != stats.stats.dim() {
        return Err(VariationalError::Dimension(format!(
            "lambda is {:?} but statistics are {:?}",
            lambda_prev.lambda.dim(),
            stats.stats.dim()
        )));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(VariationalError::Domain(format!(
            "learning rate must lie in (0, 1], got {rate}"
        )));
    }
    if !(eta > 0.0) {
        return Err(VariationalError::Domain(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let d = doc_count as f64;
    let mut lambda = lambda_prev.lambda.clone();
    ndarray::Zip::from(&mut lambda)
        .and(&stats.stats)
        .for_each(|l, &s| *l = (1.0 - rate) * *l + rate * (eta + d * s));
    TopicMatrix::new(lambda)
}

/// Robbins-Monro step size `(tau0 + t)^-kappa`, capped at 1.
pub fn learning_rate(t: u64, tau0: f64, kappa: f64) -> f64 {
    (tau0 + t as f64).powf(-kappa).min(1.0)
}
