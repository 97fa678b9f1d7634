//! Privacy calculus for the perturbed sufficient statistics.
//!
//! The training loop releases one Gaussian-perturbed statistic per
//! iteration, computed on a uniformly subsampled minibatch. This module
//! calibrates the Gaussian noise, amplifies per-iteration guarantees by the
//! sampling ratio, composes them over iterations (zCDP, linear, or advanced
//! composition), and inverts the whole pipeline so that a total budget can
//! be turned into a per-iteration noise level.
//!
//! All closed forms go through `ln_1p` / `exp_m1` because amplified budgets
//! for small sampling ratios are far below machine epsilon relative to 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("tolerance not amplifiable: delta' / nu = {ratio} must be < 1")]
    ToleranceNotAmplifiable { ratio: f64 },
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("composition method `none` has no privacy budget")]
    NoPrivacy,
}

fn domain(msg: impl Into<String>) -> PrivacyError {
    PrivacyError::Domain(msg.into())
}

fn check_positive(name: &str, x: f64) -> Result<(), PrivacyError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "{name} must be positive and finite, got {x}"
        )))
    }
}

fn check_open_unit(name: &str, x: f64) -> Result<(), PrivacyError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("{name} must lie in (0, 1), got {x}")))
    }
}

/// An `(epsilon, delta)`-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(epsilon >= 0.0) || epsilon.is_infinite() {
            return Err(domain(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(domain(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// A `rho`-zCDP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ZcdpBudget {
    pub rho: f64,
}

impl ZcdpBudget {
    pub fn new(rho: f64) -> Result<Self, PrivacyError> {
        if rho >= 0.0 && rho.is_finite() {
            Ok(Self { rho })
        } else {
            Err(domain(format!("rho must be >= 0, got {rho}")))
        }
    }
}

/// How per-iteration guarantees are composed into a total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMethod {
    /// `(J eps', J delta')`.
    Linear,
    /// `(J eps'(e^eps' - 1) + sqrt(2 J ln(1/delta'')) eps', delta'' + J delta')`.
    Advanced,
    /// Sum of per-iteration rho, converted once at the end.
    Zcdp,
    /// No privatization.
    None,
}

impl CompositionMethod {
    pub const PRIVATE: [CompositionMethod; 3] = [
        CompositionMethod::Zcdp,
        CompositionMethod::Advanced,
        CompositionMethod::Linear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompositionMethod::Linear => "linear",
            CompositionMethod::Advanced => "advanced",
            CompositionMethod::Zcdp => "zcdp",
            CompositionMethod::None => "none",
        }
    }

    pub fn is_private(self) -> bool {
        self != CompositionMethod::None
    }
}

impl fmt::Display for CompositionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompositionMethod {
    type Err = PrivacyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(CompositionMethod::Linear),
            "advanced" | "adv" => Ok(CompositionMethod::Advanced),
            "zcdp" => Ok(CompositionMethod::Zcdp),
            "none" => Ok(CompositionMethod::None),
            other => Err(domain(format!("unknown composition method {other:?}"))),
        }
    }
}

/// A total privacy target together with the mechanism shape that spends it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub epsilon_tot: f64,
    pub delta_tot: f64,
    pub iterations: u64,
    pub sampling_ratio: f64,
    pub sensitivity: f64,
    pub method: CompositionMethod,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        check_positive("epsilon_tot", self.epsilon_tot)?;
        check_open_unit("delta_tot", self.delta_tot)?;
        if self.iterations == 0 {
            return Err(domain("iterations must be >= 1"));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(domain(format!(
                "sampling ratio must lie in (0, 1], got {}",
                self.sampling_ratio
            )));
        }
        check_positive("sensitivity", self.sensitivity)
    }
}

/// Solved per-iteration budget and the noise that realizes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerIterationBudget {
    pub epsilon_iter: f64,
    pub delta_iter: f64,
    /// Noise standard deviation, in the units of the released statistic.
    pub sigma: f64,
}

/// Smallest Gaussian noise scale that makes a query with L2 sensitivity
/// `sensitivity` `(epsilon, delta)`-DP under the classical calibration
/// `sigma^2 >= 2 ln(1.25/delta) sensitivity^2 / epsilon^2`.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    check_positive("sensitivity", sensitivity)?;
    check_positive("epsilon", epsilon)?;
    check_open_unit("delta", delta)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// The epsilon a Gaussian mechanism with scale `sigma` attains at `delta`;
/// the inverse of [`gaussian_sigma`] in its epsilon argument.
pub fn gaussian_epsilon(sensitivity: f64, sigma: f64, delta: f64) -> Result<f64, PrivacyError> {
    check_positive("sensitivity", sensitivity)?;
    check_positive("sigma", sigma)?;
    check_open_unit("delta", delta)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

/// zCDP cost `sensitivity^2 / (2 sigma^2)` of one Gaussian release.
pub fn zcdp_of_gaussian(sensitivity: f64, sigma: f64) -> Result<ZcdpBudget, PrivacyError> {
    check_positive("sensitivity", sensitivity)?;
    if !(sigma > 0.0) {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    // sigma = inf is the no-release limit.
    let ratio = sensitivity / sigma;
    Ok(ZcdpBudget {
        rho: 0.5 * ratio * ratio,
    })
}

/// zCDP composes additively.
pub fn compose_zcdp<I: IntoIterator<Item = ZcdpBudget>>(budgets: I) -> ZcdpBudget {
    ZcdpBudget {
        rho: budgets.into_iter().map(|b| b.rho).sum(),
    }
}

/// `rho`-zCDP implies `(rho + 2 sqrt(rho ln(1/delta)), delta)`-DP.
pub fn zcdp_to_dp(rho: ZcdpBudget, delta: f64) -> Result<DpBudget, PrivacyError> {
    ZcdpBudget::new(rho.rho)?;
    check_open_unit("delta", delta)?;
    let epsilon = rho.rho + 2.0 * (rho.rho * (-delta.ln())).sqrt();
    Ok(DpBudget { epsilon, delta })
}

/// Largest rho whose DP conversion at `delta` stays within `epsilon`.
///
/// With `x = sqrt(rho)` and `L = ln(1/delta)` the conversion reads
/// `x^2 + 2 sqrt(L) x = epsilon`; the positive root is written as
/// `epsilon / (sqrt(L) + sqrt(L + epsilon))` to avoid cancellation.
pub fn dp_to_zcdp(epsilon: f64, delta: f64) -> Result<ZcdpBudget, PrivacyError> {
    check_positive("epsilon", epsilon)?;
    check_open_unit("delta", delta)?;
    let log_inv_delta = -delta.ln();
    let root = epsilon / (log_inv_delta.sqrt() + (log_inv_delta + epsilon).sqrt());
    Ok(ZcdpBudget { rho: root * root })
}

/// Amplification by subsampling: an `(epsilon, delta)`-DP mechanism run on
/// a uniform `nu`-fraction of the data is
/// `(ln(1 + nu (e^epsilon - 1)), nu delta)`-DP.
pub fn amplify(epsilon_iter: f64, delta_iter: f64, nu: f64) -> Result<DpBudget, PrivacyError> {
    if !(epsilon_iter >= 0.0) || epsilon_iter.is_infinite() {
        return Err(domain(format!("epsilon must be >= 0, got {epsilon_iter}")));
    }
    if !(0.0..1.0).contains(&delta_iter) {
        return Err(domain(format!(
            "delta must lie in [0, 1), got {delta_iter}"
        )));
    }
    check_ratio(nu)?;
    // Above 1 the factored form avoids overflowing e^epsilon.
    let epsilon = if epsilon_iter > 1.0 {
        epsilon_iter + (nu + (1.0 - nu) * (-epsilon_iter).exp()).ln()
    } else {
        (nu * epsilon_iter.exp_m1()).ln_1p()
    };
    Ok(DpBudget {
        epsilon,
        delta: nu * delta_iter,
    })
}

/// Inverse of [`amplify`]: the per-iteration budget whose amplified
/// guarantee is exactly `(epsilon_amp, delta_amp)`.
pub fn invert_amplify(
    epsilon_amp: f64,
    delta_amp: f64,
    nu: f64,
) -> Result<(f64, f64), PrivacyError> {
    check_positive("epsilon'", epsilon_amp)?;
    check_open_unit("delta'", delta_amp)?;
    check_ratio(nu)?;
    let delta_iter = delta_amp / nu;
    if delta_iter >= 1.0 {
        return Err(PrivacyError::ToleranceNotAmplifiable { ratio: delta_iter });
    }
    let epsilon_iter = if epsilon_amp > 1.0 {
        let tail = (-epsilon_amp).exp();
        epsilon_amp + ((1.0 - tail) / nu + tail).ln()
    } else {
        (epsilon_amp.exp_m1() / nu).ln_1p()
    };
    if !epsilon_iter.is_finite() {
        return Err(PrivacyError::Infeasible(format!(
            "per-iteration epsilon overflows for epsilon' = {epsilon_amp}, nu = {nu}"
        )));
    }
    Ok((epsilon_iter, delta_iter))
}

fn check_ratio(nu: f64) -> Result<(), PrivacyError> {
    if nu > 0.0 && nu <= 1.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "sampling ratio must lie in (0, 1], got {nu}"
        )))
    }
}

/// Epsilon of `iterations`-fold advanced composition of `(epsilon, .)`-DP
/// mechanisms with slack `delta_slack`.
pub fn advanced_composition_epsilon(epsilon: f64, iterations: u64, delta_slack: f64) -> f64 {
    let j = iterations as f64;
    j * epsilon * epsilon.exp_m1() + (2.0 * j * (-delta_slack.ln())).sqrt() * epsilon
}

/// Advanced composition is increasing in epsilon, so the per-step
/// epsilon is found by bisection. Returns the lower bracket, which never
/// overshoots the target.
fn solve_advanced_epsilon(epsilon_tot: f64, iterations: u64, delta_slack: f64) -> f64 {
    let slope = (2.0 * iterations as f64 * (-delta_slack.ln())).sqrt();
    let mut lo = 0.0;
    // f(x) >= slope * x, so f(epsilon_tot / slope) >= epsilon_tot.
    let mut hi = epsilon_tot / slope;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if advanced_composition_epsilon(mid, iterations, delta_slack) > epsilon_tot {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Per-step amplified budget `(epsilon', delta')` that composes to the total.
pub fn per_step_amplified(spec: &BudgetSpec) -> Result<DpBudget, PrivacyError> {
    spec.validate()?;
    let j = spec.iterations as f64;
    match spec.method {
        CompositionMethod::None => Err(PrivacyError::NoPrivacy),
        CompositionMethod::Linear => Ok(DpBudget {
            epsilon: spec.epsilon_tot / j,
            delta: spec.delta_tot / j,
        }),
        CompositionMethod::Advanced => {
            let delta_slack = spec.delta_tot / 2.0;
            let epsilon = solve_advanced_epsilon(spec.epsilon_tot, spec.iterations, delta_slack);
            if !(epsilon > 0.0) {
                return Err(PrivacyError::Infeasible(format!(
                    "advanced composition leaves no per-step epsilon for J = {}",
                    spec.iterations
                )));
            }
            Ok(DpBudget {
                epsilon,
                delta: spec.delta_tot / (2.0 * j),
            })
        }
        CompositionMethod::Zcdp => {
            // The per-step tolerance delta' in the Gaussian constraint is
            // taken equal to delta_tot.
            let delta = spec.delta_tot;
            let rho_tot = dp_to_zcdp(spec.epsilon_tot, spec.delta_tot)?;
            // tau = J Delta^2 / (2 rho_tot) at equality with
            // tau = 2 ln(1.25/delta') Delta^2 / epsilon'^2; Delta cancels.
            let epsilon = (4.0 * rho_tot.rho * (1.25 / delta).ln() / j).sqrt();
            Ok(DpBudget { epsilon, delta })
        }
    }
}

/// Maps a total budget to the per-iteration budget and noise scale.
pub fn solve_budget(spec: &BudgetSpec) -> Result<PerIterationBudget, PrivacyError> {
    let step = per_step_amplified(spec)?;
    let (epsilon_iter, delta_iter) = invert_amplify(step.epsilon, step.delta, spec.sampling_ratio)?;
    let sigma = gaussian_sigma(spec.sensitivity, epsilon_iter, delta_iter)?;
    Ok(PerIterationBudget {
        epsilon_iter,
        delta_iter,
        sigma,
    })
}

/// Privacy spent by one perturbed release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSpend {
    pub iteration: u64,
    pub sensitivity: f64,
    pub sigma: f64,
    pub sampling_ratio: f64,
    /// Per-iteration guarantee of the Gaussian release before amplification.
    pub epsilon_iter: f64,
    pub delta_iter: f64,
    /// Guarantee after amplification by subsampling.
    pub epsilon_amplified: f64,
    pub delta_amplified: f64,
    /// zCDP cost of a Gaussian mechanism that is exactly
    /// `(epsilon_amplified, delta_amplified)`-DP.
    pub rho: f64,
}

/// Running prefix sums over the recorded spends.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningTotals {
    pub rho: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub epsilon_sq: f64,
    pub epsilon_expm1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub spend: IterationSpend,
    pub totals: RunningTotals,
    /// Total guarantee after this entry under the ledger's method.
    pub accounted: DpBudget,
}

/// Append-only record of the privacy actually spent by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantLedger {
    method: CompositionMethod,
    delta_tot: f64,
    entries: Vec<LedgerEntry>,
}

impl AccountantLedger {
    /// A ledger whose conversions target total tolerance `delta_tot`.
    pub fn new(method: CompositionMethod, delta_tot: f64) -> Result<Self, PrivacyError> {
        if method.is_private() {
            check_open_unit("delta_tot", delta_tot)?;
        }
        Ok(Self {
            method,
            delta_tot,
            entries: Vec::new(),
        })
    }

    pub fn method(&self) -> CompositionMethod {
        self.method
    }

    pub fn delta_tot(&self) -> f64 {
        self.delta_tot
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total guarantee so far; zero before the first release.
    pub fn accounted(&self) -> DpBudget {
        self.entries
            .last()
            .map(|e| e.accounted)
            .unwrap_or(DpBudget {
                epsilon: 0.0,
                delta: 0.0,
            })
    }

    /// Records one Gaussian release with scale `sigma` on a `nu`-subsample,
    /// analysed at per-iteration tolerance `delta_iter`.
    pub fn record(
        &mut self,
        iteration: u64,
        sensitivity: f64,
        sigma: f64,
        delta_iter: f64,
        nu: f64,
    ) -> Result<&LedgerEntry, PrivacyError> {
        if !self.method.is_private() {
            return Err(PrivacyError::NoPrivacy);
        }
        let spend = cost_iteration(iteration, sensitivity, sigma, delta_iter, nu)?;
        let prev = self.entries.last().map(|e| e.totals).unwrap_or_default();
        let totals = RunningTotals {
            rho: prev.rho + spend.rho,
            epsilon: prev.epsilon + spend.epsilon_amplified,
            delta: prev.delta + spend.delta_amplified,
            epsilon_sq: prev.epsilon_sq + spend.epsilon_amplified * spend.epsilon_amplified,
            epsilon_expm1: prev.epsilon_expm1
                + spend.epsilon_amplified * spend.epsilon_amplified.exp_m1(),
        };
        let accounted = convert_totals(self.method, &totals, self.delta_tot)?;
        self.entries.push(LedgerEntry {
            spend,
            totals,
            accounted,
        });
        Ok(self.entries.last().expect("just pushed"))
    }
}

fn cost_iteration(
    iteration: u64,
    sensitivity: f64,
    sigma: f64,
    delta_iter: f64,
    nu: f64,
) -> Result<IterationSpend, PrivacyError> {
    let epsilon_iter = gaussian_epsilon(sensitivity, sigma, delta_iter)?;
    let amplified = amplify(epsilon_iter, delta_iter, nu)?;
    // The Gaussian mechanism that is (eps', delta')-DP at equality has
    // variance tau = 2 ln(1.25/delta') Delta^2 / eps'^2, so its zCDP cost
    // is Delta^2 / (2 tau).
    let rho = amplified.epsilon * amplified.epsilon / (4.0 * (1.25 / amplified.delta).ln());
    Ok(IterationSpend {
        iteration,
        sensitivity,
        sigma,
        sampling_ratio: nu,
        epsilon_iter,
        delta_iter,
        epsilon_amplified: amplified.epsilon,
        delta_amplified: amplified.delta,
        rho,
    })
}

fn convert_totals(
    method: CompositionMethod,
    totals: &RunningTotals,
    delta_tot: f64,
) -> Result<DpBudget, PrivacyError> {
    match method {
        CompositionMethod::None => Err(PrivacyError::NoPrivacy),
        CompositionMethod::Linear => Ok(DpBudget {
            epsilon: totals.epsilon,
            delta: totals.delta,
        }),
        CompositionMethod::Advanced => {
            // Heterogeneous form; reduces to the homogeneous bound when all
            // steps share one epsilon.
            let slack = delta_tot / 2.0;
            Ok(DpBudget {
                epsilon: totals.epsilon_expm1 + (2.0 * (-slack.ln()) * totals.epsilon_sq).sqrt(),
                delta: slack + totals.delta,
            })
        }
        CompositionMethod::Zcdp => zcdp_to_dp(ZcdpBudget { rho: totals.rho }, delta_tot),
    }
}

/// Recomposes the ledger from its individual records (independently of
/// the running totals) and returns the total guarantee.
pub fn forward_account(ledger: &AccountantLedger) -> Result<DpBudget, PrivacyError> {
    if ledger.is_empty() {
        return Ok(DpBudget {
            epsilon: 0.0,
            delta: 0.0,
        });
    }
    let mut totals = RunningTotals::default();
    for entry in &ledger.entries {
        let s = &entry.spend;
        totals.rho += s.rho;
        totals.epsilon += s.epsilon_amplified;
        totals.delta += s.delta_amplified;
        totals.epsilon_sq += s.epsilon_amplified * s.epsilon_amplified;
        totals.epsilon_expm1 += s.epsilon_amplified * s.epsilon_amplified.exp_m1();
    }
    convert_totals(ledger.method, &totals, ledger.delta_tot)
}

/// Accounts `iterations` identical releases.
pub fn account_fixed(
    method: CompositionMethod,
    iterations: u64,
    sensitivity: f64,
    budget: &PerIterationBudget,
    nu: f64,
    delta_tot: f64,
) -> Result<AccountantLedger, PrivacyError> {
    let mut ledger = AccountantLedger::new(method, delta_tot)?;
    for t in 1..=iterations {
        ledger.record(t, sensitivity, budget.sigma, budget.delta_iter, nu)?;
    }
    Ok(ledger)
}
