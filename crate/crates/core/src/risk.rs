//! Sample sizes and risk certificates for nonconvex scenario programs.
//!
//! The risk allocation spreads the confidence budget `beta` evenly over the
//! support values `0..=n_bar`:
//!
//! ```text
//! eps(n) = 1 - (beta / (S * C(S, n)))^(1 / (S - n))   for n <= n_bar
//! eps(n) = 1                                          otherwise
//! ```
//!
//! A decision supported by `n` of `S` scenarios then violates a fresh
//! scenario with probability at most `eps(n)`, with confidence `1 - beta`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Default upper bound for the sample-size search.
pub const DEFAULT_SAMPLE_CAP: usize = 10_000_000;

/// Below this many factors the log-binomial is summed exactly instead of
/// going through log-gamma differences.
const DIRECT_LOG_BINOMIAL_TERMS: usize = 256;

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    assert!(k <= n, "ln_binomial: k > n");
    let k = k.min(n - k);
    if k == 0 {
        return 0.0;
    }
    if k <= DIRECT_LOG_BINOMIAL_TERMS {
        // C(n, k) = prod_{i=1}^{k} (n - k + i) / i
        let nk = (n - k) as f64;
        (1..=k).map(|i| (1.0 + nk / i as f64).ln()).sum()
    } else {
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
    }
}

/// Evenly allocated risk for a support of size `n` out of `sample_size`
/// scenarios at confidence parameter `beta`.
pub fn epsilon_of_n(n: usize, sample_size: usize, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0,1), got {beta}")));
    }
    if sample_size == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    if n > sample_size {
        return Err(Error::InvalidArgument(format!(
            "support {n} exceeds sample size {sample_size}"
        )));
    }
    Ok(epsilon_unchecked(n, sample_size, beta))
}

fn epsilon_unchecked(n: usize, s: usize, beta: f64) -> f64 {
    if n >= s {
        return 1.0;
    }
    let log_ratio = beta.ln() - (s as f64).ln() - ln_binomial(s, n);
    let exponent = log_ratio / (s - n) as f64;
    (-exponent.exp_m1()).clamp(0.0, 1.0)
}

/// Smallest `S > n_bar` with `epsilon_of_n(n_bar, S, beta) <= epsilon`.
pub fn compute_sample_size(epsilon: f64, beta: f64, n_bar: usize) -> Result<usize> {
    compute_sample_size_capped(epsilon, beta, n_bar, DEFAULT_SAMPLE_CAP)
}

pub fn compute_sample_size_capped(epsilon: f64, beta: f64, n_bar: usize, cap: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0,1), got {beta}")));
    }
    let fits = |s: usize| epsilon_unchecked(n_bar, s, beta) <= epsilon;
    let cap_err = || Error::SampleSizeCapExceeded { epsilon, support: n_bar, cap };

    let first = n_bar + 1;
    if first > cap {
        return Err(cap_err());
    }
    if fits(first) {
        return Ok(first);
    }
    // eps(n_bar, S) decreases in S: bracket by doubling, then bisect.
    let mut lo;
    let mut hi = first;
    loop {
        let next = hi.saturating_mul(2).min(cap);
        if next == hi {
            return Err(cap_err());
        }
        lo = hi;
        hi = next;
        if fits(hi) {
            break;
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut s = hi;
    while s > first && fits(s - 1) {
        s -= 1;
    }
    Ok(s)
}

/// Risk parameters of one planner, including the derived sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub epsilon: f64,
    pub beta: f64,
    /// Support limit `n_bar`, removed scenarios included.
    pub support_limit: usize,
    pub removal_budget: usize,
    /// Zero in a configuration file means "derive from the other fields".
    #[serde(default)]
    pub sample_size: usize,
}

impl RiskConfig {
    /// Derives the minimal sample size for the given support limit.
    pub fn new(epsilon: f64, beta: f64, support_limit: usize, removal_budget: usize) -> Result<Self> {
        if removal_budget > support_limit {
            return Err(Error::InvalidArgument(format!(
                "removal budget {removal_budget} exceeds support limit {support_limit}"
            )));
        }
        let sample_size = compute_sample_size(epsilon, beta, support_limit)?;
        Ok(Self { epsilon, beta, support_limit, removal_budget, sample_size })
    }

    /// Support limit raised by the removal budget, since every removed
    /// scenario is of support.
    pub fn with_removal_allowance(
        epsilon: f64,
        beta: f64,
        base_support: usize,
        removal_budget: usize,
    ) -> Result<Self> {
        Self::new(epsilon, beta, base_support + removal_budget, removal_budget)
    }

    /// Uses a caller-chosen sample size instead of the derived one.
    pub fn with_sample_size(
        epsilon: f64,
        beta: f64,
        support_limit: usize,
        removal_budget: usize,
        sample_size: usize,
    ) -> Result<Self> {
        if sample_size == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0,1), got {beta}")));
        }
        Ok(Self { epsilon, beta, support_limit, removal_budget, sample_size })
    }

    /// Fills in a missing sample size and checks the parameters.
    pub fn resolved(self) -> Result<Self> {
        if self.sample_size == 0 {
            Self::new(self.epsilon, self.beta, self.support_limit, self.removal_budget)
        } else {
            Self::with_sample_size(self.epsilon, self.beta, self.support_limit, self.removal_budget, self.sample_size)
        }
    }

    /// `eps(n)` for this configuration's sample size.
    pub fn epsilon_of(&self, n: usize) -> f64 {
        epsilon_unchecked(n.min(self.sample_size), self.sample_size, self.beta)
    }

    /// The `(n, eps(n))` table for `n = 0..=n_bar`.
    pub fn epsilon_table(&self) -> Vec<(usize, f64)> {
        (0..=self.support_limit).map(|n| (n, self.epsilon_of(n))).collect()
    }
}

/// Outcome of checking an estimated support against the support limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCertificate {
    pub support_estimate: usize,
    pub certified: bool,
    pub epsilon_bound: f64,
}

pub fn certify(n_hat: usize, config: &RiskConfig) -> RiskCertificate {
    let certified = n_hat <= config.support_limit;
    let epsilon_bound = if certified { config.epsilon_of(n_hat) } else { 1.0 };
    RiskCertificate { support_estimate: n_hat, certified, epsilon_bound }
}
