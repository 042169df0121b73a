//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order `alpha` is the binomial bound
//!
//! ```text
//! (1/(alpha-1)) * ln( sum_{j=0}^{alpha} C(alpha,j) (1-q)^{alpha-j} q^j e^{j(j-1)/(2 sigma^2)} )
//! ```
//!
//! evaluated entirely in log space (the raw terms overflow long before
//! `alpha = 256`). Composition over steps is additive, so the ledger stores
//! a step count and one cached per-step curve; the accumulated value is the
//! product, which makes step-by-step advancement and one-shot accounting
//! bit-identical. Conversion uses the classic `min_alpha [ RDP(alpha) +
//! ln(1/delta)/(alpha-1) ]`.
//!
//! The accountant is a pure function of `(q, sigma, steps, delta)`: teacher
//! queries, rollout lengths, and realized lot sizes never enter it.

use serde::Serialize;

use crate::error::{Error, Result};

/// Smallest and largest Rényi order tracked.
pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

const N_ORDERS: usize = (MAX_ORDER - MIN_ORDER + 1) as usize;

/// Calibration search range for the noise multiplier.
pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 200.0;

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = vec![0.0; n + 1];
    for i in 2..=n {
        table[i] = table[i - 1] + (i as f64).ln();
    }
    table
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

fn check_q(q: f64) -> Result<()> {
    if !(q.is_finite() && q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample rate q must be in (0, 1], got {q}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Per-step RDP of one Poisson-subsampled Gaussian release at integer
/// order `alpha`. Requires `sigma > 0`; `sigma = 0` is handled by the
/// ledger as a distinguished non-private state, not here.
pub fn rdp_step(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if alpha < 2 {
        return Err(Error::InvalidArgument(format!(
            "order alpha must be >= 2, got {alpha}"
        )));
    }
    let lnfact = ln_factorials(alpha as usize);
    let a = alpha as usize;
    let ln_q = q.ln();
    let ln_1mq = (1.0 - q).ln(); // -inf when q = 1; such terms are skipped
    let two_sigma_sq = 2.0 * sigma * sigma;
    let mut terms = Vec::with_capacity(a + 1);
    for j in 0..=a {
        if q == 1.0 && j < a {
            continue; // coefficient (1-q)^(alpha-j) is exactly zero
        }
        let mut t = lnfact[a] - lnfact[j] - lnfact[a - j];
        if a - j > 0 {
            t += (a - j) as f64 * ln_1mq;
        }
        if j > 0 {
            t += j as f64 * ln_q;
        }
        let jf = j as f64;
        t += jf * (jf - 1.0) / two_sigma_sq;
        terms.push(t);
    }
    let value = log_sum_exp(&terms) / (alpha - 1) as f64;
    // The sum is an expectation of e^(nonnegative), so the true value is
    // nonnegative; clamp away cancellation noise at tiny q.
    Ok(value.max(0.0))
}

/// Who minimized the conversion, and at what privacy cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpsilonReport {
    /// `f64::INFINITY` when the mechanism ran with `sigma = 0`.
    pub epsilon: f64,
    /// Minimizing order; `None` when non-private.
    pub best_alpha: Option<u32>,
}

/// Accumulated RDP state for one training run.
#[derive(Clone, Debug)]
pub struct PrivacyLedger {
    q: f64,
    sigma: f64,
    delta: f64,
    steps: u64,
    /// One value per order `2..=256`; `None` when `sigma = 0`.
    per_step: Option<Vec<f64>>,
}

impl PrivacyLedger {
    pub fn new(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        check_q(q)?;
        check_delta(delta)?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        let per_step = if sigma == 0.0 {
            None
        } else {
            let mut curve = Vec::with_capacity(N_ORDERS);
            for alpha in MIN_ORDER..=MAX_ORDER {
                curve.push(rdp_step(q, sigma, alpha)?);
            }
            Some(curve)
        };
        Ok(PrivacyLedger {
            q,
            sigma,
            delta,
            steps: 0,
            per_step,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn non_private(&self) -> bool {
        self.per_step.is_none()
    }

    /// Record `steps` further mechanism invocations.
    pub fn advance(&mut self, steps: u64) {
        self.steps += steps;
    }

    /// Accumulated RDP curve over orders `2..=256`, or `None` when
    /// non-private.
    pub fn curve(&self) -> Option<Vec<f64>> {
        self.per_step
            .as_ref()
            .map(|ps| ps.iter().map(|&v| self.steps as f64 * v).collect())
    }

    /// Convert the accumulated curve to `(epsilon, delta)` at the ledger's
    /// target `delta`.
    pub fn epsilon(&self) -> EpsilonReport {
        self.epsilon_at(self.delta)
            .expect("ledger delta was validated at construction")
    }

    pub fn epsilon_at(&self, delta: f64) -> Result<EpsilonReport> {
        check_delta(delta)?;
        match self.curve() {
            None => Ok(EpsilonReport {
                epsilon: f64::INFINITY,
                best_alpha: None,
            }),
            Some(curve) => {
                let (epsilon, best_alpha) = epsilon_from_curve(&curve, delta);
                Ok(EpsilonReport {
                    epsilon,
                    best_alpha: Some(best_alpha),
                })
            }
        }
    }
}

/// Classic RDP-to-DP conversion over the tracked orders. `curve[i]` holds
/// the accumulated RDP at order `MIN_ORDER + i`.
pub fn epsilon_from_curve(curve: &[f64], delta: f64) -> (f64, u32) {
    debug_assert_eq!(curve.len(), N_ORDERS);
    let ln_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    let mut best_alpha = MIN_ORDER;
    for (i, &rdp) in curve.iter().enumerate() {
        let alpha = MIN_ORDER + i as u32;
        let eps = rdp + ln_inv_delta / (alpha - 1) as f64;
        if eps < best {
            best = eps;
            best_alpha = alpha;
        }
    }
    (best, best_alpha)
}

/// Result of a noise calibration search.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Calibration {
    pub sigma: f64,
    /// Epsilon actually realized at the returned sigma.
    pub epsilon: f64,
    pub best_alpha: u32,
    /// True when the target was so loose that even the minimum noise
    /// `sigma = 0.3` stays under budget.
    pub hit_lower_bound: bool,
}

/// Binary-search the noise multiplier in `[0.3, 200]` so that `steps`
/// compositions at rate `q` land in `[0.995, 1.0] * target_epsilon`.
pub fn calibrate_sigma(q: f64, steps: u64, target_epsilon: f64, delta: f64) -> Result<Calibration> {
    check_q(q)?;
    check_delta(delta)?;
    if !(target_epsilon.is_finite() && target_epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target epsilon must be positive, got {target_epsilon}"
        )));
    }
    let eval = |sigma: f64| -> Result<EpsilonReport> {
        let mut ledger = PrivacyLedger::new(q, sigma, delta)?;
        ledger.advance(steps);
        Ok(ledger.epsilon())
    };

    let at_max = eval(SIGMA_MAX)?;
    if at_max.epsilon > target_epsilon {
        return Err(Error::Budget(format!(
            "epsilon target {target_epsilon} is unattainable: even sigma = {SIGMA_MAX} yields \
             epsilon = {:.6} (q = {q}, steps = {steps}, delta = {delta})",
            at_max.epsilon
        )));
    }
    let at_min = eval(SIGMA_MIN)?;
    if at_min.epsilon <= target_epsilon {
        return Ok(Calibration {
            sigma: SIGMA_MIN,
            epsilon: at_min.epsilon,
            best_alpha: at_min.best_alpha.unwrap_or(MIN_ORDER),
            hit_lower_bound: true,
        });
    }

    // Invariant: eps(lo) > target >= eps(hi).
    let mut lo = SIGMA_MIN;
    let mut hi = SIGMA_MAX;
    let mut at_hi = at_max;
    for _ in 0..200 {
        if at_hi.epsilon >= 0.995 * target_epsilon {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let at_mid = eval(mid)?;
        if at_mid.epsilon <= target_epsilon {
            hi = mid;
            at_hi = at_mid;
        } else {
            lo = mid;
        }
    }
    if at_hi.epsilon < 0.995 * target_epsilon {
        return Err(Error::Budget(format!(
            "sigma calibration did not converge to within 0.5% of target {target_epsilon}"
        )));
    }
    Ok(Calibration {
        sigma: hi,
        epsilon: at_hi.epsilon,
        best_alpha: at_hi.best_alpha.unwrap_or(MIN_ORDER),
        hit_lower_bound: false,
    })
}
