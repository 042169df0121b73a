//! Generalized knowledge-distillation loss on token distributions.
//!
//! Per token the student distribution is `p_S = softmax(z_S / tau_d)` and
//! the teacher arrives as log-probabilities already tempered the same way.
//! Two divergence families are supported:
//!
//! * `linear-kl` (default): `(1-beta) KL(p_T || p_S) + beta KL(p_S || p_T)`,
//!   so `beta = 0` is forward KL, `beta = 1` reverse KL, `beta = 0.5` the
//!   symmetric mean.
//! * `generalized-jsd`: `beta KL(p_T || M) + (1-beta) KL(p_S || M)` with
//!   `M = beta p_T + (1-beta) p_S`; `beta = 0.5` is the classical JSD, and
//!   both endpoints vanish identically.
//!
//! Gradients with respect to the student logits are closed-form. There is
//! deliberately no `tau_d^2` rescaling of either loss or gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax_with_temperature, Vector};
use crate::rng::RngStream;

/// Which divergence interpolation to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceFamily {
    #[default]
    LinearKl,
    GeneralizedJsd,
}

/// Distillation settings shared by every token position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Interpolation weight in `[0, 1]`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Distillation temperature, `> 0`.
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    #[serde(default)]
    pub family: DivergenceFamily,
    /// Additive hard-label cross-entropy weight, `>= 0`. Applied only at
    /// positions that carry a reference token.
    #[serde(default)]
    pub gamma: f64,
}

fn default_beta() -> f64 {
    0.5
}

fn default_tau_d() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.5,
            tau_d: 1.0,
            family: DivergenceFamily::LinearKl,
            gamma: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta must be in [0,1], got {}",
                self.beta
            )));
        }
        if !(self.tau_d.is_finite() && self.tau_d > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau_d must be positive, got {}",
                self.tau_d
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_teacher_logp(log_p_t: &[f64]) -> Result<()> {
    if let Some(i) = log_p_t.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "teacher log-prob [{i}] = {} must be finite; floor the distribution first",
            log_p_t[i]
        )));
    }
    Ok(())
}

/// One token's distillation loss and its gradient with respect to the
/// student logits.
pub fn gkd_token_loss(z_s: &[f64], log_p_t: &[f64], cfg: &DistillConfig) -> Result<(f64, Vector)> {
    cfg.validate()?;
    if z_s.len() != log_p_t.len() {
        return Err(Error::InvalidArgument(format!(
            "logits/teacher length mismatch: {} vs {}",
            z_s.len(),
            log_p_t.len()
        )));
    }
    check_teacher_logp(log_p_t)?;

    let tau = cfg.tau_d;
    let beta = cfg.beta;
    let p_s = softmax_with_temperature(z_s, tau)?;
    let log_p_s = log_softmax(z_s, tau)?;
    let p_t: Vector = log_p_t.iter().map(|&x| x.exp()).collect();
    let v = z_s.len();

    match cfg.family {
        DivergenceFamily::LinearKl => {
            // KL(p_T || p_S): log_p_s is finite for finite logits.
            let mut kl_fwd = 0.0;
            for i in 0..v {
                if p_t[i] > 0.0 {
                    kl_fwd += p_t[i] * (log_p_t[i] - log_p_s[i]);
                }
            }
            // KL(p_S || p_T) with the 0 log 0 convention.
            let mut kl_rev = 0.0;
            for i in 0..v {
                if p_s[i] > 0.0 {
                    kl_rev += p_s[i] * (log_p_s[i] - log_p_t[i]);
                }
            }
            let loss = (1.0 - beta) * kl_fwd + beta * kl_rev;

            let mut grad = vec![0.0; v];
            for i in 0..v {
                let mut g = (1.0 - beta) * (p_s[i] - p_t[i]);
                if beta > 0.0 && p_s[i] > 0.0 {
                    g += beta * p_s[i] * (log_p_s[i] - log_p_t[i] - kl_rev);
                }
                grad[i] = g / tau;
            }
            Ok((loss, grad))
        }
        DivergenceFamily::GeneralizedJsd => {
            let m: Vector = (0..v)
                .map(|i| beta * p_t[i] + (1.0 - beta) * p_s[i])
                .collect();
            let mut toward_teacher = 0.0;
            if beta > 0.0 {
                for i in 0..v {
                    if p_t[i] > 0.0 {
                        toward_teacher += p_t[i] * (log_p_t[i] - m[i].ln());
                    }
                }
            }
            let mut toward_student = 0.0;
            if beta < 1.0 {
                for i in 0..v {
                    if p_s[i] > 0.0 {
                        toward_student += p_s[i] * (log_p_s[i] - m[i].ln());
                    }
                }
            }
            let loss = beta * toward_teacher + (1.0 - beta) * toward_student;

            // d loss / d z_i = (1-beta)/tau * p_s_i * (r_i - sum_j p_s_j r_j)
            // with r_i = log(p_s_i / m_i); the teacher-side term has zero
            // derivative through m once the mixture weights cancel.
            let mut grad = vec![0.0; v];
            if beta < 1.0 {
                for i in 0..v {
                    if p_s[i] > 0.0 {
                        let r = log_p_s[i] - m[i].ln();
                        grad[i] = (1.0 - beta) / tau * p_s[i] * (r - toward_student);
                    }
                }
            }
            Ok((loss, grad))
        }
    }
}

/// Hard-label cross-entropy of the tempered student at one position.
pub fn cross_entropy_token(z_s: &[f64], tau: f64, reference: u32) -> Result<(f64, Vector)> {
    let r = reference as usize;
    if r >= z_s.len() {
        return Err(Error::InvalidArgument(format!(
            "reference token {reference} exceeds vocab size {}",
            z_s.len()
        )));
    }
    let p_s = softmax_with_temperature(z_s, tau)?;
    let log_p_s = log_softmax(z_s, tau)?;
    let loss = -log_p_s[r];
    let mut grad: Vector = p_s.iter().map(|&p| p / tau).collect();
    grad[r] -= 1.0 / tau;
    Ok((loss, grad))
}

/// Per-example sequence loss: the mean over masked positions of
/// `gkd_token_loss + gamma * CE`, with the CE term applied only where a
/// reference token exists.
///
/// Returns the mean loss together with raw per-position logit gradients
/// (empty vectors at masked-out positions). Dividing by the number of
/// masked positions is the caller's concern when backpropagating, which
/// keeps these gradients exactly `d(token loss)/d(logits)`.
pub fn sequence_loss(
    logits: &[Vector],
    teacher_logp: &[Vector],
    mask: &[bool],
    reference: &[Option<u32>],
    cfg: &DistillConfig,
) -> Result<(f64, Vec<Vector>)> {
    cfg.validate()?;
    let n = logits.len();
    if teacher_logp.len() != n || mask.len() != n || reference.len() != n {
        return Err(Error::InvalidArgument(format!(
            "sequence_loss: lengths differ (logits {n}, teacher {}, mask {}, reference {})",
            teacher_logp.len(),
            mask.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grads: Vec<Vector> = vec![Vec::new(); n];
    for t in 0..n {
        if !mask[t] {
            continue;
        }
        count += 1;
        let (loss, mut grad) = gkd_token_loss(&logits[t], &teacher_logp[t], cfg)?;
        let mut token_loss = loss;
        if cfg.gamma > 0.0 {
            if let Some(r) = reference[t] {
                let (ce, ce_grad) = cross_entropy_token(&logits[t], cfg.tau_d, r)?;
                token_loss += cfg.gamma * ce;
                for (g, cg) in grad.iter_mut().zip(&ce_grad) {
                    *g += cfg.gamma * cg;
                }
            }
        }
        total += token_loss;
        grads[t] = grad;
    }
    let mean = if count > 0 { total / count as f64 } else { 0.0 };
    Ok((mean, grads))
}

/// Central-difference check of [`gkd_token_loss`] gradients on random
/// `(z_S, p_T, beta, tau_d)` draws. Returns the worst relative error over
/// coordinates whose gradient magnitude exceeds `1e-8`.
pub fn grad_check_distill(
    family: DivergenceFamily,
    trials: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let v = 4 + (stream.next_f64() * 8.0) as usize;
        let mut z: Vector = (0..v).map(|_| stream.next_f64() * 8.0 - 4.0).collect();
        let raw: Vector = (0..v).map(|_| stream.next_f64() + 0.01).collect();
        let sum: f64 = raw.iter().sum();
        let log_p_t: Vector = raw.iter().map(|&x| (x / sum).ln()).collect();
        let cfg = DistillConfig {
            beta: stream.next_f64(),
            tau_d: 0.5 + stream.next_f64() * 2.5,
            family,
            gamma: 0.0,
        };
        let (_, analytic) = gkd_token_loss(&z, &log_p_t, &cfg)?;
        for i in 0..v {
            let orig = z[i];
            z[i] = orig + step;
            let (up, _) = gkd_token_loss(&z, &log_p_t, &cfg)?;
            z[i] = orig - step;
            let (down, _) = gkd_token_loss(&z, &log_p_t, &cfg)?;
            z[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            if analytic[i].abs() > 1e-8 {
                let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs());
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
