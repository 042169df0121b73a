//! Shared numeric kernels.
//!
//! Everything downstream (model, distillation loss, evaluation) leans on
//! these few routines, so they are written once, in f64, with the usual
//! max-shift and log-sum-exp stabilizations.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Contiguous vector of doubles.
pub type Vector = Vec<f64>;

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what}[{i}] = {}", z[i])));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// `softmax(z / tau)` with max-shift stabilization.
pub fn softmax_with_temperature(z: &[f64], tau: f64) -> Result<Vector> {
    check_temperature(tau)?;
    check_finite(z, "logits")?;
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let mut out: Vector = z.iter().map(|&x| (x / tau - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// `log softmax(z / tau)` via log-sum-exp; never returns `-inf` for finite input.
pub fn log_softmax(z: &[f64], tau: f64) -> Result<Vector> {
    check_temperature(tau)?;
    check_finite(z, "logits")?;
    if z.is_empty() {
        return Err(Error::InvalidArgument(
            "log_softmax of an empty vector".into(),
        ));
    }
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let lse = m + z.iter().map(|&x| (x / tau - m).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&x| x / tau - lse).collect())
}

/// `KL(p || q)` where `q` is given in log space. Terms with `p_i = 0`
/// contribute zero, so degenerate distributions are handled exactly.
pub fn kl_divergence(p: &[f64], log_q: &[f64]) -> Result<f64> {
    if p.len() != log_q.len() {
        return Err(Error::InvalidArgument(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            log_q.len()
        )));
    }
    check_finite(log_q, "log_q")?;
    let mut kl = 0.0;
    for (&pi, &lq) in p.iter().zip(log_q) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - lq);
        }
    }
    Ok(kl)
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inverse-CDF draw from a probability vector, consuming exactly one
/// uniform from `stream`. Zero-probability outcomes are never returned.
pub fn sample_categorical(p: &[f64], stream: &mut RngStream) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(
            "sample_categorical on empty distribution".into(),
        ));
    }
    for (i, &pi) in p.iter().enumerate() {
        if pi < -1e-12 || !pi.is_finite() {
            return Err(Error::InvalidArgument(format!("probability p[{i}] = {pi}")));
        }
    }
    let u = stream.next_f64();
    let total: f64 = p.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last_positive = Some(i);
            if target < acc {
                return Ok(i);
            }
        }
    }
    last_positive.ok_or_else(|| Error::InvalidArgument("all probabilities are zero".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax_with_temperature(&[0.3, 0.3, 0.3, 0.3], 1.0).unwrap();
        for &pi in &p {
            assert_abs_diff_eq!(pi, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_with_temperature(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = softmax_with_temperature(&[5.0, -3.0, 0.7], 1e6).unwrap();
        for &pi in &p {
            assert_abs_diff_eq!(pi, 1.0 / 3.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        assert!(softmax_with_temperature(&[0.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[0.0], -1.0).is_err());
        assert!(log_softmax(&[0.0], 0.0).is_err());
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let z = [3.2, -1.5, 0.0, 9.9, 4.4];
        let p = softmax_with_temperature(&z, 2.5).unwrap();
        let lp = log_softmax(&z, 2.5).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert_abs_diff_eq!(*a, b.exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_finite_even_when_probability_underflows() {
        let lp = log_softmax(&[0.0, -2000.0], 1.0).unwrap();
        assert!(lp[1].is_finite());
        assert!(lp[1] < -1999.0);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        let log_q: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        assert_abs_diff_eq!(kl_divergence(&p, &log_q).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_point_mass_against_uniform_is_ln_2() {
        let p = [1.0, 0.0];
        let log_q = [0.5f64.ln(), 0.5f64.ln()];
        assert_abs_diff_eq!(
            kl_divergence(&p, &log_q).unwrap(),
            2.0f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kl_worked_value_half_ln_3() {
        let p = [0.75, 0.25];
        let log_q = [0.25f64.ln(), 0.75f64.ln()];
        assert_abs_diff_eq!(
            kl_divergence(&p, &log_q).unwrap(),
            0.5 * 3.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_length_mismatch_rejected() {
        assert!(kl_divergence(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn l2_norm_matches_hand_value() {
        assert_abs_diff_eq!(l2_norm(&[3.0, 4.0]), 5.0, epsilon = 1e-15);
        assert_eq!(l2_norm(&[]), 0.0);
    }

    #[test]
    fn categorical_point_mass_always_hits_it() {
        let mut s = RngStream::new(11, "t");
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut s).unwrap(), 1);
        }
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        let mut s = RngStream::new(20260515, "freq");
        let p = [0.5, 0.5];
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| sample_categorical(&p, &mut s).unwrap() == 1)
            .count() as f64;
        let frac = ones / n as f64;
        assert!(
            (0.49..=0.51).contains(&frac),
            "frequency {frac} out of range"
        );
    }

    #[test]
    fn categorical_consumes_one_draw() {
        let mut sampled = RngStream::new(5, "one-draw");
        sample_categorical(&[0.25, 0.25, 0.5], &mut sampled).unwrap();
        let mut reference = RngStream::new(5, "one-draw");
        reference.next_f64();
        assert_eq!(sampled.counter(), reference.counter());
    }

    #[test]
    fn categorical_rejects_negative_probability() {
        let mut s = RngStream::new(5, "neg");
        assert!(sample_categorical(&[0.5, -0.5], &mut s).is_err());
    }

    #[test]
    fn categorical_replay_is_deterministic() {
        let draws = |seed| -> Vec<usize> {
            let mut s = RngStream::new(seed, "replay");
            (0..1000)
                .map(|_| sample_categorical(&[0.2, 0.3, 0.5], &mut s).unwrap())
                .collect()
        };
        assert_eq!(draws(99), draws(99));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(z in proptest::collection::vec(-30.0..30.0f64, 1..16), c in -50.0..50.0f64) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let a = softmax_with_temperature(&z, 1.0).unwrap();
            let b = softmax_with_temperature(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one(z in proptest::collection::vec(-300.0..300.0f64, 1..16), tau in 0.1..10.0f64) {
            let p = softmax_with_temperature(&z, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn exp_log_softmax_sums_to_one(z in proptest::collection::vec(-300.0..300.0f64, 1..16)) {
            let lp = log_softmax(&z, 1.0).unwrap();
            prop_assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(raw_p in proptest::collection::vec(1e-6..1.0f64, 8), raw_q in proptest::collection::vec(1e-6..1.0f64, 8)) {
            let sp: f64 = raw_p.iter().sum();
            let sq: f64 = raw_q.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|x| x / sp).collect();
            let log_q: Vec<f64> = raw_q.iter().map(|x| (x / sq).ln()).collect();
            prop_assert!(kl_divergence(&p, &log_q).unwrap() >= -1e-12);
        }
    }
}
