//! The DP-SGD mechanism: Poisson subsampling, per-example gradient
//! clipping, and Gaussian-noised aggregation.
//!
//! The aggregate is always normalized by the *expected* lot size
//! `B = q * N`, never the realized one — realized batch size is itself
//! sensitive. An empty lot still produces a (noise-only) update and still
//! counts as a step. With `noise_multiplier = 0` the mechanism consumes no
//! randomness and reduces to clipped minibatch SGD.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_norm, Vector};
use crate::rng::RngStream;

/// Mechanism parameters, fixed for a whole run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-example clipping norm `C`.
    pub clip_norm: f64,
    /// Noise multiplier `sigma`; the aggregate noise is `sigma * C * z`.
    pub noise_multiplier: f64,
    /// Poisson inclusion probability `q` per record per step.
    pub sample_rate: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_multiplier must be nonnegative, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Independently include each of `n` records with probability `q`.
/// Exactly one uniform draw is consumed per record, in index order, so the
/// subsample for a given stream position is reproducible.
pub fn poisson_subsample(n: usize, q: f64, stream: &mut RngStream) -> Vec<usize> {
    let mut picked = Vec::new();
    for i in 0..n {
        if stream.next_f64() < q {
            picked.push(i);
        }
    }
    picked
}

/// What clipping did to one per-example gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipOutcome {
    /// L2 norm before clipping.
    pub norm: f64,
    /// Whether the gradient was actually rescaled.
    pub clipped: bool,
}

/// Scale `g` to norm at most `c` in place. A zero gradient stays zero.
pub fn clip_in_place(g: &mut [f64], c: f64) -> Result<ClipOutcome> {
    let norm = l2_norm(g);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm {norm} before clipping"
        )));
    }
    if norm > c {
        let scale = c / norm;
        for x in g.iter_mut() {
            *x *= scale;
        }
        Ok(ClipOutcome {
            norm,
            clipped: true,
        })
    } else {
        Ok(ClipOutcome {
            norm,
            clipped: false,
        })
    }
}

/// Noised average of an already-clipped gradient sum:
/// `(clipped_sum + sigma * C * z) / expected_batch` with `z ~ N(0, I)`.
///
/// Noise coordinates are drawn in index order from `noise`, and nothing is
/// drawn at all when `sigma = 0`, so the stream position advances
/// identically for every lot of the same dimension.
pub fn noisy_mean(
    clipped_sum: &[f64],
    expected_batch: f64,
    cfg: &DpConfig,
    noise: &mut RngStream,
) -> Result<Vector> {
    cfg.validate()?;
    if !(expected_batch.is_finite() && expected_batch > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "expected_batch must be positive, got {expected_batch}"
        )));
    }
    if let Some(i) = clipped_sum.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "clipped gradient sum [{i}] = {}",
            clipped_sum[i]
        )));
    }
    let sigma = cfg.noise_multiplier;
    let scale = sigma * cfg.clip_norm;
    let mut out = Vec::with_capacity(clipped_sum.len());
    if sigma == 0.0 {
        for &x in clipped_sum {
            out.push(x / expected_batch);
        }
    } else {
        for &x in clipped_sum {
            let z: f64 = StandardNormal.sample(noise);
            out.push((x + scale * z) / expected_batch);
        }
    }
    Ok(out)
}

/// Plain gradient descent on the flat parameter vector.
pub fn apply_update(flat: &mut [f64], update: &[f64], learning_rate: f64) -> Result<()> {
    if flat.len() != update.len() {
        return Err(Error::InvalidArgument(format!(
            "update length {} does not match parameter count {}",
            update.len(),
            flat.len()
        )));
    }
    for (p, u) in flat.iter_mut().zip(update) {
        *p -= learning_rate * u;
    }
    Ok(())
}
