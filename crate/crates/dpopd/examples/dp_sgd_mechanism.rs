//! One DP-SGD step in isolation: Poisson subsampling, per-example clipping,
//! and the noisy expected-lot-size mean — plus the degenerate settings that
//! turn the mechanism back into plain averaging.

use dpopd::nn::l2_norm;
use dpopd::privacy::{clip_in_place, noisy_mean, poisson_subsample, DpConfig};
use dpopd::rng::RngStream;

fn main() -> dpopd::Result<()> {
    let n = 1000;
    let q = 0.05;
    let mut subsample = RngStream::new(3, "subsample");
    let lot = poisson_subsample(n, q, &mut subsample);
    println!(
        "poisson lot over n = {n} at q = {q}: {} records (expected {})",
        lot.len(),
        q * n as f64
    );

    let cfg = DpConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.2,
        sample_rate: q,
    };
    let dim = 5;
    let mut grads = RngStream::new(4, "grads");
    let mut sum = vec![0.0; dim];
    let mut clipped = 0usize;
    let lot_size = 20;
    for i in 0..lot_size {
        let mut g: Vec<f64> = (0..dim)
            .map(|_| (grads.next_f64() * 2.0 - 1.0) * 2.0)
            .collect();
        let outcome = clip_in_place(&mut g, cfg.clip_norm)?;
        clipped += outcome.clipped as usize;
        if i < 3 {
            println!(
                "  example {i}: pre-clip norm {:.4}, post-clip norm {:.4}, scaled: {}",
                outcome.norm,
                l2_norm(&g),
                outcome.clipped
            );
        }
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v;
        }
    }
    println!("clip fraction over the lot: {}/{lot_size}", clipped);

    let expected_batch = q * n as f64;
    let mut noise = RngStream::new(5, "dp-noise");
    let update = noisy_mean(&sum, expected_batch, &cfg, &mut noise)?;
    println!(
        "noisy mean (sigma = {}): {update:.4?}",
        cfg.noise_multiplier
    );

    // sigma = 0 with a clip bound no gradient reaches: the mechanism
    // returns exactly sum / B, i.e. ordinary full-batch averaging.
    let degenerate = DpConfig {
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        sample_rate: 1.0,
    };
    let plain = noisy_mean(&sum, lot_size as f64, &degenerate, &mut noise)?;
    let exact: Vec<f64> = sum.iter().map(|s| s / lot_size as f64).collect();
    let diff: f64 = plain
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("degenerate mechanism vs plain mean: max abs diff {diff:e}");

    // Replay: the same stream state reproduces the same noise bit for bit.
    let mut a = RngStream::new(6, "dp-noise");
    let mut b = RngStream::new(6, "dp-noise");
    let u1 = noisy_mean(&sum, expected_batch, &cfg, &mut a)?;
    let u2 = noisy_mean(&sum, expected_batch, &cfg, &mut b)?;
    println!("same seed, same noise: {}", u1 == u2);
    Ok(())
}
