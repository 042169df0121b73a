//! The Renyi-DP ledger at work: composition over steps, the exact q = 1
//! Gaussian anchor, and noise calibration for a target budget.

use dpopd::accountant::{calibrate_sigma, PrivacyLedger};

fn main() -> dpopd::Result<()> {
    let (q, sigma, delta) = (0.025, 1.7, 1.0 / 2000.0);
    let mut ledger = PrivacyLedger::new(q, sigma, delta)?;
    println!("q = {q}, sigma = {sigma}, delta = {delta}");
    let mut at = 0u64;
    for steps in [1, 10, 100, 1000, 2000] {
        ledger.advance(steps - at);
        at = steps;
        let r = ledger.epsilon();
        println!(
            "  after {steps:>4} steps: epsilon = {:.4} (best alpha {})",
            r.epsilon,
            r.best_alpha.expect("private run")
        );
    }

    // Without subsampling the per-step bound is exactly alpha / (2 sigma^2),
    // so one step must report min over alpha of that plus the delta term.
    let mut anchor = PrivacyLedger::new(1.0, 1.0, 1e-5)?;
    anchor.advance(1);
    let got = anchor.epsilon();
    let closed = (2..=256)
        .map(|a| a as f64 / 2.0 + (1.0 / 1e-5_f64).ln() / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min);
    println!(
        "q=1 anchor: ledger {:.12}, closed form {closed:.12}",
        got.epsilon
    );

    let target = 2.0;
    let cal = calibrate_sigma(0.025, 2000, target, delta)?;
    println!(
        "calibrated sigma {:.6} for target epsilon {target}: realized {:.6} at alpha {}{}",
        cal.sigma,
        cal.epsilon,
        cal.best_alpha,
        if cal.hit_lower_bound {
            " (noise floor)"
        } else {
            ""
        }
    );

    // Round trip: account with the calibrated sigma and land inside
    // [0.995, 1.0] x target.
    let mut check = PrivacyLedger::new(0.025, cal.sigma, delta)?;
    check.advance(2000);
    println!(
        "round trip: {:.6} in [{:.3}, {target}]",
        check.epsilon().epsilon,
        0.995 * target
    );
    Ok(())
}
