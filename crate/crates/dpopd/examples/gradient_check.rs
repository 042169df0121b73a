//! Central-difference checks for every hand-derived gradient: the two
//! distillation divergences with respect to student logits, and the full
//! model backward pass with respect to the parameters.

use dpopd::distill::{grad_check_distill, DivergenceFamily};
use dpopd::model::{forward_logits, init_params, per_example_grad, window, ModelConfig, Params};
use dpopd::rng::RngStream;

#[allow(clippy::needless_range_loop)]
fn model_fd_worst(params: &Params, tokens: &[u32], mask: &[bool]) -> dpopd::Result<f64> {
    let v = params.config().vocab_size as usize;
    let mut cot = RngStream::new(9, "cotangents");
    let cotangents: Vec<Vec<f64>> = mask
        .iter()
        .map(|&m| {
            if m {
                (0..v).map(|_| cot.next_f64() * 2.0 - 1.0).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let analytic = per_example_grad(params, tokens, mask, &cotangents)?;

    let n_masked = mask.iter().filter(|&&m| m).count() as f64;
    let probe = |p: &Params| -> dpopd::Result<f64> {
        let mut total = 0.0;
        for t in 0..tokens.len() {
            if !mask[t] {
                continue;
            }
            let ctx = window(&tokens[..t], p.config().context as usize);
            let z = forward_logits(p, &ctx)?;
            total += z
                .iter()
                .zip(&cotangents[t])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(total / n_masked)
    };

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut perturbed = params.clone();
    for i in 0..params.flat().len() {
        let orig = params.flat()[i];
        perturbed.flat_mut()[i] = orig + step;
        let up = probe(&perturbed)?;
        perturbed.flat_mut()[i] = orig - step;
        let down = probe(&perturbed)?;
        perturbed.flat_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(worst)
}

fn main() -> dpopd::Result<()> {
    for family in [DivergenceFamily::LinearKl, DivergenceFamily::GeneralizedJsd] {
        let mut stream = RngStream::new(1, "grad-check");
        let worst = grad_check_distill(family, 200, &mut stream)?;
        println!("{family:?} logit gradient, 200 random trials: worst rel err {worst:.3e}");
    }

    let config = ModelConfig {
        vocab_size: 9,
        context: 5,
        embed_dim: 4,
        hidden_dim: 6,
    };
    let params = init_params(config, 0.5, &mut RngStream::new(2, "init"))?;
    let tokens = vec![3, 1, 5, 6, 7, 4, 8];
    let mask = vec![false, false, false, true, true, true, true];
    let worst = model_fd_worst(&params, &tokens, &mask)?;
    println!(
        "model backward over all {} parameters: worst rel err {worst:.3e}",
        params.flat().len()
    );
    Ok(())
}
