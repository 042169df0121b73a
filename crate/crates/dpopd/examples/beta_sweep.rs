//! Sweep the divergence interpolation weight at full on-policy mixing:
//! every run starts from the same initialization, so the column is a clean
//! read on beta alone.

use dpopd::accountant::calibrate_sigma;
use dpopd::data::{generate_chain, sample_corpus, SplitSizes, Vocab};
use dpopd::distill::DistillConfig;
use dpopd::model::{ModelConfig, TeacherHandle};
use dpopd::privacy::DpConfig;
use dpopd::rng::RngStream;
use dpopd::trainer::{run_beta_sweep, Method, TrainConfig};

fn main() -> dpopd::Result<()> {
    let seed = 4;
    let vocab = Vocab::new(24, 3)?;
    let spec = generate_chain(vocab, 1, 0.5, &mut RngStream::new(seed, "chain"))?;
    let sizes = SplitSizes {
        train: 600,
        valid: 100,
        test: 100,
    };
    let data = sample_corpus(&spec, sizes, 6, 24, &mut RngStream::new(seed, "data"))?;

    let n = data.train.len();
    let (q, steps, delta) = (30.0 / n as f64, 300, 1.0 / n as f64);
    let cal = calibrate_sigma(q, steps, 2.0, delta)?;
    let base = TrainConfig {
        method: Method::DpOpd,
        model: ModelConfig {
            vocab_size: 24,
            context: 26,
            embed_dim: 8,
            hidden_dim: 24,
        },
        distill: DistillConfig::default(),
        dp: DpConfig {
            clip_norm: 1.0,
            noise_multiplier: cal.sigma,
            sample_rate: q,
        },
        delta,
        epsilon_budget: None,
        learning_rate: 0.2,
        steps,
        lambda: 1.0,
        max_new_tokens: 12,
        rollout_temperature: 1.0,
        init_scale: 0.1,
        eval_interval: 0,
        eval_prompts: 16,
        eval_rollouts: 1,
        seed,
    };

    let betas = [0.0, 0.3, 0.5, 0.7, 1.0];
    let teacher = TeacherHandle::Oracle(spec);
    let rows = run_beta_sweep(&base, &betas, &data.train, &data.test, &teacher)?;

    println!(
        "lambda = 1.0 (on-policy every step), {steps} steps, epsilon {:.3}",
        cal.epsilon
    );
    println!("beta,ppl_test");
    for (beta, ppl) in rows {
        println!("{beta},{ppl:.4}");
    }
    Ok(())
}
