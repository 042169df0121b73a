//! The headline comparison at demo scale: the three methods on the same
//! private corpus, the same privacy budget, and the same evaluation.

use dpopd::accountant::calibrate_sigma;
use dpopd::data::{generate_chain, sample_corpus, SplitSizes, Vocab};
use dpopd::distill::DistillConfig;
use dpopd::model::{ModelConfig, TeacherHandle};
use dpopd::privacy::DpConfig;
use dpopd::rng::RngStream;
use dpopd::trainer::{evaluate_perplexity, evaluate_rollout_kl, train, Method, TrainConfig};

fn main() -> dpopd::Result<()> {
    let vocab = Vocab::new(24, 3)?;
    let spec = generate_chain(vocab, 1, 0.5, &mut RngStream::new(8, "chain"))?;
    let sizes = SplitSizes {
        train: 600,
        valid: 100,
        test: 100,
    };
    let data = sample_corpus(&spec, sizes, 6, 24, &mut RngStream::new(8, "data"))?;
    let teacher = TeacherHandle::Oracle(spec);

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
        lambda: 0.5,
        max_new_tokens: 12,
        rollout_temperature: 1.0,
        init_scale: 0.1,
        eval_interval: 0,
        eval_prompts: 16,
        eval_rollouts: 1,
        seed: 0,
    };

    let seeds = [1u64, 2, 3];
    println!(
        "{steps} steps at epsilon {:.3}, mean over {} seeds:",
        cal.epsilon,
        seeds.len()
    );
    println!("{:<16} {:>10} {:>12}", "method", "ppl_test", "rollout_kl");
    for method in [Method::DpOpd, Method::OffpolicyDpkd, Method::DpsgdOnly] {
        let (mut ppl_sum, mut kl_sum) = (0.0, 0.0);
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.seed = seed;
            let outcome = train(&cfg, &data.train, None, Some(&teacher))?;
            ppl_sum += evaluate_perplexity(&outcome.params, &data.test)?;
            kl_sum += evaluate_rollout_kl(
                &outcome.params,
                &teacher,
                &data.test.examples[..16],
                1,
                12,
                1.0,
                &RngStream::new(seed, "compare-probe"),
            )?;
        }
        let m = seeds.len() as f64;
        println!(
            "{:<16} {:>10.4} {:>12.4}",
            method.to_string(),
            ppl_sum / m,
            kl_sum / m
        );
    }
    Ok(())
}
