//! A complete dp-opd run at demo scale: draw a private corpus, calibrate
//! the noise for a 2.0 budget, train against the oracle teacher, and watch
//! perplexity fall while epsilon climbs to its target.

use dpopd::accountant::calibrate_sigma;
use dpopd::data::{generate_chain, sample_corpus, SplitSizes, Vocab};
use dpopd::distill::DistillConfig;
use dpopd::model::{ModelConfig, TeacherHandle};
use dpopd::privacy::DpConfig;
use dpopd::rng::RngStream;
use dpopd::trainer::{evaluate_perplexity, train, Method, TrainConfig};

fn main() -> dpopd::Result<()> {
    let seed = 1;
    let vocab = Vocab::new(24, 3)?;
    let spec = generate_chain(vocab, 1, 0.5, &mut RngStream::new(seed, "chain"))?;
    let sizes = SplitSizes {
        train: 600,
        valid: 100,
        test: 100,
    };
    let data = sample_corpus(&spec, sizes, 6, 24, &mut RngStream::new(seed, "data"))?;

    let n = data.train.len();
    let (q, steps, delta) = (30.0 / n as f64, 400, 1.0 / n as f64);
    let target = 2.0;
    let cal = calibrate_sigma(q, steps, target, delta)?;
    println!(
        "n = {n}, q = {q}, {steps} steps: sigma {:.4} spends epsilon {:.4} of the {target} target",
        cal.sigma, cal.epsilon
    );

    let cfg = TrainConfig {
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
        eval_interval: 100,
        eval_prompts: 16,
        eval_rollouts: 1,
        seed,
    };

    let teacher = TeacherHandle::Oracle(spec);
    let outcome = train(&cfg, &data.train, Some(&data.valid), Some(&teacher))?;

    for rec in outcome.step_records.iter().step_by(100) {
        println!(
            "  step {:>3} [{:?}]: lot {:>2}, loss {:.4}, clip {:.2}, epsilon {:.4}",
            rec.step, rec.branch, rec.batch, rec.loss, rec.clip_frac, rec.epsilon
        );
    }
    for ev in &outcome.eval_records {
        println!(
            "  eval at step {:>3}: valid PPL {:.4}, rollout KL {:.4}",
            ev.step,
            ev.ppl_valid,
            ev.rollout_kl.expect("teacher present")
        );
    }

    println!(
        "final: epsilon {:.4} (alpha {}), test PPL {:.4}, mask violations {}",
        outcome.final_epsilon.epsilon,
        outcome.final_epsilon.best_alpha.expect("private run"),
        evaluate_perplexity(&outcome.params, &data.test)?,
        outcome.mask_violations
    );
    Ok(())
}
