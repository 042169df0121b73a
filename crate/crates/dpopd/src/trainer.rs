//! The training loop: λ-mixed on-/off-policy batch construction, teacher
//! queries, distillation gradients, DP-SGD updates, and ledger tracking,
//! plus the two baselines and all evaluation metrics.
//!
//! Per step: Poisson-subsample the private corpus; draw one Bernoulli(λ)
//! *per minibatch* deciding the branch; on-policy steps sample a fresh
//! continuation from the current student and distill on those tokens,
//! off-policy steps teacher-force the reference continuation. Either way
//! the loss touches continuation positions only, gradients are clipped
//! per example, noised, normalized by the expected lot size, and the
//! privacy ledger advances exactly once.
//!
//! Named RNG streams keep every run replayable: "init" (parameters),
//! "subsample" (one draw per record per step), "branch" (one draw per
//! step), "dp-noise" (consumed only by the noise), and one fork per
//! rollout named `rollout/s{step}/r{example id}`, so the noise and
//! subsampling at step `u` depend only on `(seed, u)` — never on batch
//! composition or rollout lengths.

use serde::{Deserialize, Serialize};

use crate::accountant::{EpsilonReport, PrivacyLedger};
use crate::data::{build_model_input, Corpus, Example, MarkovChainSpec};
use crate::distill::{cross_entropy_token, sequence_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{
    forward_logits, init_params, per_example_grad, sample_continuation, teacher_log_probs, window,
    LogProbModel, ModelConfig, Params, TeacherHandle,
};
use crate::nn::{kl_divergence, Vector};
use crate::privacy::{apply_update, clip_in_place, noisy_mean, poisson_subsample, DpConfig};
use crate::rng::RngStream;

/// Which training recipe to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// λ-mixed on-/off-policy distillation under DP-SGD.
    DpOpd,
    /// Plain DP-SGD on the references with cross-entropy; no teacher.
    DpsgdOnly,
    /// Teacher-forced distillation under DP-SGD (λ forced to 0).
    OffpolicyDpkd,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DpOpd => "dp-opd",
            Method::DpsgdOnly => "dpsgd-only",
            Method::OffpolicyDpkd => "offpolicy-dpkd",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Method::DpsgdOnly)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything one training run needs besides the data and the teacher.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub dp: DpConfig,
    /// Target δ for the ledger's (ε, δ) reports.
    pub delta: f64,
    /// Optional hard ε cap: training stops before any step that would
    /// exceed it.
    pub epsilon_budget: Option<f64>,
    pub learning_rate: f64,
    pub steps: u64,
    /// On-policy probability per step; forced to 0 by the baselines.
    pub lambda: f64,
    /// Rollout length cap L.
    pub max_new_tokens: usize,
    pub rollout_temperature: f64,
    /// Half-width of the uniform parameter init.
    pub init_scale: f64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_interval: u64,
    /// How many validation prompts the periodic rollout-KL probe uses.
    pub eval_prompts: usize,
    /// Rollouts per prompt in the rollout-KL probe.
    pub eval_rollouts: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.dp.validate()?;
        if !(self.delta.is_finite() && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.rollout_temperature.is_finite() && self.rollout_temperature > 0.0) {
            return Err(Error::Config(format!(
                "rollout_temperature must be positive, got {}",
                self.rollout_temperature
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::Config(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            )));
        }
        if let Some(cap) = self.epsilon_budget {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::Config(format!(
                    "epsilon_budget must be positive, got {cap}"
                )));
            }
        }
        Ok(())
    }

    /// The λ actually used: the baselines never take the on-policy branch.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::DpOpd => self.lambda,
            Method::DpsgdOnly | Method::OffpolicyDpkd => 0.0,
        }
    }
}

/// On-policy or teacher-forced, as logged per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    On,
    Off,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub branch: Branch,
    /// Realized lot size (Poisson-subsampled, so it varies).
    pub batch: usize,
    /// Mean per-example loss over the lot; 0 for an empty lot.
    pub loss: f64,
    /// Fraction of the lot whose gradient was rescaled.
    pub clip_frac: f64,
    /// Mean pre-clip gradient norm over the lot.
    pub grad_norm_mean: f64,
    /// ε spent after this step (infinite when σ = 0).
    pub epsilon: f64,
}

/// One periodic evaluation event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub ppl_valid: f64,
    /// Absent when the run has no teacher to probe against.
    pub rollout_kl: Option<f64>,
}

/// What a finished (or budget-stopped) run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub step_records: Vec<StepRecord>,
    pub eval_records: Vec<EvalRecord>,
    pub final_epsilon: EpsilonReport,
    /// Prompt positions that ever received a nonzero logit gradient.
    /// Always 0; counted rather than assumed so tests can assert it.
    pub mask_violations: u64,
    /// True when the ε cap stopped the run before `steps` steps.
    pub stopped_early: bool,
}

/// The per-step branch decisions a run with this seed and λ will take:
/// one Bernoulli(λ) draw per step from the "branch" stream.
pub fn branch_schedule(seed: u64, lambda: f64, steps: u64) -> Vec<bool> {
    let mut stream = RngStream::new(seed, "branch");
    (0..steps).map(|_| stream.bernoulli(lambda)).collect()
}

fn check_teacher(cfg: &TrainConfig, teacher: Option<&TeacherHandle>) -> Result<()> {
    match (cfg.method.needs_teacher(), teacher) {
        (true, None) => Err(Error::Config(format!(
            "method {} requires a teacher",
            cfg.method
        ))),
        (true, Some(t)) if t.vocab_size() != cfg.model.vocab_size => Err(Error::Config(format!(
            "teacher vocab size {} does not match student vocab size {}",
            t.vocab_size(),
            cfg.model.vocab_size
        ))),
        _ => Ok(()),
    }
}

/// Loss and flat parameter gradient for one sequence `s` whose positions
/// `offset..` are continuation. Returns the count of prompt positions that
/// received a nonzero logit gradient (always 0; instrumented for tests).
fn example_loss_grad(
    params: &Params,
    s: &[u32],
    offset: usize,
    teacher: Option<&TeacherHandle>,
    with_reference_labels: bool,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, u64)> {
    let len = s.len();
    let k = params.config().context as usize;
    let mask: Vec<bool> = (0..len).map(|t| t >= offset).collect();
    let n_masked = len - offset;
    if n_masked == 0 {
        return Err(Error::Contract(format!(
            "sequence of length {len} has no continuation"
        )));
    }

    let loss;
    let token_grads: Vec<Vector>;
    if cfg.method == Method::DpsgdOnly {
        let mut grads = vec![Vec::new(); len];
        let mut total = 0.0;
        for t in offset..len {
            let z = forward_logits(params, &window(&s[..t], k))?;
            let (l, g) = cross_entropy_token(&z, 1.0, s[t])?;
            total += l;
            grads[t] = g;
        }
        loss = total / n_masked as f64;
        token_grads = grads;
    } else {
        let teacher = teacher.expect("teacher presence was validated");
        let mut logits = vec![Vec::new(); len];
        let mut teacher_logp = vec![Vec::new(); len];
        let mut reference = vec![None; len];
        for t in offset..len {
            logits[t] = forward_logits(params, &window(&s[..t], k))?;
            teacher_logp[t] = teacher_log_probs(teacher, &s[..t], cfg.distill.tau_d)?;
            if with_reference_labels {
                reference[t] = Some(s[t]);
            }
        }
        let (l, g) = sequence_loss(&logits, &teacher_logp, &mask, &reference, &cfg.distill)?;
        loss = l;
        token_grads = g;
    }

    let violations = token_grads[..offset]
        .iter()
        .filter(|g| g.iter().any(|&x| x != 0.0))
        .count() as u64;
    let grad = per_example_grad(params, s, &mask, &token_grads)?;
    Ok((loss, grad, violations))
}

/// Run Algorithm-style training: `cfg.steps` DP-SGD steps over the private
/// corpus, λ-mixing on-policy rollouts with teacher forcing.
pub fn train(
    cfg: &TrainConfig,
    train_corpus: &Corpus,
    valid_corpus: Option<&Corpus>,
    teacher: Option<&TeacherHandle>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(cfg, teacher)?;
    if train_corpus.vocab.size() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab size {} does not match model vocab size {}",
            train_corpus.vocab.size(),
            cfg.model.vocab_size
        )));
    }
    let n = train_corpus.len();
    if n == 0 {
        return Err(Error::Config("training corpus is empty".into()));
    }

    let expected_batch = cfg.dp.sample_rate * n as f64;
    let mut ledger = PrivacyLedger::new(cfg.dp.sample_rate, cfg.dp.noise_multiplier, cfg.delta)?;
    if cfg.epsilon_budget.is_some() && ledger.non_private() {
        return Err(Error::Config(
            "an epsilon budget cap cannot be enforced with sigma = 0 (non-private run)".into(),
        ));
    }

    let branches = branch_schedule(cfg.seed, cfg.effective_lambda(), cfg.steps);
    let mut subsample = RngStream::new(cfg.seed, "subsample");
    let mut noise = RngStream::new(cfg.seed, "dp-noise");
    let mut params = init_params(
        cfg.model,
        cfg.init_scale,
        &mut RngStream::new(cfg.seed, "init"),
    )?;
    let p_count = cfg.model.param_count();

    let mut step_records = Vec::with_capacity(cfg.steps as usize);
    let mut eval_records = Vec::new();
    let mut mask_violations = 0u64;
    let mut stopped_early = false;

    for u in 1..=cfg.steps {
        if let Some(cap) = cfg.epsilon_budget {
            let mut peek = ledger.clone();
            peek.advance(1);
            if peek.epsilon().epsilon > cap {
                stopped_early = true;
                break;
            }
        }

        let picked = poisson_subsample(n, cfg.dp.sample_rate, &mut subsample);
        let on_policy = branches[(u - 1) as usize];

        let mut clipped_sum = vec![0.0; p_count];
        let mut loss_total = 0.0;
        let mut norm_total = 0.0;
        let mut clipped_count = 0usize;
        for &idx in &picked {
            let ex = &train_corpus.examples[idx];
            let (input, offset) = build_model_input(ex);
            let s: Vec<u32> = if on_policy {
                let mut rollout_stream =
                    RngStream::new(cfg.seed, &format!("rollout/s{u}/r{}", ex.id));
                let continuation = sample_continuation(
                    &params,
                    &input,
                    cfg.max_new_tokens,
                    cfg.rollout_temperature,
                    &mut rollout_stream,
                )?;
                input.iter().copied().chain(continuation).collect()
            } else {
                input
                    .iter()
                    .copied()
                    .chain(ex.reference.iter().copied())
                    .collect()
            };

            let (loss, mut grad, violations) =
                example_loss_grad(&params, &s, offset, teacher, !on_policy, cfg)?;
            mask_violations += violations;
            let outcome = clip_in_place(&mut grad, cfg.dp.clip_norm)?;
            loss_total += loss;
            norm_total += outcome.norm;
            clipped_count += outcome.clipped as usize;
            for (acc, g) in clipped_sum.iter_mut().zip(&grad) {
                *acc += g;
            }
        }

        let update = noisy_mean(&clipped_sum, expected_batch, &cfg.dp, &mut noise)?;
        apply_update(params.flat_mut(), &update, cfg.learning_rate)?;
        ledger.advance(1);
        let report = ledger.epsilon();

        let lot = picked.len();
        step_records.push(StepRecord {
            step: u,
            branch: if on_policy { Branch::On } else { Branch::Off },
            batch: lot,
            loss: if lot > 0 {
                loss_total / lot as f64
            } else {
                0.0
            },
            clip_frac: if lot > 0 {
                clipped_count as f64 / lot as f64
            } else {
                0.0
            },
            grad_norm_mean: if lot > 0 {
                norm_total / lot as f64
            } else {
                0.0
            },
            epsilon: report.epsilon,
        });

        if cfg.eval_interval > 0 && u % cfg.eval_interval == 0 {
            if let Some(valid) = valid_corpus {
                let ppl_valid = evaluate_perplexity(&params, valid)?;
                let rollout_kl = match teacher {
                    Some(t) => {
                        let prompts: Vec<Example> = valid
                            .examples
                            .iter()
                            .take(cfg.eval_prompts.max(1))
                            .cloned()
                            .collect();
                        let probe = RngStream::new(cfg.seed, &format!("eval-probe/s{u}"));
                        Some(evaluate_rollout_kl(
                            &params,
                            t,
                            &prompts,
                            cfg.eval_rollouts.max(1),
                            cfg.max_new_tokens,
                            cfg.rollout_temperature,
                            &probe,
                        )?)
                    }
                    None => None,
                };
                eval_records.push(EvalRecord {
                    step: u,
                    ppl_valid,
                    rollout_kl,
                });
            }
        }
    }

    let final_epsilon = ledger.epsilon();
    Ok(TrainOutcome {
        params,
        step_records,
        eval_records,
        final_epsilon,
        mask_violations,
        stopped_early,
    })
}

/// Non-private cross-entropy SGD over a public corpus: the neural teacher.
/// Fixed-order minibatches, mean gradient, no clipping, no noise.
pub fn train_teacher_public(
    corpus: &Corpus,
    model: ModelConfig,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    init_scale: f64,
    seed: u64,
) -> Result<Params> {
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("public corpus is empty".into()));
    }
    if corpus.vocab.size() != model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab size {} does not match model vocab size {}",
            corpus.vocab.size(),
            model.vocab_size
        )));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be positive, got {learning_rate}"
        )));
    }

    let mut params = init_params(model, init_scale, &mut RngStream::new(seed, "teacher-init"))?;
    let k = model.context as usize;
    let p_count = model.param_count();
    for _ in 0..epochs {
        for chunk in corpus.examples.chunks(batch_size) {
            let mut sum = vec![0.0; p_count];
            for ex in chunk {
                let (input, offset) = build_model_input(ex);
                let s: Vec<u32> = input
                    .iter()
                    .copied()
                    .chain(ex.reference.iter().copied())
                    .collect();
                let len = s.len();
                let mask: Vec<bool> = (0..len).map(|t| t >= offset).collect();
                let mut token_grads = vec![Vec::new(); len];
                for t in offset..len {
                    let z = forward_logits(&params, &window(&s[..t], k))?;
                    let (_, g) = cross_entropy_token(&z, 1.0, s[t])?;
                    token_grads[t] = g;
                }
                let grad = per_example_grad(&params, &s, &mask, &token_grads)?;
                for (acc, g) in sum.iter_mut().zip(&grad) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let update: Vec<f64> = sum.iter().map(|&x| x * scale).collect();
            apply_update(params.flat_mut(), &update, learning_rate)?;
        }
    }
    Ok(params)
}

/// Teacher-forced perplexity over a corpus split: `exp` of the mean
/// negative log-likelihood (natural log, temperature 1) of continuation
/// tokens given their reference prefixes. Prompt positions are excluded.
pub fn evaluate_perplexity(model: &impl LogProbModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty corpus".into(),
        ));
    }
    if corpus.vocab.size() != model.vocab_size() {
        return Err(Error::InvalidArgument(format!(
            "corpus vocab size {} does not match model vocab size {}",
            corpus.vocab.size(),
            model.vocab_size()
        )));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in &corpus.examples {
        let (input, offset) = build_model_input(ex);
        let s: Vec<u32> = input
            .iter()
            .copied()
            .chain(ex.reference.iter().copied())
            .collect();
        for t in offset..s.len() {
            let lp = model.log_probs(&s[..t])?;
            nll -= lp[s[t] as usize];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Perplexity the chain itself assigns in expectation: `exp` of the mean
/// conditional entropy of the true next-token distribution at every
/// continuation position of the corpus. An infinite corpus drawn from the
/// chain would pin teacher-forced NLL to exactly this.
pub fn chain_entropy_ppl(spec: &MarkovChainSpec, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty corpus".into(),
        ));
    }
    corpus.verify_chain(spec)?;
    let vocab = spec.vocab();
    let mut entropy = 0.0;
    let mut count = 0usize;
    for ex in &corpus.examples {
        let (input, offset) = build_model_input(ex);
        let s: Vec<u32> = input
            .iter()
            .copied()
            .chain(ex.reference.iter().copied())
            .collect();
        for t in offset..s.len() {
            let row = spec.next_distribution(&s[..t])?;
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            entropy += h;
            count += 1;
        }
        let _ = vocab;
    }
    Ok((entropy / count as f64).exp())
}

/// Exposure-bias probe: sample `rollouts_per_prompt` student continuations
/// per prompt and return the mean, over every visited state, of
/// `KL(p_T(.|state) || p_S(.|state))` at temperature 1.
pub fn evaluate_rollout_kl(
    student: &Params,
    teacher: &TeacherHandle,
    prompts: &[Example],
    rollouts_per_prompt: usize,
    max_new_tokens: usize,
    temperature: f64,
    stream: &RngStream,
) -> Result<f64> {
    if prompts.is_empty() || rollouts_per_prompt == 0 {
        return Err(Error::InvalidArgument(
            "rollout KL needs at least one prompt and one rollout".into(),
        ));
    }
    if teacher.vocab_size() != student.config().vocab_size {
        return Err(Error::InvalidArgument(format!(
            "teacher vocab size {} does not match student vocab size {}",
            teacher.vocab_size(),
            student.config().vocab_size
        )));
    }
    let mut total = 0.0;
    let mut states = 0usize;
    for ex in prompts {
        let (input, _) = build_model_input(ex);
        for r in 0..rollouts_per_prompt {
            let mut rollout_stream = stream.fork(&format!("e{}/r{r}", ex.id));
            let continuation = sample_continuation(
                student,
                &input,
                max_new_tokens,
                temperature,
                &mut rollout_stream,
            )?;
            let s: Vec<u32> = input.iter().copied().chain(continuation).collect();
            for t in input.len()..s.len() {
                let p_t: Vector = teacher
                    .log_probs(&s[..t])?
                    .iter()
                    .map(|&x| x.exp())
                    .collect();
                let log_p_s = student.log_probs(&s[..t])?;
                total += kl_divergence(&p_t, &log_p_s)?;
                states += 1;
            }
        }
    }
    Ok(total / states as f64)
}

/// One training run per β from identical initialization (the init stream
/// depends only on the seed, which is shared). Returns `(β, test PPL)` rows.
pub fn run_beta_sweep(
    base: &TrainConfig,
    betas: &[f64],
    train_corpus: &Corpus,
    test_corpus: &Corpus,
    teacher: &TeacherHandle,
) -> Result<Vec<(f64, f64)>> {
    if betas.is_empty() {
        return Err(Error::InvalidArgument(
            "beta sweep needs at least one beta".into(),
        ));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut cfg = base.clone();
        cfg.distill.beta = beta;
        let outcome = train(&cfg, train_corpus, None, Some(teacher))?;
        let ppl = evaluate_perplexity(&outcome.params, test_corpus)?;
        rows.push((beta, ppl));
    }
    Ok(rows)
}
