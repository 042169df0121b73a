//! The `dpopd` binary: corpus generation, teacher and student training,
//! evaluation, privacy accounting, and the two experiment harnesses
//! (method comparison, β sweep).
//!
//! Every command prints a single-line JSON summary (or a CSV table) to
//! stdout and writes artifacts only under its output directory. Exit codes:
//! 0 success, 2 usage or config error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::accountant::{calibrate_sigma, PrivacyLedger};
use crate::config::{load_config, RunConfigFile, TeacherKind, TeacherSection};
use crate::data::{
    generate_chain, read_corpus, sample_corpus, sample_split, write_corpus, Corpus,
    MarkovChainSpec, Split, SplitSizes, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{load_params, save_params, ModelConfig, TeacherHandle};
use crate::rng::RngStream;
use crate::trainer::{
    evaluate_perplexity, evaluate_rollout_kl, run_beta_sweep, train, train_teacher_public, Branch,
    EvalRecord, Method, StepRecord, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(
    name = "dpopd",
    version,
    about = "Differentially private on-policy distillation, end to end on one desk"
)]
pub struct Cli {
    /// Run configuration file (train, compare, sweep-beta).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file's `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record the run as bit-reproducible (execution is sequential either way).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory; overrides the config file's `run.out_dir`.
    #[arg(long, global = true, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a control-coded Markov chain and write its corpus files.
    GenData(GenDataArgs),
    /// Train the non-private neural teacher on the public corpus.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student per the config file; writes a full run directory.
    Train(TrainArgs),
    /// Report perplexity (and optionally rollout KL) for saved parameters.
    Eval(EvalArgs),
    /// Run all three methods over a seed list and tabulate test metrics.
    Compare(CompareArgs),
    /// Convert (q, sigma, steps, delta) into a spent (epsilon, delta).
    Account(AccountArgs),
    /// Calibrate the noise multiplier for a target epsilon.
    Calibrate(CalibrateArgs),
    /// Train one student per beta on a shared init and tabulate test PPL.
    SweepBeta(SweepBetaArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&cli, args),
        Command::TrainTeacher(args) => cmd_train_teacher(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Compare(args) => cmd_compare(&cli, args),
        Command::Account(args) => cmd_account(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::SweepBeta(args) => cmd_sweep_beta(&cli, args),
    }
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Total vocabulary size (PAD, BOS, EOS, codes, content).
    #[arg(long, default_value_t = 32)]
    pub vocab_size: u32,
    /// Number of control-code tokens.
    #[arg(long, default_value_t = 4)]
    pub num_codes: u32,
    /// Markov order m.
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    /// Symmetric Dirichlet concentration for the transition rows.
    #[arg(long, default_value_t = 0.5)]
    pub concentration: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_valid: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    /// Public-corpus size for teacher pretraining (drawn from a separate
    /// stream, so its records are disjoint from the private splits).
    #[arg(long, default_value_t = 2000)]
    pub n_public: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 40)]
    pub total_len: usize,
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    for (name, n) in [
        ("--n-train", args.n_train),
        ("--n-valid", args.n_valid),
        ("--n-test", args.n_test),
        ("--n-public", args.n_public),
    ] {
        if n == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
    }
    let seed = cli.seed.unwrap_or(0);
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
    create_dir(&out_dir)?;

    let vocab = Vocab::new(args.vocab_size, args.num_codes)?;
    let spec = generate_chain(
        vocab,
        args.order,
        args.concentration,
        &mut RngStream::new(seed, "chain"),
    )?;
    let sizes = SplitSizes {
        train: args.n_train,
        valid: args.n_valid,
        test: args.n_test,
    };
    let set = sample_corpus(
        &spec,
        sizes,
        args.prompt_len,
        args.total_len,
        &mut RngStream::new(seed, "data"),
    )?;
    let public = sample_split(
        &spec,
        args.n_public,
        args.prompt_len,
        args.total_len,
        Split::Public,
        0,
        &mut RngStream::new(seed, "public-data"),
    )?;

    let chain_path = out_dir.join("chain.json");
    spec.save(&chain_path)?;
    let mut written = vec![chain_path];
    for (corpus, name) in [
        (&set.train, "train.corpus"),
        (&set.valid, "valid.corpus"),
        (&set.test, "test.corpus"),
        (&public, "public.corpus"),
    ] {
        let path = out_dir.join(name);
        write_corpus(corpus, &path)?;
        written.push(path);
    }
    for path in &written {
        println!("{}  {}", sha256_file(path)?, path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-teacher

#[derive(Args, Debug)]
pub struct TrainTeacherArgs {
    /// Public corpus to train on.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Where to write the parameters (default: <out-dir>/teacher.params).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Context window length k.
    #[arg(long, default_value_t = 42)]
    pub context: u32,
    #[arg(long, default_value_t = 12)]
    pub embed_dim: u32,
    #[arg(long, default_value_t = 48)]
    pub hidden_dim: u32,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    /// Corpus for the reported perplexity (default: the training corpus).
    #[arg(long, value_name = "PATH")]
    pub eval: Option<PathBuf>,
}

fn cmd_train_teacher(cli: &Cli, args: &TrainTeacherArgs) -> Result<()> {
    let corpus = read_corpus(&args.data)?;
    let model = ModelConfig {
        vocab_size: corpus.vocab.size(),
        context: args.context,
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
    };
    let params = train_teacher_public(
        &corpus,
        model,
        args.epochs,
        args.batch_size,
        args.learning_rate,
        args.init_scale,
        cli.seed.unwrap_or(0),
    )?;

    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            create_dir(&dir)?;
            dir.join("teacher.params")
        }
    };
    save_params(&params, &out)?;

    let (eval_corpus, tag);
    match &args.eval {
        Some(p) => {
            eval_corpus = read_corpus(p)?;
            tag = eval_corpus.split.to_string();
        }
        None => {
            tag = corpus.split.to_string();
            eval_corpus = corpus;
        }
    }
    let ppl = evaluate_perplexity(&params, &eval_corpus)?;
    let mut obj = serde_json::Map::new();
    obj.insert("params".into(), out.display().to_string().into());
    obj.insert(format!("ppl_{tag}"), ppl.into());
    println!("{}", serde_json::Value::Object(obj));
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug)]
pub struct TrainArgs {}

#[derive(Serialize)]
struct TrainSummary<'a> {
    out_dir: &'a str,
    method: &'a str,
    steps_run: usize,
    stopped_early: bool,
    epsilon: f64,
    delta: f64,
    sigma: f64,
    final_ppl_valid: Option<f64>,
}

fn cmd_train(cli: &Cli, _args: &TrainArgs) -> Result<()> {
    let file = config_for(cli)?;
    let run = execute_run(&file)?;
    let summary = TrainSummary {
        out_dir: &file.run.out_dir,
        method: file.method.as_str(),
        steps_run: run.outcome.step_records.len(),
        stopped_early: run.outcome.stopped_early,
        epsilon: run.outcome.final_epsilon.epsilon,
        delta: run.delta,
        sigma: run.sigma,
        final_ppl_valid: run.outcome.eval_records.last().map(|e| e.ppl_valid),
    };
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    Ok(())
}

/// A finished training run plus the artifacts it wrote.
struct FinishedRun {
    outcome: TrainOutcome,
    teacher: Option<TeacherHandle>,
    sigma: f64,
    delta: f64,
}

/// The shared pipeline behind `train`, `compare`, and the resolved half of
/// `sweep-beta`: read corpora, load and verify the teacher, resolve the
/// config (calibrating σ if needed), train, and write the run directory
/// (resolved config snapshot, metrics log, final parameters, manifest).
fn execute_run(file: &RunConfigFile) -> Result<FinishedRun> {
    let train_corpus = read_corpus(Path::new(&file.data.train))?;
    let valid_corpus = match &file.data.valid {
        Some(p) => Some(read_corpus(Path::new(p))?),
        None => None,
    };
    let teacher = match &file.model.teacher {
        Some(section) => Some(load_teacher(section, &train_corpus)?),
        None => None,
    };

    let resolved = file.resolve(train_corpus.len(), train_corpus.vocab.size())?;
    if resolved.calibration_at_floor {
        eprintln!(
            "warning: noise calibration stopped at the minimum sigma; \
             the run spends less than the targeted epsilon"
        );
    }

    let out_dir = PathBuf::from(&file.run.out_dir);
    create_dir(&out_dir)?;
    resolved
        .snapshot
        .save(&out_dir.join("resolved_config.json"))?;

    let outcome = train(
        &resolved.train,
        &train_corpus,
        valid_corpus.as_ref(),
        teacher.as_ref(),
    )?;

    write_metrics(&out_dir.join("metrics.jsonl"), &outcome)?;
    save_params(&outcome.params, &out_dir.join("student.params"))?;
    write_manifest(&out_dir)?;

    Ok(FinishedRun {
        outcome,
        teacher,
        sigma: resolved.train.dp.noise_multiplier,
        delta: resolved.train.delta,
    })
}

fn load_teacher(section: &TeacherSection, corpus: &Corpus) -> Result<TeacherHandle> {
    match section.kind {
        TeacherKind::Oracle => {
            let spec = MarkovChainSpec::load(Path::new(&section.path))?;
            corpus.verify_chain(&spec)?;
            Ok(TeacherHandle::Oracle(spec))
        }
        TeacherKind::Neural => Ok(TeacherHandle::Neural(load_params(Path::new(
            &section.path,
        ))?)),
    }
}

#[derive(Serialize)]
struct StepLine {
    kind: &'static str,
    step: u64,
    branch: Branch,
    batch: usize,
    loss: f64,
    clip_frac: f64,
    grad_norm_mean: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct EvalLine {
    kind: &'static str,
    step: u64,
    ppl_valid: f64,
    rollout_kl: Option<f64>,
}

fn step_line(r: &StepRecord) -> String {
    let line = StepLine {
        kind: "step",
        step: r.step,
        branch: r.branch,
        batch: r.batch,
        loss: r.loss,
        clip_frac: r.clip_frac,
        grad_norm_mean: r.grad_norm_mean,
        epsilon: r.epsilon,
    };
    serde_json::to_string(&line).expect("step record serializes")
}

fn eval_line(r: &EvalRecord) -> String {
    let line = EvalLine {
        kind: "eval",
        step: r.step,
        ppl_valid: r.ppl_valid,
        rollout_kl: r.rollout_kl,
    };
    serde_json::to_string(&line).expect("eval record serializes")
}

/// One JSON object per line: each step record, with any evaluation taken
/// after that step interleaved right behind it.
fn write_metrics(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut text = String::new();
    let mut evals = outcome.eval_records.iter().peekable();
    for rec in &outcome.step_records {
        text.push_str(&step_line(rec));
        text.push('\n');
        while evals.peek().is_some_and(|e| e.step <= rec.step) {
            text.push_str(&eval_line(evals.next().expect("peeked")));
            text.push('\n');
        }
    }
    for rec in evals {
        text.push_str(&eval_line(rec));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `manifest.json`: sha256 of every other artifact in the run directory,
/// so a rerun can be checked file-for-file.
fn write_manifest(out_dir: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest {
        config: &'static str,
        files: BTreeMap<String, String>,
    }
    let mut files = BTreeMap::new();
    for name in ["resolved_config.json", "metrics.jsonl", "student.params"] {
        files.insert(name.to_string(), sha256_file(&out_dir.join(name))?);
    }
    let manifest = Manifest {
        config: "resolved_config.json",
        files,
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum TeacherKindArg {
    Oracle,
    Neural,
}

impl From<TeacherKindArg> for TeacherKind {
    fn from(k: TeacherKindArg) -> TeacherKind {
        match k {
            TeacherKindArg::Oracle => TeacherKind::Oracle,
            TeacherKindArg::Neural => TeacherKind::Neural,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Student parameter file.
    #[arg(long, value_name = "PATH")]
    pub params: PathBuf,
    /// Corpus to evaluate on.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Tag for the printed perplexity key (default: the corpus's own split).
    #[arg(long)]
    pub split: Option<String>,
    /// Teacher for the rollout-KL probe; omit to skip the probe.
    #[arg(long, value_enum, requires = "teacher_path")]
    pub teacher_kind: Option<TeacherKindArg>,
    #[arg(long, value_name = "PATH", requires = "teacher_kind")]
    pub teacher_path: Option<PathBuf>,
    /// Prompts drawn from the corpus for the probe.
    #[arg(long, default_value_t = 32)]
    pub eval_prompts: usize,
    #[arg(long, default_value_t = 1)]
    pub eval_rollouts: usize,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let params = load_params(&args.params)?;
    let corpus = read_corpus(&args.data)?;
    let tag = args
        .split
        .clone()
        .unwrap_or_else(|| corpus.split.to_string());
    let ppl = evaluate_perplexity(&params, &corpus)?;

    let rollout_kl = match (&args.teacher_kind, &args.teacher_path) {
        (Some(kind), Some(path)) => {
            let section = TeacherSection {
                kind: (*kind).into(),
                path: path.display().to_string(),
            };
            let teacher = load_teacher(&section, &corpus)?;
            let n = args.eval_prompts.min(corpus.len());
            let stream = RngStream::new(cli.seed.unwrap_or(0), "eval-probe");
            Some(evaluate_rollout_kl(
                &params,
                &teacher,
                &corpus.examples[..n],
                args.eval_rollouts,
                args.max_new_tokens,
                args.temperature,
                &stream,
            )?)
        }
        _ => None,
    };

    let mut obj = serde_json::Map::new();
    obj.insert(format!("ppl_{tag}"), ppl.into());
    obj.insert("rollout_kl".into(), rollout_kl.into());
    println!("{}", serde_json::Value::Object(obj));
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated seed list; at least 3.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
}

const COMPARE_METHODS: [Method; 3] = [Method::DpOpd, Method::OffpolicyDpkd, Method::DpsgdOnly];

fn cmd_compare(cli: &Cli, args: &CompareArgs) -> Result<()> {
    if args.seeds.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "compare needs at least 3 seeds, got {}",
            args.seeds.len()
        )));
    }
    let base = config_for(cli)?;
    let test_path =
        base.data.test.clone().ok_or_else(|| {
            Error::Config("config field `data.test`: required for compare".into())
        })?;
    if base.model.teacher.is_none() {
        return Err(Error::Config(
            "config field `model.teacher`: required for compare".into(),
        ));
    }
    let test_corpus = read_corpus(Path::new(&test_path))?;
    let base_dir = PathBuf::from(&base.run.out_dir);
    create_dir(&base_dir)?;

    let mut rows: Vec<(Method, u64, f64, f64)> = Vec::new();
    for method in COMPARE_METHODS {
        for &seed in &args.seeds {
            let mut file = base.clone();
            file.method = method;
            file.run.seed = seed;
            file.run.out_dir = base_dir
                .join(format!("{method}-s{seed}"))
                .display()
                .to_string();
            let run = execute_run(&file)?;
            let teacher = run.teacher.as_ref().expect("teacher checked above");

            let ppl = evaluate_perplexity(&run.outcome.params, &test_corpus)?;
            let n = file.run.eval_prompts.min(test_corpus.len());
            let stream = RngStream::new(seed, "compare-probe");
            let kl = evaluate_rollout_kl(
                &run.outcome.params,
                teacher,
                &test_corpus.examples[..n],
                file.run.eval_rollouts,
                file.rollout.max_new_tokens,
                file.rollout.temperature,
                &stream,
            )?;
            rows.push((method, seed, ppl, kl));
        }
    }

    let csv = comparison_csv(&rows);
    let csv_path = base_dir.join("compare.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    print!("{csv}");
    Ok(())
}

/// Seed rows grouped by method, then one `mean±stddev` summary row per
/// method (sample standard deviation).
fn comparison_csv(rows: &[(Method, u64, f64, f64)]) -> String {
    let mut csv = String::from("method,seed,ppl_test,rollout_kl\n");
    for (method, seed, ppl, kl) in rows {
        csv.push_str(&format!("{method},{seed},{ppl},{kl}\n"));
    }
    for method in COMPARE_METHODS {
        let ppls: Vec<f64> = rows.iter().filter(|r| r.0 == method).map(|r| r.2).collect();
        let kls: Vec<f64> = rows.iter().filter(|r| r.0 == method).map(|r| r.3).collect();
        if ppls.is_empty() {
            continue;
        }
        csv.push_str(&format!(
            "{method},mean±stddev,{},{}\n",
            mean_stddev(&ppls),
            mean_stddev(&kls)
        ));
    }
    csv
}

fn mean_stddev(xs: &[f64]) -> String {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    format!("{:.4}±{:.4}", mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// account / calibrate

#[derive(Args, Debug)]
pub struct AccountArgs {
    /// Poisson sample rate.
    #[arg(long)]
    pub q: f64,
    /// Noise multiplier; 0 means non-private.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub steps: u64,
    /// Target delta (or derive it with --n).
    #[arg(long, conflicts_with = "n")]
    pub delta: Option<f64>,
    /// Private corpus size N, giving delta = 1/N.
    #[arg(long)]
    pub n: Option<u64>,
}

fn resolve_delta(delta: Option<f64>, n: Option<u64>) -> Result<f64> {
    match (delta, n) {
        (Some(d), _) => Ok(d),
        (None, Some(n)) if n > 0 => Ok(1.0 / n as f64),
        (None, Some(n)) => Err(Error::InvalidArgument(format!(
            "--n must be positive, got {n}"
        ))),
        (None, None) => Err(Error::InvalidArgument(
            "one of --delta and --n is required".into(),
        )),
    }
}

#[derive(Serialize)]
struct AccountOut {
    epsilon: f64,
    delta: f64,
    best_alpha: Option<u32>,
    steps: u64,
    q: f64,
    sigma: f64,
}

fn cmd_account(args: &AccountArgs) -> Result<()> {
    let delta = resolve_delta(args.delta, args.n)?;
    let mut ledger = PrivacyLedger::new(args.q, args.sigma, delta)?;
    ledger.advance(args.steps);
    let report = ledger.epsilon();
    let out = AccountOut {
        epsilon: report.epsilon,
        delta,
        best_alpha: report.best_alpha,
        steps: args.steps,
        q: args.q,
        sigma: args.sigma,
    };
    println!(
        "{}",
        serde_json::to_string(&out).expect("report serializes")
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Poisson sample rate.
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub steps: u64,
    /// Target epsilon.
    #[arg(long)]
    pub epsilon: f64,
    /// Target delta (or derive it with --n).
    #[arg(long, conflicts_with = "n")]
    pub delta: Option<f64>,
    /// Private corpus size N, giving delta = 1/N.
    #[arg(long)]
    pub n: Option<u64>,
}

#[derive(Serialize)]
struct CalibrateOut {
    sigma: f64,
    epsilon: f64,
    best_alpha: u32,
    delta: f64,
    hit_lower_bound: bool,
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let delta = resolve_delta(args.delta, args.n)?;
    let cal = calibrate_sigma(args.q, args.steps, args.epsilon, delta)?;
    if cal.hit_lower_bound {
        eprintln!(
            "warning: noise calibration stopped at the minimum sigma; \
             the mechanism spends less than the targeted epsilon"
        );
    }
    let out = CalibrateOut {
        sigma: cal.sigma,
        epsilon: cal.epsilon,
        best_alpha: cal.best_alpha,
        delta,
        hit_lower_bound: cal.hit_lower_bound,
    };
    println!(
        "{}",
        serde_json::to_string(&out).expect("report serializes")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-beta

#[derive(Args, Debug)]
pub struct SweepBetaArgs {
    /// Comma-separated beta grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.5, 0.7, 1.0])]
    pub betas: Vec<f64>,
    /// Mixing weight during the sweep (default: on-policy every step).
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

fn cmd_sweep_beta(cli: &Cli, args: &SweepBetaArgs) -> Result<()> {
    let mut file = config_for(cli)?;
    file.rollout.lambda = args.lambda;
    let test_path =
        file.data.test.clone().ok_or_else(|| {
            Error::Config("config field `data.test`: required for sweep-beta".into())
        })?;
    let teacher_section = file.model.teacher.clone().ok_or_else(|| {
        Error::Config("config field `model.teacher`: required for sweep-beta".into())
    })?;

    let train_corpus = read_corpus(Path::new(&file.data.train))?;
    let test_corpus = read_corpus(Path::new(&test_path))?;
    let teacher = load_teacher(&teacher_section, &train_corpus)?;
    let resolved = file.resolve(train_corpus.len(), train_corpus.vocab.size())?;

    let rows = run_beta_sweep(
        &resolved.train,
        &args.betas,
        &train_corpus,
        &test_corpus,
        &teacher,
    )?;

    let mut csv = String::from("beta,ppl_test\n");
    for (beta, ppl) in &rows {
        csv.push_str(&format!("{beta},{ppl}\n"));
    }
    let out_dir = PathBuf::from(&file.run.out_dir);
    create_dir(&out_dir)?;
    let csv_path = out_dir.join("beta_sweep.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Load the config named by --config and fold the global overrides in.
fn config_for(cli: &Cli) -> Result<RunConfigFile> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let mut file = load_config(path)?;
    if let Some(seed) = cli.seed {
        file.run.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        file.run.out_dir = dir.display().to_string();
    }
    if cli.deterministic {
        file.run.deterministic = true;
    }
    Ok(file)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
