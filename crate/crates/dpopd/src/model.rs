//! The student network and the frozen teacher.
//!
//! The student is a windowed feed-forward next-token model:
//!
//! ```text
//! logits = W2' * tanh(W1' * concat(E[window]) + b1) + b2
//! ```
//!
//! where the window is the last `k` tokens of the prefix, left-padded with
//! PAD. Parameters live in one flat `f64` buffer (groups `E, W1, b1, W2, b2`
//! in that order), which is what per-example clipping, noising, and the
//! parameter file format all operate on. Gradients are hand-derived and
//! checked against central differences in the test suite.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::data::{MarkovChainSpec, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{l2_norm, log_softmax, sample_categorical, softmax_with_temperature, Vector};
use crate::rng::RngStream;

const MAGIC: &[u8; 8] = b"DPOPDMDL";
const FORMAT_VERSION: u32 = 1;

/// Floor applied to external probability distributions before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Architecture of a windowed feed-forward model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size `V`.
    pub vocab_size: u32,
    /// Context window length `k`.
    pub context: u32,
    /// Embedding width `d`.
    pub embed_dim: u32,
    /// Hidden width `h`.
    pub hidden_dim: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} leaves no room for PAD/BOS/EOS",
                self.vocab_size
            )));
        }
        if self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: k={} d={} h={}",
                self.context, self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Total flat parameter count
    /// `P = V*d + (k*d)*h + h + h*V + V`.
    pub fn param_count(&self) -> usize {
        let v = self.vocab_size as usize;
        let k = self.context as usize;
        let d = self.embed_dim as usize;
        let h = self.hidden_dim as usize;
        v * d + k * d * h + h + h * v + v
    }
}

/// Flat parameter buffer plus the shape needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    flat: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Params {
    pub fn zeros(config: ModelConfig) -> Result<Params> {
        config.validate()?;
        Ok(Params {
            config,
            flat: vec![0.0; config.param_count()],
        })
    }

    pub fn from_flat(config: ModelConfig, flat: Vec<f64>) -> Result<Params> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                config.param_count()
            )));
        }
        Ok(Params { config, flat })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    fn offsets(&self) -> Offsets {
        let v = self.config.vocab_size as usize;
        let k = self.config.context as usize;
        let d = self.config.embed_dim as usize;
        let h = self.config.hidden_dim as usize;
        let w1 = v * d;
        let b1 = w1 + k * d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        Offsets { w1, b1, w2, b2 }
    }

    /// Embedding row of a token.
    pub fn embedding(&self, tok: u32) -> &[f64] {
        let d = self.config.embed_dim as usize;
        let base = tok as usize * d;
        &self.flat[base..base + d]
    }
}

/// Last `k` tokens of `prefix`, left-padded with PAD.
pub fn window(prefix: &[u32], k: usize) -> Vec<u32> {
    let mut out = vec![PAD; k];
    fill_window(prefix, &mut out);
    out
}

fn fill_window(prefix: &[u32], buf: &mut [u32]) {
    let k = buf.len();
    let take = prefix.len().min(k);
    buf[..k - take].fill(PAD);
    buf[k - take..].copy_from_slice(&prefix[prefix.len() - take..]);
}

fn check_window(params: &Params, ctx: &[u32]) -> Result<()> {
    let k = params.config.context as usize;
    if ctx.len() != k {
        return Err(Error::InvalidArgument(format!(
            "context window has length {}, expected k = {k}",
            ctx.len()
        )));
    }
    if let Some(&t) = ctx.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token {t} exceeds vocab size {}",
            params.config.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass for one length-`k` window; returns the `V` logits.
pub fn forward_logits(params: &Params, ctx: &[u32]) -> Result<Vector> {
    check_window(params, ctx)?;
    let mut scratch = Scratch::new(&params.config);
    forward_into(params, ctx, &mut scratch);
    Ok(scratch.logits)
}

/// Reusable activation buffers for the forward/backward passes.
struct Scratch {
    x: Vec<f64>,      // concatenated window embeddings, k*d
    act: Vec<f64>,    // tanh hidden, h
    logits: Vec<f64>, // V
    d_act: Vec<f64>,  // h
    d_x: Vec<f64>,    // k*d
}

impl Scratch {
    fn new(config: &ModelConfig) -> Scratch {
        let kd = config.context as usize * config.embed_dim as usize;
        let h = config.hidden_dim as usize;
        Scratch {
            x: vec![0.0; kd],
            act: vec![0.0; h],
            logits: vec![0.0; config.vocab_size as usize],
            d_act: vec![0.0; h],
            d_x: vec![0.0; kd],
        }
    }
}

fn forward_into(params: &Params, ctx: &[u32], s: &mut Scratch) {
    let d = params.config.embed_dim as usize;
    let h = params.config.hidden_dim as usize;
    let v = params.config.vocab_size as usize;
    let kd = s.x.len();
    let off = params.offsets();

    for (slot, &tok) in ctx.iter().enumerate() {
        s.x[slot * d..(slot + 1) * d].copy_from_slice(params.embedding(tok));
    }
    let w1 = &params.flat[off.w1..off.b1];
    let b1 = &params.flat[off.b1..off.w2];
    for j in 0..h {
        let mut pre = b1[j];
        for i in 0..kd {
            pre += s.x[i] * w1[i * h + j];
        }
        s.act[j] = pre.tanh();
    }
    let w2 = &params.flat[off.w2..off.b2];
    let b2 = &params.flat[off.b2..];
    s.logits.copy_from_slice(b2);
    for j in 0..h {
        let aj = s.act[j];
        let row = &w2[j * v..(j + 1) * v];
        for (zv, &w) in s.logits.iter_mut().zip(row) {
            *zv += aj * w;
        }
    }
}

/// Exact gradient of the per-token-mean loss of one example.
///
/// `logit_grads[t]` must hold `d(token loss at t)/d(logits at t)` for every
/// masked position and may be empty elsewhere. The returned flat vector is
/// the sum of the backpropagated cotangents divided by the number of masked
/// positions, matching a loss defined as the mean over continuation tokens.
/// An all-false mask yields the zero vector. Sampled tokens are inputs here,
/// never differentiated through.
pub fn per_example_grad(
    params: &Params,
    tokens: &[u32],
    mask: &[bool],
    logit_grads: &[Vector],
) -> Result<Vec<f64>> {
    if mask.len() != tokens.len() || logit_grads.len() != tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "per_example_grad: tokens/mask/grads lengths {} / {} / {} differ",
            tokens.len(),
            mask.len(),
            logit_grads.len()
        )));
    }
    let cfg = params.config;
    let v = cfg.vocab_size as usize;
    let d = cfg.embed_dim as usize;
    let h = cfg.hidden_dim as usize;
    let k = cfg.context as usize;
    let off = params.offsets();

    let mut grad = vec![0.0; params.flat.len()];
    let mut scratch = Scratch::new(&cfg);
    let mut ctx = vec![PAD; k];
    let mut n_masked = 0usize;

    for t in 0..tokens.len() {
        if !mask[t] {
            continue;
        }
        let dz = &logit_grads[t];
        if dz.len() != v {
            return Err(Error::InvalidArgument(format!(
                "logit gradient at position {t} has length {}, expected {v}",
                dz.len()
            )));
        }
        n_masked += 1;
        fill_window(&tokens[..t], &mut ctx);
        check_window(params, &ctx)?;
        forward_into(params, &ctx, &mut scratch);

        // b2
        for (g, &dzv) in grad[off.b2..].iter_mut().zip(dz) {
            *g += dzv;
        }
        // W2 and d_act
        let w2 = &params.flat[off.w2..off.b2];
        for j in 0..h {
            let aj = scratch.act[j];
            let row = &w2[j * v..(j + 1) * v];
            let grow = &mut grad[off.w2 + j * v..off.w2 + (j + 1) * v];
            let mut da = 0.0;
            for vv in 0..v {
                grow[vv] += aj * dz[vv];
                da += row[vv] * dz[vv];
            }
            scratch.d_act[j] = da;
        }
        // through tanh, then b1, W1, and d_x
        let w1 = &params.flat[off.w1..off.b1];
        let kd = k * d;
        scratch.d_x.fill(0.0);
        for j in 0..h {
            let dpre = scratch.d_act[j] * (1.0 - scratch.act[j] * scratch.act[j]);
            grad[off.b1 + j] += dpre;
            if dpre == 0.0 {
                continue;
            }
            for i in 0..kd {
                grad[off.w1 + i * h + j] += scratch.x[i] * dpre;
                scratch.d_x[i] += w1[i * h + j] * dpre;
            }
        }
        // scatter into embedding rows
        for (slot, &tok) in ctx.iter().enumerate() {
            let base = tok as usize * d;
            for i in 0..d {
                grad[base + i] += scratch.d_x[slot * d + i];
            }
        }
    }

    if n_masked > 0 {
        let scale = 1.0 / n_masked as f64;
        for g in &mut grad {
            *g *= scale;
        }
    }
    Ok(grad)
}

/// Ancestral sampling continuation of `prefix`: up to `max_new` tokens at
/// `temperature`, stopping after an EOS draw (which is kept). Consumes one
/// uniform per generated token, so truncating `max_new` yields a prefix of
/// the longer rollout under the same stream state.
pub fn sample_continuation(
    params: &Params,
    prefix: &[u32],
    max_new: usize,
    temperature: f64,
    stream: &mut RngStream,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be at least 1".into()));
    }
    let k = params.config.context as usize;
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(max_new);
    let mut ctx = vec![PAD; k];
    let mut scratch = Scratch::new(&params.config);
    for _ in 0..max_new {
        fill_window(&seq, &mut ctx);
        check_window(params, &ctx)?;
        forward_into(params, &ctx, &mut scratch);
        let p = softmax_with_temperature(&scratch.logits, temperature)?;
        let tok = sample_categorical(&p, stream)? as u32;
        out.push(tok);
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Uniform init in `[-scale, scale]`, drawn in flat order.
pub fn init_params(config: ModelConfig, scale: f64, stream: &mut RngStream) -> Result<Params> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "init scale must be nonnegative, got {scale}"
        )));
    }
    let mut p = Params::zeros(config)?;
    for w in p.flat.iter_mut() {
        *w = (stream.next_f64() * 2.0 - 1.0) * scale;
    }
    Ok(p)
}

/// Writes the little-endian binary parameter file:
/// magic `DPOPDMDL`, format version, `V k d h`, then the flat buffer.
pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(8 + 4 * 5 + params.flat.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [
        params.config.vocab_size,
        params.config.context,
        params.config.embed_dim,
        params.config.hidden_dim,
    ] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for &w in &params.flat {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_params(path: &Path) -> Result<Params> {
    let pathstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(pathstr.clone(), e))?;
    if bytes.len() < 8 + 4 * 5 {
        return Err(Error::format(&pathstr, "file too short for header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(&pathstr, "bad magic; not a parameter file"));
    }
    let mut u32s = bytes[8..8 + 20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()));
    let version = u32s.next().unwrap();
    if version != FORMAT_VERSION {
        return Err(Error::format(
            &pathstr,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let config = ModelConfig {
        vocab_size: u32s.next().unwrap(),
        context: u32s.next().unwrap(),
        embed_dim: u32s.next().unwrap(),
        hidden_dim: u32s.next().unwrap(),
    };
    config
        .validate()
        .map_err(|e| Error::format(&pathstr, e.to_string()))?;
    let body = &bytes[8 + 20..];
    let expect = config.param_count();
    if body.len() != expect * 8 {
        return Err(Error::format(
            &pathstr,
            format!(
                "expected {} parameter bytes, found {}",
                expect * 8,
                body.len()
            ),
        ));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Params::from_flat(config, flat)
}

/// The frozen teacher: either the exact chain conditionals or a trained
/// network. Nothing in the crate mutates a teacher after construction.
#[derive(Clone, Debug)]
pub enum TeacherHandle {
    Oracle(MarkovChainSpec),
    Neural(Params),
}

impl TeacherHandle {
    pub fn vocab_size(&self) -> u32 {
        match self {
            TeacherHandle::Oracle(spec) => spec.vocab().size(),
            TeacherHandle::Neural(params) => params.config().vocab_size,
        }
    }
}

/// Teacher next-token log-probabilities at distillation temperature `tau_d`
/// for a full prefix.
///
/// The oracle path builds the full-vocabulary distribution from the chain
/// row (non-content, non-EOS tokens sit at the floor), floors at
/// [`PROB_FLOOR`], renormalizes, then tempers in log space. The neural path
/// windows the prefix by its own context length and applies
/// `log_softmax(forward_logits(...), tau_d)`.
pub fn teacher_log_probs(teacher: &TeacherHandle, ctx: &[u32], tau_d: f64) -> Result<Vector> {
    match teacher {
        TeacherHandle::Neural(params) => {
            let ctx = window(ctx, params.config.context as usize);
            log_softmax(&forward_logits(params, &ctx)?, tau_d)
        }
        TeacherHandle::Oracle(spec) => {
            let vocab = spec.vocab();
            if let Some(&t) = ctx.iter().find(|&&t| t >= vocab.size()) {
                return Err(Error::InvalidArgument(format!(
                    "token {t} exceeds vocab size {}",
                    vocab.size()
                )));
            }
            let row = spec.next_distribution(ctx)?;
            let mut p = vec![0.0f64; vocab.size() as usize];
            let base = vocab.content_base() as usize;
            for (i, &pi) in row[..row.len() - 1].iter().enumerate() {
                p[base + i] = pi;
            }
            p[EOS as usize] = row[row.len() - 1];
            log_probs_from_distribution(&p, tau_d)
        }
    }
}

/// Floors a probability vector at [`PROB_FLOOR`], renormalizes, and tempers
/// in log space.
pub fn log_probs_from_distribution(p: &[f64], tau_d: f64) -> Result<Vector> {
    if !(tau_d.is_finite() && tau_d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau_d must be positive, got {tau_d}"
        )));
    }
    let floored: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    let mut lp: Vector = floored.iter().map(|&x| (x / sum).ln()).collect();
    if tau_d != 1.0 {
        lp = log_softmax(&lp, tau_d)?;
    }
    Ok(lp)
}

/// Anything that yields temperature-1 next-token log-probabilities from a
/// full prefix. Used by evaluation so students and teachers share one
/// perplexity path.
pub trait LogProbModel {
    fn vocab_size(&self) -> u32;
    fn log_probs(&self, prefix: &[u32]) -> Result<Vector>;
}

impl LogProbModel for Params {
    fn vocab_size(&self) -> u32 {
        self.config.vocab_size
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vector> {
        let ctx = window(prefix, self.config.context as usize);
        log_softmax(&forward_logits(self, &ctx)?, 1.0)
    }
}

impl LogProbModel for TeacherHandle {
    fn vocab_size(&self) -> u32 {
        TeacherHandle::vocab_size(self)
    }

    /// The oracle conditions on the full prefix (its conditional only ever
    /// depends on the code and the last `m` content tokens); the neural
    /// variant windows by its own context length.
    fn log_probs(&self, prefix: &[u32]) -> Result<Vector> {
        match self {
            TeacherHandle::Oracle(_) => teacher_log_probs(self, prefix, 1.0),
            TeacherHandle::Neural(params) => params.log_probs(prefix),
        }
    }
}

/// Reference norm helper used by tests and examples when reasoning about
/// clipping behavior of per-example gradients.
pub fn grad_norm(grad: &[f64]) -> f64 {
    l2_norm(grad)
}
