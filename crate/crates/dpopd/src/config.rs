//! Run configuration files: a single JSON document describing one training
//! run end to end.
//!
//! Two pairs of fields are mutually exclusive and resolved against the
//! training corpus size `N`: exactly one of `dp.sigma` / `dp.epsilon_target`
//! (a target calibrates σ), and exactly one of `dp.q` / `dp.b` (an expected
//! lot size `B` becomes `q = B/N`). `dp.steps` may instead be given as
//! `dp.epochs` (expected data passes, `steps = ceil(epochs/q)`), and
//! `dp.delta` defaults to `1/N`. Resolution produces both the runnable
//! [`TrainConfig`] and a normalized snapshot of the file with every derived
//! value pinned, so re-feeding the snapshot reproduces the run bit-exactly.
//!
//! Unknown keys anywhere in the document are rejected, and parse errors
//! carry the field path they occurred at.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::calibrate_sigma;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::privacy::DpConfig;
use crate::trainer::{Method, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// The whole config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Schema version; must be 1.
    pub version: u32,
    pub method: Method,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub distill: DistillConfig,
    pub dp: DpSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Private training corpus path.
    pub train: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub student: StudentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    /// Context window length k.
    pub context: u32,
    pub embed_dim: u32,
    pub hidden_dim: u32,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    /// Chain spec path for `oracle`, parameter file for `neural`.
    pub path: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Oracle,
    Neural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    /// Calibrate σ to land on this ε after all steps. Mutually exclusive
    /// with `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_target: Option<f64>,
    /// Explicit noise multiplier. Mutually exclusive with `epsilon_target`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Target δ; defaults to 1/N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Per-example clipping norm C.
    pub c: f64,
    /// Poisson sample rate. Mutually exclusive with `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Expected lot size; becomes `q = b/N`. Mutually exclusive with `q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<u64>,
    /// Total DP-SGD steps. Mutually exclusive with `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    /// Expected passes over the data; becomes `steps = ceil(epochs/q)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<f64>,
    pub learning_rate: f64,
    /// Optional hard ε cap enforced during training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_budget: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            lambda: default_lambda(),
            max_new_tokens: default_max_new_tokens(),
            temperature: default_temperature(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    pub out_dir: String,
    /// Validation prompts used by the periodic rollout-KL probe.
    #[serde(default = "default_eval_prompts")]
    pub eval_prompts: usize,
    #[serde(default = "default_eval_rollouts")]
    pub eval_rollouts: usize,
}

fn default_init_scale() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    0.5
}

fn default_max_new_tokens() -> usize {
    16
}

fn default_temperature() -> f64 {
    1.0
}

fn default_eval_interval() -> u64 {
    200
}

fn default_eval_prompts() -> usize {
    32
}

fn default_eval_rollouts() -> usize {
    1
}

/// A config resolved against the training corpus: runnable settings plus
/// a normalized file snapshot with all derived values pinned.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub train: TrainConfig,
    /// The input file with `sigma`, `q`, `steps`, and `delta` made
    /// explicit (and `epsilon_target`/`b`/`epochs` cleared).
    pub snapshot: RunConfigFile,
    /// True when calibration bottomed out at the minimum σ = 0.3 (the
    /// target was loose); the run is then *more* private than requested.
    pub calibration_at_floor: bool,
}

/// Parse a config document, reporting errors with their field path.
pub fn parse_config(text: &str) -> Result<RunConfigFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfigFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("config field `{}`: {}", e.path(), e.inner())))?;
    cfg.check_shape()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

impl RunConfigFile {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json_pretty();
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Structural checks that don't need the corpus: version, the two
    /// either-or field pairs, and teacher presence.
    pub fn check_shape(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config field `version`: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        match (self.dp.epsilon_target, self.dp.sigma) {
            (None, None) => {
                return Err(Error::Config(
                    "exactly one of `dp.epsilon_target` and `dp.sigma` is required; neither is set"
                        .into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "exactly one of `dp.epsilon_target` and `dp.sigma` is required; both are set"
                        .into(),
                ))
            }
            _ => {}
        }
        match (self.dp.q, self.dp.b) {
            (None, None) => {
                return Err(Error::Config(
                    "exactly one of `dp.q` and `dp.b` is required; neither is set".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "exactly one of `dp.q` and `dp.b` is required; both are set".into(),
                ))
            }
            _ => {}
        }
        match (self.dp.steps, self.dp.epochs) {
            (None, None) => {
                return Err(Error::Config(
                    "exactly one of `dp.steps` and `dp.epochs` is required; neither is set".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "exactly one of `dp.steps` and `dp.epochs` is required; both are set".into(),
                ))
            }
            _ => {}
        }
        if self.method.needs_teacher() && self.model.teacher.is_none() {
            return Err(Error::Config(format!(
                "config field `model.teacher`: required for method {}",
                self.method
            )));
        }
        Ok(())
    }

    /// Resolve every derived quantity against the training corpus
    /// (`n_train` records, `vocab_size` tokens), calibrating σ when an ε
    /// target was given.
    pub fn resolve(&self, n_train: usize, vocab_size: u32) -> Result<ResolvedRun> {
        self.check_shape()?;
        if n_train == 0 {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let n = n_train as f64;

        let q = match (self.dp.q, self.dp.b) {
            (Some(q), None) => q,
            (None, Some(b)) => {
                if b == 0 || b as f64 > n {
                    return Err(Error::Config(format!(
                        "config field `dp.b`: expected a lot size in [1, {n_train}], got {b}"
                    )));
                }
                b as f64 / n
            }
            _ => unreachable!("checked by check_shape"),
        };
        if !(q.is_finite() && q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!(
                "config field `dp.q`: expected a rate in (0, 1], got {q}"
            )));
        }

        let delta = match self.dp.delta {
            Some(d) => d,
            None => 1.0 / n,
        };

        let steps = match (self.dp.steps, self.dp.epochs) {
            (Some(s), None) => s,
            (None, Some(e)) => {
                if !(e.is_finite() && e > 0.0) {
                    return Err(Error::Config(format!(
                        "config field `dp.epochs`: expected a positive number, got {e}"
                    )));
                }
                (e / q).ceil() as u64
            }
            _ => unreachable!("checked by check_shape"),
        };

        let mut calibration_at_floor = false;
        let sigma = match (self.dp.epsilon_target, self.dp.sigma) {
            (None, Some(s)) => s,
            (Some(target), None) => {
                let cal = calibrate_sigma(q, steps, target, delta)?;
                calibration_at_floor = cal.hit_lower_bound;
                cal.sigma
            }
            _ => unreachable!("checked by check_shape"),
        };

        let model = ModelConfig {
            vocab_size,
            context: self.model.student.context,
            embed_dim: self.model.student.embed_dim,
            hidden_dim: self.model.student.hidden_dim,
        };
        let train = TrainConfig {
            method: self.method,
            model,
            distill: self.distill,
            dp: DpConfig {
                clip_norm: self.dp.c,
                noise_multiplier: sigma,
                sample_rate: q,
            },
            delta,
            epsilon_budget: self.dp.epsilon_budget,
            learning_rate: self.dp.learning_rate,
            steps,
            lambda: self.rollout.lambda,
            max_new_tokens: self.rollout.max_new_tokens,
            rollout_temperature: self.rollout.temperature,
            init_scale: self.model.student.init_scale,
            eval_interval: self.run.eval_interval,
            eval_prompts: self.run.eval_prompts,
            eval_rollouts: self.run.eval_rollouts,
            seed: self.run.seed,
        };
        train.validate()?;

        let mut snapshot = self.clone();
        snapshot.dp.epsilon_target = None;
        snapshot.dp.sigma = Some(sigma);
        snapshot.dp.q = Some(q);
        snapshot.dp.b = None;
        snapshot.dp.steps = Some(steps);
        snapshot.dp.epochs = None;
        snapshot.dp.delta = Some(delta);

        Ok(ResolvedRun {
            train,
            snapshot,
            calibration_at_floor,
        })
    }
}
