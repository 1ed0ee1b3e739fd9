//! Run configuration: training hyperparameters and the synthetic task.
//!
//! Configs are JSON. Values are layered as `QAE_*` environment variables,
//! then the config file, then explicit overrides (CLI flags), each layer
//! taking precedence over the previous one.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::surrogate::ClipSpec;
use crate::types::{Estimator, MAX_LENGTH, MAX_VOCAB};

/// Shape of the per-query action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// One softmax over whole responses.
    FlatBandit,
    /// Token-by-token generation over a small vocabulary.
    Autoregressive,
}

/// Where the correct responses sit in the initial policy's ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Random,
    /// Least likely responses are the correct ones.
    Tail,
    /// Most likely responses are the correct ones.
    Head,
}

/// One component of the initial success-rate mixture: with relative
/// `weight`, the target success rate is uniform on `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyComponent {
    pub weight: f64,
    pub low: f64,
    pub high: f64,
}

fn default_difficulty() -> Vec<DifficultyComponent> {
    vec![
        DifficultyComponent {
            weight: 0.3,
            low: 0.05,
            high: 0.5,
        },
        DifficultyComponent {
            weight: 0.7,
            low: 0.65,
            high: 0.95,
        },
    ]
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_placement() -> Placement {
    Placement::Random
}

/// Synthetic stand-in for a verifiable-reward dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub mode: TaskMode,
    pub num_queries: usize,
    /// Flat-bandit action count `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses_per_query: Option<usize>,
    /// Autoregressive vocabulary size `V` (token 0 is end-of-sequence).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Autoregressive maximum response length `L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
    #[serde(default = "default_difficulty")]
    pub difficulty: Vec<DifficultyComponent>,
    /// Standard deviation of the Gaussian initial logits.
    #[serde(default = "default_init_scale")]
    pub init_logit_scale: f64,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    /// Added to the end-of-sequence logit of autoregressive policies.
    #[serde(default)]
    pub eos_bias: f64,
    /// Explicit correct sets (flat: action ids; autoregressive: answer
    /// tokens). Overrides the difficulty mixture when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_sets: Option<Vec<Vec<u32>>>,
}

impl SyntheticTaskSpec {
    pub fn flat(num_queries: usize, responses_per_query: usize) -> Self {
        Self {
            mode: TaskMode::FlatBandit,
            num_queries,
            responses_per_query: Some(responses_per_query),
            vocab_size: None,
            max_length: None,
            difficulty: default_difficulty(),
            init_logit_scale: default_init_scale(),
            placement: default_placement(),
            eos_bias: 0.0,
            correct_sets: None,
        }
    }

    pub fn autoregressive(num_queries: usize, vocab_size: usize, max_length: usize) -> Self {
        Self {
            mode: TaskMode::Autoregressive,
            num_queries,
            responses_per_query: None,
            vocab_size: Some(vocab_size),
            max_length: Some(max_length),
            ..Self::flat(num_queries, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_queries == 0 {
            return bad("task.num_queries must be >= 1".into());
        }
        match self.mode {
            TaskMode::FlatBandit => match self.responses_per_query {
                Some(n) if n >= 2 => {}
                _ => return bad("task.responses_per_query must be >= 2 for flat_bandit".into()),
            },
            TaskMode::Autoregressive => {
                match self.vocab_size {
                    Some(v) if (2..=MAX_VOCAB).contains(&v) => {}
                    _ => return bad(format!("task.vocab_size must lie in [2, {MAX_VOCAB}]")),
                }
                match self.max_length {
                    Some(l) if (1..=MAX_LENGTH).contains(&l) => {}
                    _ => return bad(format!("task.max_length must lie in [1, {MAX_LENGTH}]")),
                }
            }
        }
        if self.difficulty.is_empty() {
            return bad("task.difficulty needs at least one component".into());
        }
        for c in &self.difficulty {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return bad("task.difficulty weights must be > 0".into());
            }
            if !(0.0 < c.low && c.low <= c.high && c.high < 1.0) {
                return bad("task.difficulty ranges must satisfy 0 < low <= high < 1".into());
            }
        }
        if !(self.init_logit_scale >= 0.0 && self.init_logit_scale.is_finite()) {
            return bad("task.init_logit_scale must be finite and >= 0".into());
        }
        if !self.eos_bias.is_finite() {
            return bad("task.eos_bias must be finite".into());
        }
        if let Some(sets) = &self.correct_sets {
            if sets.len() != self.num_queries {
                return bad("task.correct_sets must have one entry per query".into());
            }
            let (lo, hi) = match self.mode {
                TaskMode::FlatBandit => (0, self.responses_per_query.unwrap_or(0) as u32),
                TaskMode::Autoregressive => (1, self.vocab_size.unwrap_or(0) as u32),
            };
            let universe = (hi - lo) as usize;
            for s in sets {
                if s.is_empty() || s.iter().any(|&t| t < lo || t >= hi) {
                    return bad("task.correct_sets entries must be non-empty and in range".into());
                }
                if self.mode == TaskMode::FlatBandit && s.len() >= universe {
                    return bad(
                        "task.correct_sets must leave at least one incorrect response".into(),
                    );
                }
            }
        }
        Ok(())
    }
}

fn default_k() -> f64 {
    0.4
}

fn default_eps_std() -> f64 {
    1e-6
}
fn default_eps_low() -> f64 {
    0.2
}
fn default_eps_high() -> f64 {
    0.28
}
fn default_eta() -> f64 {
    1.0
}
fn default_group_size() -> usize {
    8
}
fn default_estimator() -> Estimator {
    Estimator::QuantileStd
}
fn default_true() -> bool {
    true
}
fn default_max_resample() -> usize {
    64
}
fn default_one() -> usize {
    1
}
fn default_eval_samples() -> usize {
    32
}

/// Every tunable of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Quantile level of the baseline.
    #[serde(rename = "K", alias = "k", default = "default_k")]
    pub k: f64,
    #[serde(default = "default_eps_std")]
    pub eps_std: f64,
    #[serde(default = "default_eps_low")]
    pub eps_low: f64,
    #[serde(default = "default_eps_high")]
    pub eps_high: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Queries per step; defaults to every query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub num_steps: usize,
    pub seed: u64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_true")]
    pub dynamic_sampling: bool,
    #[serde(default = "default_max_resample")]
    pub max_resample: usize,
    /// Gradient steps taken on each sampled group. The first step is
    /// on-policy (all ratios 1); later ones see off-policy ratios and
    /// therefore the clip range.
    #[serde(default = "default_one")]
    pub updates_per_rollout: usize,
    /// Samples per query for pass@k evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub task: SyntheticTaskSpec,
}

impl TrainConfig {
    /// Config with defaults for everything but the task, seed and length.
    pub fn new(task: SyntheticTaskSpec, num_steps: usize, seed: u64) -> Self {
        Self {
            k: default_k(),
            eps_std: default_eps_std(),
            eps_low: default_eps_low(),
            eps_high: default_eps_high(),
            eta: default_eta(),
            group_size: default_group_size(),
            batch_size: None,
            num_steps,
            seed,
            estimator: default_estimator(),
            dynamic_sampling: true,
            max_resample: default_max_resample(),
            updates_per_rollout: 1,
            eval_samples: default_eval_samples(),
            task,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.task.num_queries)
    }

    pub fn clip(&self) -> Result<ClipSpec> {
        ClipSpec::new(self.eps_low, self.eps_high)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.k > 0.0 && self.k < 1.0) {
            return bad("K must lie strictly inside (0,1)");
        }
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return bad("eps_std must be finite and >= 0");
        }
        if !(self.eps_low > 0.0 && self.eps_low <= 1.0) {
            return bad("eps_low must lie in (0,1]");
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return bad("eps_high must be > 0");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be > 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.batch_size() == 0 || self.batch_size() > self.task.num_queries {
            return bad("batch_size must lie in [1, task.num_queries]");
        }
        if self.max_resample == 0 {
            return bad("max_resample must be >= 1");
        }
        if self.updates_per_rollout == 0 {
            return bad("updates_per_rollout must be >= 1");
        }
        if self.eval_samples < 16 {
            return bad("eval_samples must be >= 16 (pass@16 needs 16 samples)");
        }
        if self.eps_std == 0.0 && !self.dynamic_sampling {
            return bad(
                "eps_std = 0 requires dynamic_sampling (degenerate groups would divide by zero)",
            );
        }
        self.task.validate()
    }

    /// Parses and validates a JSON config value.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Top-level config keys that may be supplied through `QAE_<KEY>`
/// environment variables.
pub const ENV_KEYS: [&str; 14] = [
    "K",
    "eps_std",
    "eps_low",
    "eps_high",
    "eta",
    "group_size",
    "batch_size",
    "num_steps",
    "seed",
    "estimator",
    "dynamic_sampling",
    "max_resample",
    "updates_per_rollout",
    "eval_samples",
];

fn parse_env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Collects `QAE_*` config overrides from an environment listing.
pub fn env_layer<I: IntoIterator<Item = (String, String)>>(vars: I) -> Map<String, Value> {
    let mut map = Map::new();
    for (name, raw) in vars {
        let Some(suffix) = name.strip_prefix("QAE_") else {
            continue;
        };
        if let Some(key) = ENV_KEYS.iter().find(|k| k.eq_ignore_ascii_case(suffix)) {
            map.insert(key.to_string(), parse_env_value(&raw));
        }
    }
    map
}

/// Builds a config from an environment layer, a file layer and explicit
/// overrides, in increasing precedence.
pub fn layered_config(
    env: Map<String, Value>,
    file: Value,
    overrides: Map<String, Value>,
) -> Result<TrainConfig> {
    let Value::Object(file) = file else {
        return Err(Error::Config(
            "config file must contain a JSON object".into(),
        ));
    };
    let mut merged = env;
    // the file may spell the quantile key either way
    if file.contains_key("k") {
        merged.remove("K");
    }
    for (k, v) in file.into_iter().chain(overrides) {
        if k == "K" || k == "k" {
            merged.remove("K");
            merged.remove("k");
        }
        merged.insert(k, v);
    }
    TrainConfig::from_value(Value::Object(merged))
}
