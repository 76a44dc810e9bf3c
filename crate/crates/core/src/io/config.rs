//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::TrainConfig;
use crate::env::{EnvSpec, CALL};
use crate::error::{Error, Result};
use crate::trajectory::{GearConfig, Variant};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_VAR: &str = "GEAR_OUTPUT_DIR";

/// Every key of a run: credit pipeline, training loop, environment and outputs.
///
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda_kl: f64,
    pub lambda_h: f64,
    pub alpha: f64,
    /// Absent: `1 - 0.5 * alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    pub eps_std: f64,
    pub variant: Variant,
    pub window_size: usize,
    pub marker_tokens: Vec<u32>,

    pub group_size: usize,
    pub groups_per_batch: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub clip_eps: f64,
    pub kl_penalty_coef: f64,
    pub seed: u64,
    /// Seeds for `ablate` and `sweep`.
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub num_eval_instances: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub init_scale: f64,
    pub hint_gain: f64,

    pub vocab_size: usize,
    pub max_steps: usize,
    pub num_branches: usize,
    pub branch_arity: usize,
    pub observation_len: usize,
    pub hint_prob: f64,
    pub env_seed: u64,
    pub partial_credit: bool,

    /// Relative paths below resolve against this directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub metrics_file: PathBuf,
    pub params_file: PathBuf,
    /// When set, `train` writes the reweighted last batch here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let g = &t.gear;
        let e = &t.env;
        Self {
            lambda_kl: g.lambda_kl,
            lambda_h: g.lambda_h,
            alpha: g.alpha,
            offset: g.affine_offset,
            eps_std: g.eps_std,
            variant: g.variant,
            window_size: g.window_size,
            marker_tokens: vec![CALL],
            group_size: t.group_size,
            groups_per_batch: t.groups_per_batch,
            learning_rate: t.learning_rate,
            total_steps: t.total_steps,
            clip_eps: t.clip_eps,
            kl_penalty_coef: t.kl_penalty_coef,
            seed: t.seed,
            seeds: (0..20).collect(),
            eval_interval: t.eval_interval,
            num_eval_instances: t.num_eval_instances,
            hidden_dim: t.hidden_dim,
            context_len: t.context_len,
            init_scale: t.init_scale,
            hint_gain: t.hint_gain,
            vocab_size: e.vocab_size,
            max_steps: e.max_steps,
            num_branches: e.num_branches,
            branch_arity: e.branch_arity,
            observation_len: e.observation_len,
            hint_prob: e.hint_prob,
            env_seed: e.seed,
            partial_credit: e.partial_credit,
            output_dir: None,
            metrics_file: "metrics.csv".into(),
            params_file: "params.json".into(),
            trace_file: None,
        }
    }
}

/// Keys accepted by `sweep`.
pub const SWEEPABLE: [&str; 9] = [
    "lambda_kl",
    "lambda_h",
    "alpha",
    "offset",
    "learning_rate",
    "kl_penalty_coef",
    "clip_eps",
    "hint_prob",
    "hint_gain",
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn gear(&self) -> GearConfig {
        GearConfig {
            lambda_kl: self.lambda_kl,
            lambda_h: self.lambda_h,
            alpha: self.alpha,
            affine_offset: self.offset,
            eps_std: self.eps_std,
            variant: self.variant,
            window_size: self.window_size,
            marker_tokens: self.marker_tokens.clone(),
        }
    }

    pub fn env(&self) -> EnvSpec {
        EnvSpec {
            vocab_size: self.vocab_size,
            max_steps: self.max_steps,
            num_branches: self.num_branches,
            branch_arity: self.branch_arity,
            observation_len: self.observation_len,
            hint_prob: self.hint_prob,
            seed: self.env_seed,
            partial_credit: self.partial_credit,
        }
    }

    /// Validated training configuration for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            group_size: self.group_size,
            groups_per_batch: self.groups_per_batch,
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            clip_eps: self.clip_eps,
            kl_penalty_coef: self.kl_penalty_coef,
            gear: self.gear(),
            env: self.env(),
            seed,
            eval_interval: self.eval_interval,
            num_eval_instances: self.num_eval_instances,
            hidden_dim: self.hidden_dim,
            context_len: self.context_len,
            init_scale: self.init_scale,
            hint_gain: self.hint_gain,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory: the config value, else `$GEAR_OUTPUT_DIR`, else `.`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.output_dir().join(file)
        }
    }

    /// Sets one sweepable key.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "lambda_kl" => self.lambda_kl = value,
            "lambda_h" => self.lambda_h = value,
            "alpha" => self.alpha = value,
            "offset" => self.offset = Some(value),
            "learning_rate" => self.learning_rate = value,
            "kl_penalty_coef" => self.kl_penalty_coef = value,
            "clip_eps" => self.clip_eps = value,
            "hint_prob" => self.hint_prob = value,
            "hint_gain" => self.hint_gain = value,
            _ => {
                return Err(Error::Config(format!(
                    "`{key}` is not sweepable (sweepable keys: {})",
                    SWEEPABLE.join(", ")
                )))
            }
        }
        Ok(())
    }
}
