//! Pipeline configuration: one TOML file, every key defaulted, unknown keys
//! rejected before anything touches the filesystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpr_core::diffusion::RewardTrainConfig;
use dpr_core::envs::Quality;
use dpr_core::offline_rl::{RlAlgo, RlConfig};
use dpr_core::prefdata::TiePolicy;
use dpr_core::reward::Method;
use dpr_core::tensor::Activation;
use dpr_core::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            name: "pointmass".to_string(),
            horizon: 100,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub quality: Quality,
    pub n_traj: usize,
    pub anchor_episodes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            quality: Quality::Mixed,
            n_traj: 200,
            anchor_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    /// Segment length H.
    pub h: usize,
    pub n_pairs: usize,
    pub tie_policy: TiePolicy,
    /// Return-equality tolerance for scripted ties.
    pub tau_eq: f64,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            h: 25,
            n_pairs: 500,
            tie_policy: TiePolicy::Drop,
            tau_eq: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub method: Method,
    /// z-score annotated rewards (ignored by the oracle copy).
    pub standardize: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub t_embed_dim: usize,
    pub cond_dim: usize,
    pub mc_samples: usize,
    pub p_min: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        let t = RewardTrainConfig::default();
        RewardSection {
            method: Method::Dpr,
            standardize: true,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            timesteps: t.timesteps,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            hidden_layers: t.hidden_layers,
            hidden_dim: t.hidden_dim,
            activation: t.activation,
            t_embed_dim: t.t_embed_dim,
            cond_dim: t.cond_dim,
            mc_samples: t.mc_samples,
            p_min: t.p_min,
        }
    }
}

impl RewardSection {
    pub fn train_config(&self, seed: u64) -> RewardTrainConfig {
        RewardTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            hidden_layers: self.hidden_layers,
            hidden_dim: self.hidden_dim,
            activation: self.activation,
            t_embed_dim: self.t_embed_dim,
            cond_dim: self.cond_dim,
            mc_samples: self.mc_samples,
            p_min: self.p_min,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub algo: RlAlgo,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub polyak: f64,
    pub policy_delay: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub tau_expectile: f64,
    pub beta_awr: f64,
    pub w_max: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Independent evaluation seeds in the final report.
    pub eval_seeds: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let c = RlConfig::default();
        RlSection {
            algo: c.algo,
            gamma: c.gamma,
            batch_size: c.batch_size,
            steps: c.steps,
            lr: c.lr,
            alpha: c.alpha,
            polyak: c.polyak,
            policy_delay: c.policy_delay,
            policy_noise: c.policy_noise,
            noise_clip: c.noise_clip,
            hidden_layers: c.hidden_layers,
            hidden_dim: c.hidden_dim,
            tau_expectile: c.tau_expectile,
            beta_awr: c.beta_awr,
            w_max: c.w_max,
            eval_interval: c.eval_interval,
            eval_episodes: c.eval_episodes,
            eval_seeds: 5,
        }
    }
}

impl RlSection {
    pub fn rl_config(&self, seed: u64) -> RlConfig {
        RlConfig {
            algo: self.algo,
            gamma: self.gamma,
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            alpha: self.alpha,
            polyak: self.polyak,
            policy_delay: self.policy_delay,
            policy_noise: self.policy_noise,
            noise_clip: self.noise_clip,
            hidden_layers: self.hidden_layers,
            hidden_dim: self.hidden_dim,
            tau_expectile: self.tau_expectile,
            beta_awr: self.beta_awr,
            w_max: self.w_max,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Methods the `pipeline` command runs; empty means the single
    /// `[reward].method`.
    pub methods: Vec<Method>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env: EnvSection,
    pub data: DataSection,
    pub label: LabelSection,
    pub reward: RewardSection,
    pub rl: RlSection,
    pub pipeline: PipelineSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            env: EnvSection::default(),
            data: DataSection::default(),
            label: LabelSection::default(),
            reward: RewardSection::default(),
            rl: RlSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s)
            .map_err(|e| CoreError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// Rejects out-of-range values before any side effect.
    pub fn validate(&self) -> Result<()> {
        if self.env.name != "pointmass" {
            return Err(CoreError::config(format!(
                "unknown env '{}' (supported: pointmass)",
                self.env.name
            )));
        }
        if self.env.horizon < 2 {
            return Err(CoreError::config("env horizon must be >= 2".to_string()));
        }
        if !(self.env.dt > 0.0 && self.env.dt.is_finite()) {
            return Err(CoreError::config(format!("bad dt {}", self.env.dt)));
        }
        if self.data.n_traj == 0 {
            return Err(CoreError::config("data.n_traj must be >= 1".to_string()));
        }
        if self.data.anchor_episodes == 0 {
            return Err(CoreError::config("data.anchor_episodes must be >= 1".to_string()));
        }
        if self.label.h == 0 || self.label.n_pairs == 0 {
            return Err(CoreError::config("label.h and label.n_pairs must be >= 1".to_string()));
        }
        if !(self.label.tau_eq >= 0.0) {
            return Err(CoreError::config("label.tau_eq must be >= 0".to_string()));
        }
        if self.rl.eval_seeds == 0 {
            return Err(CoreError::config("rl.eval_seeds must be >= 1".to_string()));
        }
        self.reward.train_config(self.seed).validate()?;
        self.rl.rl_config(self.seed).validate()?;
        Ok(())
    }

    /// The methods a `pipeline` invocation runs.
    pub fn pipeline_methods(&self) -> Vec<Method> {
        if self.pipeline.methods.is_empty() {
            vec![self.reward.method]
        } else {
            self.pipeline.methods.clone()
        }
    }
}
