//! Offline policy learning on annotated datasets: TD3+BC and IQL at desk
//! scale, plus policy evaluation against normalized-score anchors.

pub mod eval;
pub mod iql;
pub mod td3bc;

pub use eval::{evaluate_policy, evaluate_protocol, EvalReport, SeedScore};
pub use iql::train_iql;
pub use td3bc::train_td3bc;

use serde::{Deserialize, Serialize};

use crate::envs::Policy;
use crate::error::{CoreError, Result};
use crate::prefdata::UnlabeledDataset;
use crate::tensor::{Activation, MlpConfig, MlpParams, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RlAlgo {
    Td3bc,
    Iql,
}

impl RlAlgo {
    pub fn as_str(&self) -> &'static str {
        match self {
            RlAlgo::Td3bc => "td3bc",
            RlAlgo::Iql => "iql",
        }
    }
}

/// Hyperparameters for the downstream offline RL algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub algo: RlAlgo,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// TD3+BC behavior-cloning trade-off.
    pub alpha: f64,
    pub polyak: f64,
    pub policy_delay: usize,
    /// Target policy smoothing noise, as a fraction of the action half-range.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    /// IQL expectile in (0.5, 1).
    pub tau_expectile: f64,
    /// IQL advantage temperature.
    pub beta_awr: f64,
    /// IQL advantage-weight clip.
    pub w_max: f64,
    /// Steps between logged evaluation rollouts (0 disables interval evals).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            algo: RlAlgo::Td3bc,
            gamma: 0.99,
            batch_size: 256,
            steps: 50_000,
            lr: 3e-4,
            alpha: 2.5,
            polyak: 0.005,
            policy_delay: 2,
            policy_noise: 0.2,
            noise_clip: 0.5,
            hidden_layers: 2,
            hidden_dim: 64,
            tau_expectile: 0.7,
            beta_awr: 3.0,
            w_max: 100.0,
            eval_interval: 5_000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::config(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.policy_delay == 0 {
            return Err(CoreError::config(
                "batch_size, steps and policy_delay must be >= 1".to_string(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(CoreError::config(format!("polyak {} not in (0, 1]", self.polyak)));
        }
        if !(self.tau_expectile > 0.5 && self.tau_expectile < 1.0) {
            return Err(CoreError::config(format!(
                "expectile {} not in (0.5, 1)",
                self.tau_expectile
            )));
        }
        if !(self.beta_awr > 0.0) || !(self.w_max > 0.0) {
            return Err(CoreError::config("beta_awr and w_max must be positive".to_string()));
        }
        if self.hidden_layers == 0 || self.hidden_dim == 0 {
            return Err(CoreError::config("networks need at least one hidden layer".to_string()));
        }
        if self.eval_episodes == 0 {
            return Err(CoreError::config("eval_episodes must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.hidden_dim; self.hidden_layers]
    }
}

/// Flat columnar view of an annotated dataset for minibatch sampling.
#[derive(Debug, Clone)]
pub struct ReplayData {
    pub state_dim: usize,
    pub action_dim: usize,
    pub n: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    /// 1.0 while the episode continues, 0.0 at terminal steps.
    pub not_done: Vec<f64>,
}

impl ReplayData {
    /// Requires every transition to carry a reward.
    pub fn from_dataset(ds: &UnlabeledDataset) -> Result<Self> {
        let (sd, ad) = (ds.meta.state_dim, ds.meta.action_dim);
        let n = ds.total_transitions();
        if n == 0 {
            return Err(CoreError::data("dataset has no transitions".to_string()));
        }
        let mut out = ReplayData {
            state_dim: sd,
            action_dim: ad,
            n,
            states: Vec::with_capacity(n * sd),
            actions: Vec::with_capacity(n * ad),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * sd),
            not_done: Vec::with_capacity(n),
        };
        for traj in &ds.trajectories {
            for (k, tr) in traj.transitions.iter().enumerate() {
                let r = tr.reward.ok_or_else(|| {
                    CoreError::data(format!(
                        "trajectory {} step {k} has no reward; annotate the dataset first",
                        traj.id
                    ))
                })?;
                out.states.extend_from_slice(&tr.state);
                out.actions.extend_from_slice(&tr.action);
                out.rewards.push(r);
                out.next_states.extend_from_slice(&tr.next_state);
                out.not_done.push(if tr.done { 0.0 } else { 1.0 });
            }
        }
        Ok(out)
    }

    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.below(self.n)).collect()
    }

    pub fn gather_rows(src: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        out
    }

    pub fn gather_scalars(src: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| src[i]).collect()
    }
}

/// Concatenates state rows and action rows into (state ++ action) rows.
pub(crate) fn concat_sa(s: &[f64], a: &[f64], n: usize, sd: usize, ad: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (sd + ad));
    for i in 0..n {
        out.extend_from_slice(&s[i * sd..(i + 1) * sd]);
        out.extend_from_slice(&a[i * ad..(i + 1) * ad]);
    }
    out
}

/// Deterministic policy: MLP into a tanh squash mapped onto the action box,
/// so outputs always respect the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub mlp: MlpParams,
    pub act_lo: Vec<f64>,
    pub act_hi: Vec<f64>,
}

impl Actor {
    pub fn new(
        state_dim: usize,
        hidden: Vec<usize>,
        act_lo: Vec<f64>,
        act_hi: Vec<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if act_lo.len() != act_hi.len() || act_lo.is_empty() {
            return Err(CoreError::config("action bounds must be non-empty and aligned".to_string()));
        }
        let mut config = MlpConfig::new(state_dim, hidden, act_lo.len());
        config.activation = Activation::Relu;
        Ok(Actor {
            mlp: MlpParams::init(config, rng)?,
            act_lo,
            act_hi,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.act_lo.len()
    }

    pub fn squash_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let half: Vec<f64> = self
            .act_lo
            .iter()
            .zip(self.act_hi.iter())
            .map(|(&l, &h)| 0.5 * (h - l))
            .collect();
        let center: Vec<f64> = self
            .act_lo
            .iter()
            .zip(self.act_hi.iter())
            .map(|(&l, &h)| 0.5 * (h + l))
            .collect();
        (half, center)
    }

    /// Batched action selection: rows of states to rows of actions.
    pub fn act_batch(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        let raw = self.mlp.forward(&Tensor {
            shape: vec![n, self.mlp.config.input_dim],
            data: states.to_vec(),
        })?;
        let (half, center) = self.squash_scale();
        let ad = self.action_dim();
        let mut out = raw.data;
        for row in out.chunks_mut(ad) {
            for ((v, &hf), &c) in row.iter_mut().zip(half.iter()).zip(center.iter()) {
                *v = c + hf * v.tanh();
            }
        }
        Ok(out)
    }
}

impl Policy for Actor {
    fn act(&self, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.act_batch(state, 1).expect("actor dims match env state")
    }
}

/// Twin critics with frozen target copies.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
}

impl CriticPair {
    pub fn new(in_dim: usize, hidden: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let mut config = MlpConfig::new(in_dim, hidden, 1);
        config.activation = Activation::Relu;
        let q1 = MlpParams::init(config.clone(), rng)?;
        let q2 = MlpParams::init(config, rng)?;
        Ok(CriticPair {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }

    /// Elementwise min of the two target critics on (state ++ action) rows.
    pub fn min_target(&self, sa: &[f64], n: usize) -> Result<Vec<f64>> {
        let t = Tensor {
            shape: vec![n, self.q1.config.input_dim],
            data: sa.to_vec(),
        };
        let a = self.q1_target.forward(&t)?;
        let b = self.q2_target.forward(&t)?;
        Ok(a.data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x.min(y))
            .collect())
    }

    pub fn polyak_update(&mut self, rho: f64) {
        polyak_params(&mut self.q1_target, &self.q1, rho);
        polyak_params(&mut self.q2_target, &self.q2, rho);
    }
}

/// target <- (1 - rho) * target + rho * online, elementwise.
pub fn polyak_blend(target: &mut [f64], online: &[f64], rho: f64) {
    for (t, &o) in target.iter_mut().zip(online.iter()) {
        *t = (1.0 - rho) * *t + rho * o;
    }
}

pub fn polyak_params(target: &mut MlpParams, online: &MlpParams, rho: f64) {
    for (t, o) in target.layers.iter_mut().zip(online.layers.iter()) {
        polyak_blend(&mut t.w.data, &o.w.data, rho);
        polyak_blend(&mut t.b.data, &o.b.data, rho);
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub eval_return: Option<f64>,
}
