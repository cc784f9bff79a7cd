//! Desk-scale environments with known ground-truth rewards, behavior-policy
//! dataset generation, and normalized-score evaluation anchors.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::prefdata::{DatasetMeta, Trajectory, Transition, UnlabeledDataset, DATASET_FORMAT_VERSION};
use crate::tensor::Rng;

/// Normalized-score anchors estimated from rollouts of the random and
/// expert policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreAnchors {
    pub score_random: f64,
    pub score_expert: f64,
}

impl ScoreAnchors {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_expert > self.score_random) {
            return Err(CoreError::data(format!(
                "degenerate anchors: expert {} must exceed random {}",
                self.score_expert, self.score_random
            )));
        }
        Ok(())
    }
}

/// `100 * (raw - random) / (expert - random)`; linear, not clipped.
pub fn normalized_score(raw: f64, anchors: &ScoreAnchors) -> Result<f64> {
    anchors.validate()?;
    Ok(100.0 * (raw - anchors.score_random) / (anchors.score_expert - anchors.score_random))
}

/// An MDP with deterministic or stochastic dynamics, a known step-wise
/// reward, an initial-state sampler and a fixed episode horizon.
pub trait Environment {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> &[f64];
    fn action_high(&self) -> &[f64];
    fn horizon(&self) -> usize;
    /// Discount placeholder handed to RL configs; the env itself never
    /// discounts.
    fn gamma(&self) -> f64;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// Returns (next_state, reward). Deterministic for PointMass.
    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64);
    fn true_reward(&self, state: &[f64], action: &[f64]) -> f64;
}

/// 2-D point mass: state (px, py, vx, vy), bounded acceleration actions,
/// goal at the origin. Reward is -|position| - 0.1 * |action| per step under
/// semi-implicit Euler integration with step `dt`.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub dt: f64,
    pub horizon: usize,
    pub gamma: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        PointMassEnv {
            dt: 0.1,
            horizon: 100,
            gamma: 0.99,
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
        }
    }
}

impl PointMassEnv {
    pub fn new(dt: f64, horizon: usize, gamma: f64) -> Self {
        PointMassEnv {
            dt,
            horizon,
            gamma,
            ..Default::default()
        }
    }

    pub fn with_horizon(horizon: usize) -> Self {
        PointMassEnv {
            horizon,
            ..Default::default()
        }
    }
}

impl Environment for PointMassEnv {
    fn name(&self) -> &str {
        "pointmass"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn action_low(&self) -> &[f64] {
        &self.lo
    }
    fn action_high(&self) -> &[f64] {
        &self.hi
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Position uniform in [-1, 1]^2, velocity zero.
    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0), 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let ax = action[0].clamp(self.lo[0], self.hi[0]);
        let ay = action[1].clamp(self.lo[1], self.hi[1]);
        let reward = self.true_reward(state, &[ax, ay]);
        let vx = state[2] + self.dt * ax;
        let vy = state[3] + self.dt * ay;
        let px = state[0] + self.dt * vx;
        let py = state[1] + self.dt * vy;
        (vec![px, py, vx, vy], reward)
    }

    fn true_reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let pos = (state[0] * state[0] + state[1] * state[1]).sqrt();
        let act = (action[0] * action[0] + action[1] * action[1]).sqrt();
        -pos - 0.1 * act
    }
}

/// Maps a state to a (bounded) action.
pub trait Policy {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64>;
}

/// Uniform over the action box.
pub struct RandomPolicy {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RandomPolicy {
    pub fn for_env(env: &dyn Environment) -> Self {
        RandomPolicy {
            lo: env.action_low().to_vec(),
            hi: env.action_high().to_vec(),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&self, _state: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(&l, &h)| rng.range_f64(l, h))
            .collect()
    }
}

/// Scripted proportional-derivative controller toward the origin; the
/// analytic expert for PointMass.
pub struct PointMassExpert {
    pub kp: f64,
    pub kd: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl PointMassExpert {
    pub fn new(env: &PointMassEnv) -> Self {
        PointMassExpert {
            kp: 1.0,
            kd: 2.0,
            lo: env.lo.clone(),
            hi: env.hi.clone(),
        }
    }
}

impl Policy for PointMassExpert {
    fn act(&self, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        vec![
            (-self.kp * state[0] - self.kd * state[2]).clamp(self.lo[0], self.hi[0]),
            (-self.kp * state[1] - self.kd * state[3]).clamp(self.lo[1], self.hi[1]),
        ]
    }
}

/// Base policy plus Gaussian action noise, clamped back into bounds. The
/// "medium" behavior policy is the expert wrapped in this.
pub struct NoisyPolicy<P: Policy> {
    pub base: P,
    pub sigma: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl<P: Policy> Policy for NoisyPolicy<P> {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut a = self.base.act(state, rng);
        for (v, (&l, &h)) in a.iter_mut().zip(self.lo.iter().zip(self.hi.iter())) {
            *v = (*v + self.sigma * rng.normal()).clamp(l, h);
        }
        a
    }
}

/// Fraction of the action range used as the medium policy's noise sigma.
pub const MEDIUM_NOISE_FRACTION: f64 = 0.5;

pub fn medium_policy(env: &PointMassEnv) -> NoisyPolicy<PointMassExpert> {
    let range = env.hi[0] - env.lo[0];
    NoisyPolicy {
        base: PointMassExpert::new(env),
        sigma: MEDIUM_NOISE_FRACTION * range,
        lo: env.lo.clone(),
        hi: env.hi.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

/// Undiscounted-return statistics over `episodes` independent episodes. Only
/// `reset` and the policy consume the rng stream.
pub fn rollout(
    env: &dyn Environment,
    policy: &dyn Policy,
    rng: &mut Rng,
    episodes: usize,
) -> Result<RolloutStats> {
    if episodes == 0 {
        return Err(CoreError::config("rollout needs episodes >= 1".to_string()));
    }
    let returns = rollout_returns(env, policy, rng, episodes);
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / episodes as f64;
    Ok(RolloutStats {
        mean,
        std: var.sqrt(),
        episodes,
    })
}

pub fn rollout_returns(
    env: &dyn Environment,
    policy: &dyn Policy,
    rng: &mut Rng,
    episodes: usize,
) -> Vec<f64> {
    (0..episodes)
        .map(|_| {
            let mut state = env.reset(rng);
            let mut ret = 0.0;
            for _ in 0..env.horizon() {
                let action = policy.act(&state, rng);
                let (next, r) = env.step(&state, &action);
                ret += r;
                state = next;
            }
            ret
        })
        .collect()
}

/// Behavior-policy quality for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quality {
    Random,
    /// Expert with added action noise.
    Medium,
    Expert,
    /// 50/50 expert and random trajectories: a mixture with a real
    /// behavioral gap, so reward quality matters downstream (the noised
    /// expert still matches the expert in conditional mean, which plain
    /// cloning recovers).
    Mixed,
}

impl Quality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quality::Random => "random",
            Quality::Medium => "medium",
            Quality::Expert => "expert",
            Quality::Mixed => "mixed",
        }
    }
}

/// A generated dataset: the unlabeled export plus the ground-truth sidecar
/// (same trajectories with rewards, used only for scripted labeling and
/// evaluation).
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub unlabeled: UnlabeledDataset,
    pub truth: UnlabeledDataset,
}

pub fn generate_offline_dataset(
    env: &PointMassEnv,
    quality: Quality,
    n_traj: usize,
    seed: u64,
    rng: &mut Rng,
) -> Result<GeneratedData> {
    if n_traj == 0 {
        return Err(CoreError::config("dataset generation needs n_traj >= 1".to_string()));
    }
    let random = RandomPolicy::for_env(env);
    let expert = PointMassExpert::new(env);
    let medium = medium_policy(env);

    let mut trajectories = Vec::with_capacity(n_traj);
    for id in 0..n_traj {
        let policy: &dyn Policy = match quality {
            Quality::Random => &random,
            Quality::Medium => &medium,
            Quality::Expert => &expert,
            Quality::Mixed => {
                if id % 2 == 0 {
                    &expert
                } else {
                    &random
                }
            }
        };
        let mut state = env.reset(rng);
        let mut transitions = Vec::with_capacity(env.horizon());
        for k in 0..env.horizon() {
            let action = policy.act(&state, rng);
            let (next, reward) = env.step(&state, &action);
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward: Some(reward),
                next_state: next.clone(),
                done: k + 1 == env.horizon(),
            });
            state = next;
        }
        transitions.shrink_to_fit();
        trajectories.push(Trajectory { id, transitions });
    }

    let truth = UnlabeledDataset {
        meta: DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            env: env.name().to_string(),
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
            behavior: quality.as_str().to_string(),
            seed,
            has_rewards: true,
            anchors: None,
            reward_standardization: None,
        },
        trajectories,
    };
    truth.validate()?;
    let unlabeled = truth.without_rewards();
    Ok(GeneratedData { unlabeled, truth })
}

/// Estimates score anchors from `episodes` rollouts each of the random and
/// expert policies.
pub fn estimate_anchors(env: &PointMassEnv, episodes: usize, rng: &mut Rng) -> Result<ScoreAnchors> {
    let random = rollout(env, &RandomPolicy::for_env(env), rng, episodes)?;
    let expert = rollout(env, &PointMassExpert::new(env), rng, episodes)?;
    let anchors = ScoreAnchors {
        score_random: random.mean,
        score_expert: expert.mean,
    };
    anchors.validate()?;
    Ok(anchors)
}
