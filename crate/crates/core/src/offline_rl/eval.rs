//! Policy evaluation against normalized-score anchors.

use serde::{Deserialize, Serialize};

use crate::envs::{normalized_score, rollout_returns, Environment, Policy, ScoreAnchors};
use crate::error::{CoreError, Result};
use crate::tensor::Rng;

/// Mean and standard deviation of per-episode normalized scores for a
/// single rng stream.
pub fn evaluate_policy(
    policy: &dyn Policy,
    env: &dyn Environment,
    anchors: &ScoreAnchors,
    episodes: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(CoreError::config("evaluation needs episodes >= 1".to_string()));
    }
    anchors.validate()?;
    let returns = rollout_returns(env, policy, rng, episodes);
    let scores: Vec<f64> = returns
        .iter()
        .map(|&r| normalized_score(r, anchors))
        .collect::<Result<_>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub mean_normalized: f64,
    pub std_normalized: f64,
}

/// Evaluation report: per-seed normalized scores plus their mean and
/// standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
    pub episodes_per_seed: usize,
}

/// Multi-seed protocol: `n_seeds` independent streams derived from
/// `base_seed`, `episodes` rollouts each.
pub fn evaluate_protocol(
    policy: &dyn Policy,
    env: &dyn Environment,
    anchors: &ScoreAnchors,
    n_seeds: usize,
    episodes: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    if n_seeds == 0 {
        return Err(CoreError::config("evaluation needs n_seeds >= 1".to_string()));
    }
    let mut per_seed = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = Rng::with_stream(seed, 0x6576_616c);
        let (mean, std) = evaluate_policy(policy, env, anchors, episodes, &mut rng)?;
        per_seed.push(SeedScore {
            seed,
            mean_normalized: mean,
            std_normalized: std,
        });
    }
    let mean = per_seed.iter().map(|s| s.mean_normalized).sum::<f64>() / n_seeds as f64;
    let var = per_seed
        .iter()
        .map(|s| (s.mean_normalized - mean) * (s.mean_normalized - mean))
        .sum::<f64>()
        / n_seeds as f64;
    Ok(EvalReport {
        per_seed,
        mean,
        std: var.sqrt(),
        episodes_per_seed: episodes,
    })
}
