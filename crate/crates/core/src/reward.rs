//! The trained reward-model artifact: a deterministic per-step reward query
//! r(s, a) behind one type, with checkpointing and dataset annotation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bt::{train_bt, BtRewardNet};
use crate::diffusion::{train_cdpr, train_dpr, CdprModel, DprModel, RewardTrainConfig};
use crate::error::{CoreError, Result};
use crate::prefdata::{LabeledPrefDataset, RewardStandardization, UnlabeledDataset};
use crate::tensor::Rng;

/// Reward acquisition method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpr,
    Cdpr,
    Bt,
    /// Ground-truth rewards from the generation sidecar; needs no training.
    Oracle,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dpr => "dpr",
            Method::Cdpr => "cdpr",
            Method::Bt => "bt",
            Method::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpr" => Ok(Method::Dpr),
            "cdpr" => Ok(Method::Cdpr),
            "bt" => Ok(Method::Bt),
            "oracle" => Ok(Method::Oracle),
            other => Err(CoreError::config(format!(
                "unknown method '{other}' (expected dpr, cdpr, bt or oracle)"
            ))),
        }
    }
}

/// A trained reward model of any method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum RewardModel {
    Dpr(DprModel),
    Cdpr(CdprModel),
    Bt(BtRewardNet),
}

impl RewardModel {
    pub fn method(&self) -> Method {
        match self {
            RewardModel::Dpr(_) => Method::Dpr,
            RewardModel::Cdpr(_) => Method::Cdpr,
            RewardModel::Bt(_) => Method::Bt,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            RewardModel::Dpr(m) => m.data_dim(),
            RewardModel::Cdpr(m) => m.data_dim(),
            RewardModel::Bt(n) => n.data_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardModel::Dpr(m) => m.validate(),
            RewardModel::Cdpr(m) => m.validate(),
            RewardModel::Bt(n) => n.mlp.validate(),
        }
    }

    /// Step reward for one (state ++ action) row. The diffusion methods
    /// average over all timesteps with `mc_samples` eps-draws from `rng`;
    /// the Bradley-Terry net is a plain forward pass.
    pub fn reward(&self, sa: &[f64], rng: &mut Rng) -> Result<f64> {
        match self {
            RewardModel::Dpr(m) => m.reward(sa, rng),
            RewardModel::Cdpr(m) => m.reward(sa, rng),
            RewardModel::Bt(n) => n.step_reward(sa),
        }
    }

    /// Writes the checkpoint as a single JSON object (architecture,
    /// schedule, normalization stats and parameters; round-trips bit-exact).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        writeln!(w, "{}", serde_json::to_string(self)?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let model: RewardModel = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| CoreError::data(format!("{}: {e}", path.display())))?;
        model
            .validate()
            .map_err(|e| CoreError::data(format!("{}: {e}", path.display())))?;
        Ok(model)
    }
}

/// Trains a reward model of the given method; `Oracle` is rejected since
/// ground-truth rewards need no training. Returns the model and the
/// per-epoch loss curve.
pub fn train_reward_model(
    pairs: &LabeledPrefDataset,
    method: Method,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, Vec<f64>)> {
    match method {
        Method::Dpr => {
            let (m, curve) = train_dpr(pairs, cfg)?;
            Ok((RewardModel::Dpr(m), curve))
        }
        Method::Cdpr => {
            let (m, curve) = train_cdpr(pairs, cfg)?;
            Ok((RewardModel::Cdpr(m), curve))
        }
        Method::Bt => {
            let (n, curve) = train_bt(pairs, cfg)?;
            Ok((RewardModel::Bt(n), curve))
        }
        Method::Oracle => Err(CoreError::config(
            "method 'oracle' uses ground-truth rewards and needs no training".to_string(),
        )),
    }
}

/// Raw-reward summary of an annotation run (before any standardization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

fn fnv1a64(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream id derived from the content of a (state ++ action) row, so
/// identical inputs always see identical draws regardless of position,
/// ordering or sharding.
fn sa_stream(sa: &[f64]) -> u64 {
    fnv1a64(sa.iter().flat_map(|v| v.to_bits().to_le_bytes()))
}

/// Fills every transition's reward via the model. Annotation is
/// deterministic given `seed` and per-transition order-independent: each
/// row's draws come from a stream keyed by (seed, row content). With
/// `standardize`, rewards are z-scored afterwards and the transform is
/// recorded in the metadata; the returned summary always describes the raw
/// rewards.
pub fn annotate_dataset(
    model: &RewardModel,
    dataset: &UnlabeledDataset,
    seed: u64,
    standardize: bool,
) -> Result<(UnlabeledDataset, RewardSummary)> {
    let dim = dataset.meta.state_dim + dataset.meta.action_dim;
    if dim != model.data_dim() {
        return Err(CoreError::shape(format!(
            "dataset rows have {dim} dims, reward model expects {}",
            model.data_dim()
        )));
    }
    let mut out = dataset.clone();
    out.meta.has_rewards = true;
    out.meta.reward_standardization = None;

    let mut rewards: Vec<f64> = Vec::with_capacity(dataset.total_transitions());
    let mut sa = vec![0.0; dim];
    for traj in &mut out.trajectories {
        for tr in &mut traj.transitions {
            sa[..tr.state.len()].copy_from_slice(&tr.state);
            sa[tr.state.len()..].copy_from_slice(&tr.action);
            let mut rng = Rng::with_stream(seed, sa_stream(&sa));
            let r = model.reward(&sa, &mut rng)?;
            if !r.is_finite() {
                return Err(CoreError::train("non-finite annotated reward".to_string()));
            }
            tr.reward = Some(r);
            rewards.push(r);
        }
    }
    let count = rewards.len();
    let summary = if count == 0 {
        RewardSummary {
            min: 0.0,
            mean: 0.0,
            max: 0.0,
            count,
        }
    } else {
        let mean = rewards.iter().sum::<f64>() / count as f64;
        RewardSummary {
            min: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
            mean,
            max: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            count,
        }
    };

    if standardize && count > 0 {
        let var = rewards
            .iter()
            .map(|r| (r - summary.mean) * (r - summary.mean))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        // constant rewards carry no scale worth normalizing
        if std > 1e-12 {
            for traj in &mut out.trajectories {
                for tr in &mut traj.transitions {
                    let r = tr.reward.expect("annotated above");
                    tr.reward = Some((r - summary.mean) / std);
                }
            }
            out.meta.reward_standardization = Some(RewardStandardization {
                mean: summary.mean,
                std,
            });
        }
    }
    Ok((out, summary))
}
