//! Offline transitions, fixed-length segments and preference pairs.
//!
//! A preference is expressed over a pair of segments: contiguous
//! (state, action) windows of a shared length H. Labels follow the
//! convention y = 1 when the second segment is preferred, y = 0 when the
//! first is, and y = 0.5 for a tie; canonicalization rewrites everything
//! into the "second segment not weaker" form that the reward losses expect.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::envs::ScoreAnchors;
use crate::error::{CoreError, Result};
use crate::tensor::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One environment step. `reward` is the ground-truth reward when available
/// and `None` in unlabeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Option<f64>,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// How annotated rewards were post-processed, recorded in dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStandardization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Behavior-policy tag ("random", "medium", "expert", "mixed", ...).
    pub behavior: String,
    pub seed: u64,
    pub has_rewards: bool,
    #[serde(default)]
    pub anchors: Option<ScoreAnchors>,
    #[serde(default)]
    pub reward_standardization: Option<RewardStandardization>,
}

/// Transitions grouped by trajectory, with declared dims. Immutable after
/// load; sampling takes an explicit [`Rng`] so parallel samplers can use
/// independent streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl UnlabeledDataset {
    /// Validates dims, non-empty trajectories and reward presence against
    /// the header. `locus` appears in error messages.
    pub fn validate(&self) -> Result<()> {
        if self.meta.format_version != DATASET_FORMAT_VERSION {
            return Err(CoreError::data(format!(
                "unsupported dataset format version {}",
                self.meta.format_version
            )));
        }
        for (ti, traj) in self.trajectories.iter().enumerate() {
            if traj.transitions.is_empty() {
                return Err(CoreError::data(format!(
                    "trajectory record {ti} (id {}) is empty",
                    traj.id
                )));
            }
            for (k, tr) in traj.transitions.iter().enumerate() {
                if tr.state.len() != self.meta.state_dim || tr.next_state.len() != self.meta.state_dim
                {
                    return Err(CoreError::data(format!(
                        "trajectory record {ti}, step {k}: state dim {} (next {}) vs header {}",
                        tr.state.len(),
                        tr.next_state.len(),
                        self.meta.state_dim
                    )));
                }
                if tr.action.len() != self.meta.action_dim {
                    return Err(CoreError::data(format!(
                        "trajectory record {ti}, step {k}: action dim {} vs header {}",
                        tr.action.len(),
                        self.meta.action_dim
                    )));
                }
                if self.meta.has_rewards && tr.reward.is_none() {
                    return Err(CoreError::data(format!(
                        "trajectory record {ti}, step {k}: header declares rewards but none present"
                    )));
                }
                if !self.meta.has_rewards && tr.reward.is_some() {
                    return Err(CoreError::data(format!(
                        "trajectory record {ti}, step {k}: header declares no rewards but one is present"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// A copy with all rewards stripped (the exported unlabeled view).
    pub fn without_rewards(&self) -> UnlabeledDataset {
        let mut out = self.clone();
        out.meta.has_rewards = false;
        out.meta.reward_standardization = None;
        for traj in &mut out.trajectories {
            for tr in &mut traj.transitions {
                tr.reward = None;
            }
        }
        out
    }

    pub fn trajectory_by_id(&self, id: usize) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }
}

/// A fixed-length window of (state, action) steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub traj_id: usize,
    pub start: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Segment {
    pub fn from_trajectory(traj: &Trajectory, start: usize, h: usize) -> Result<Self> {
        if h == 0 {
            return Err(CoreError::config("segment length H must be >= 1".to_string()));
        }
        if start + h > traj.len() {
            return Err(CoreError::data(format!(
                "segment {}..{} out of range for trajectory {} of length {}",
                start,
                start + h,
                traj.id,
                traj.len()
            )));
        }
        let steps = &traj.transitions[start..start + h];
        Ok(Segment {
            traj_id: traj.id,
            start,
            states: steps.iter().map(|t| t.state.clone()).collect(),
            actions: steps.iter().map(|t| t.action.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map(|a| a.len()).unwrap_or(0)
    }

    /// Flattened (state ++ action) rows, one per step.
    pub fn sa_rows(&self) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .zip(self.actions.iter())
            .map(|(s, a)| {
                let mut row = Vec::with_capacity(s.len() + a.len());
                row.extend_from_slice(s);
                row.extend_from_slice(a);
                row
            })
            .collect()
    }
}

/// Two segments plus a label y in {0, 0.5, 1}; y = 1 means `seg1` preferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub seg0: Segment,
    pub seg1: Segment,
    pub label: f64,
}

impl PreferencePair {
    pub fn new(seg0: Segment, seg1: Segment, label: f64) -> Result<Self> {
        if !(label == 0.0 || label == 0.5 || label == 1.0) {
            return Err(CoreError::data(format!(
                "preference label must be 0, 0.5 or 1; got {label}"
            )));
        }
        if seg0.len() != seg1.len() {
            return Err(CoreError::data(format!(
                "preference pair with segment lengths {} and {}",
                seg0.len(),
                seg1.len()
            )));
        }
        if seg0.state_dim() != seg1.state_dim() || seg0.action_dim() != seg1.action_dim() {
            return Err(CoreError::data("preference pair with mismatched dims".to_string()));
        }
        Ok(PreferencePair { seg0, seg1, label })
    }

    pub fn h(&self) -> usize {
        self.seg0.len()
    }
}

/// What to do with tied pairs during canonicalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    /// Discard tied pairs (default).
    #[default]
    Drop,
    /// Emit both orderings of a tied pair, each with label 1.
    KeepBoth,
}

/// Canonical preference dataset: every pair has label 1 and shared H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrefDataset {
    pub pairs: Vec<PreferencePair>,
    pub h: usize,
    /// "scripted" for teacher labels, "external" otherwise.
    pub provenance: String,
}

impl LabeledPrefDataset {
    pub fn new(pairs: Vec<PreferencePair>, provenance: impl Into<String>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::data(
                "a labeled preference dataset needs at least one pair".to_string(),
            ));
        }
        let h = pairs[0].h();
        for (i, p) in pairs.iter().enumerate() {
            if p.label != 1.0 {
                return Err(CoreError::data(format!(
                    "pair {i} is not canonical (label {})",
                    p.label
                )));
            }
            if p.h() != h {
                return Err(CoreError::data(format!(
                    "pair {i} has H {} but the dataset uses {h}",
                    p.h()
                )));
            }
        }
        Ok(LabeledPrefDataset {
            pairs,
            h,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.pairs[0].seg0.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.pairs[0].seg0.action_dim()
    }
}

/// Uniformly samples `count` contiguous windows of length `h` over all valid
/// (trajectory, start) positions, with replacement.
pub fn sample_segments(
    dataset: &UnlabeledDataset,
    h: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Segment>> {
    if h == 0 {
        return Err(CoreError::config("segment length H must be >= 1".to_string()));
    }
    // All valid window positions, in trajectory order.
    let mut positions: Vec<(usize, usize)> = Vec::new();
    let mut max_len = 0usize;
    for traj in &dataset.trajectories {
        max_len = max_len.max(traj.len());
        if traj.len() >= h {
            positions.extend((0..=traj.len() - h).map(|s| (traj.id, s)));
        }
    }
    if positions.is_empty() {
        return Err(CoreError::data(format!(
            "no trajectory is long enough for H = {h} (longest has {max_len} steps)"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (tid, start) = positions[rng.below(positions.len())];
        let traj = dataset
            .trajectory_by_id(tid)
            .expect("position table references existing trajectory");
        out.push(Segment::from_trajectory(traj, start, h)?);
    }
    Ok(out)
}

/// Labels a pair of segments from a per-step ground-truth reward oracle:
/// y = 1 if the second segment's return is larger, 0 if smaller, 0.5 when
/// the returns differ by at most `tau_eq`.
pub fn scripted_teacher_label(
    seg0: &Segment,
    seg1: &Segment,
    true_reward: impl Fn(&[f64], &[f64]) -> f64,
    tau_eq: f64,
) -> f64 {
    let ret = |seg: &Segment| -> f64 {
        seg.states
            .iter()
            .zip(seg.actions.iter())
            .map(|(s, a)| true_reward(s, a))
            .sum()
    };
    let (r0, r1) = (ret(seg0), ret(seg1));
    if (r1 - r0).abs() <= tau_eq {
        0.5
    } else if r1 > r0 {
        1.0
    } else {
        0.0
    }
}

/// Rewrites pairs into canonical form: y = 0 pairs get their segments
/// swapped, ties are handled per `tie_policy`.
pub fn canonicalize(
    pairs: Vec<PreferencePair>,
    tie_policy: TiePolicy,
    provenance: impl Into<String>,
) -> Result<LabeledPrefDataset> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.into_iter().enumerate() {
        if p.label == 1.0 {
            out.push(p);
        } else if p.label == 0.0 {
            out.push(PreferencePair {
                seg0: p.seg1,
                seg1: p.seg0,
                label: 1.0,
            });
        } else if p.label == 0.5 {
            match tie_policy {
                TiePolicy::Drop => {}
                TiePolicy::KeepBoth => {
                    out.push(PreferencePair {
                        seg0: p.seg0.clone(),
                        seg1: p.seg1.clone(),
                        label: 1.0,
                    });
                    out.push(PreferencePair {
                        seg0: p.seg1,
                        seg1: p.seg0,
                        label: 1.0,
                    });
                }
            }
        } else {
            return Err(CoreError::data(format!(
                "pair {i}: invalid label {}",
                p.label
            )));
        }
    }
    LabeledPrefDataset::new(out, provenance)
}
