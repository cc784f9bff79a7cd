//! Dataset and preference-file I/O.
//!
//! Both formats are JSON-lines: a header object on the first line, one
//! record per following line. Floats survive a round-trip bit-exactly
//! (serialization uses the shortest representation that parses back to the
//! same f64).
//!
//! Dataset record fields: `id`, `states`, `actions`, `next_states`,
//! `rewards` (null when the header has `has_rewards = false`), `dones`.
//! Preference record fields: `traj_id0`, `start0`, `traj_id1`, `start1`,
//! `h`, `y`; segments are stored by reference into the dataset they were
//! sampled from.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::prefdata::{
    DatasetMeta, LabeledPrefDataset, PreferencePair, Segment, Trajectory, Transition,
    UnlabeledDataset,
};

#[derive(Debug, Serialize, Deserialize)]
struct TrajRecord {
    id: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    next_states: Vec<Vec<f64>>,
    rewards: Option<Vec<f64>>,
    dones: Vec<bool>,
}

pub fn save_dataset(dataset: &UnlabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{}", serde_json::to_string(&dataset.meta)?)?;
    for traj in &dataset.trajectories {
        let rec = TrajRecord {
            id: traj.id,
            states: traj.transitions.iter().map(|t| t.state.clone()).collect(),
            actions: traj.transitions.iter().map(|t| t.action.clone()).collect(),
            next_states: traj
                .transitions
                .iter()
                .map(|t| t.next_state.clone())
                .collect(),
            rewards: if dataset.meta.has_rewards {
                Some(
                    traj.transitions
                        .iter()
                        .map(|t| t.reward.expect("validated has_rewards"))
                        .collect(),
                )
            } else {
                None
            },
            dones: traj.transitions.iter().map(|t| t.done).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<UnlabeledDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::data(format!("{}: empty file", path.display())))??;
    let meta: DatasetMeta = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::data(format!("{}: line 1 (header): {e}", path.display())))?;

    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajRecord = serde_json::from_str(&line).map_err(|e| {
            CoreError::data(format!(
                "{}: line {line_no} (trajectory record {i}): {e}",
                path.display()
            ))
        })?;
        let n = rec.states.len();
        if rec.actions.len() != n || rec.next_states.len() != n || rec.dones.len() != n {
            return Err(CoreError::data(format!(
                "{}: line {line_no} (trajectory record {i}): field lengths differ",
                path.display()
            )));
        }
        if let Some(r) = &rec.rewards {
            if r.len() != n {
                return Err(CoreError::data(format!(
                    "{}: line {line_no} (trajectory record {i}): {} rewards for {n} steps",
                    path.display(),
                    r.len()
                )));
            }
        }
        let transitions = (0..n)
            .map(|k| Transition {
                state: rec.states[k].clone(),
                action: rec.actions[k].clone(),
                reward: rec.rewards.as_ref().map(|r| r[k]),
                next_state: rec.next_states[k].clone(),
                done: rec.dones[k],
            })
            .collect();
        trajectories.push(Trajectory {
            id: rec.id,
            transitions,
        });
    }
    let ds = UnlabeledDataset {
        meta,
        trajectories,
    };
    ds.validate()
        .map_err(|e| CoreError::data(format!("{}: {e}", path.display())))?;
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct PrefHeader {
    format_version: u32,
    h: usize,
    provenance: String,
    env: String,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrefRecord {
    traj_id0: usize,
    start0: usize,
    traj_id1: usize,
    start1: usize,
    h: usize,
    y: f64,
}

/// Writes a canonical preference dataset as (trajectory, start) references.
pub fn save_preferences(
    prefs: &LabeledPrefDataset,
    dataset_meta: &DatasetMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let header = PrefHeader {
        format_version: super::DATASET_FORMAT_VERSION,
        h: prefs.h,
        provenance: prefs.provenance.clone(),
        env: dataset_meta.env.clone(),
        state_dim: dataset_meta.state_dim,
        action_dim: dataset_meta.action_dim,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for p in &prefs.pairs {
        let rec = PrefRecord {
            traj_id0: p.seg0.traj_id,
            start0: p.seg0.start,
            traj_id1: p.seg1.traj_id,
            start1: p.seg1.start,
            h: p.h(),
            y: p.label,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a preference file and materializes its segments against `dataset`.
pub fn load_preferences(
    path: impl AsRef<Path>,
    dataset: &UnlabeledDataset,
) -> Result<LabeledPrefDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::data(format!("{}: empty file", path.display())))??;
    let header: PrefHeader = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::data(format!("{}: line 1 (header): {e}", path.display())))?;
    if header.state_dim != dataset.meta.state_dim || header.action_dim != dataset.meta.action_dim {
        return Err(CoreError::data(format!(
            "{}: preference header dims ({}, {}) do not match dataset ({}, {})",
            path.display(),
            header.state_dim,
            header.action_dim,
            dataset.meta.state_dim,
            dataset.meta.action_dim
        )));
    }

    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PrefRecord = serde_json::from_str(&line).map_err(|e| {
            CoreError::data(format!(
                "{}: line {line_no} (pair record {i}): {e}",
                path.display()
            ))
        })?;
        if rec.h != header.h {
            return Err(CoreError::data(format!(
                "{}: line {line_no}: pair H {} differs from header H {}",
                path.display(),
                rec.h,
                header.h
            )));
        }
        let seg_of = |tid: usize, start: usize| -> Result<Segment> {
            let traj = dataset.trajectory_by_id(tid).ok_or_else(|| {
                CoreError::data(format!(
                    "{}: line {line_no}: trajectory id {tid} not in dataset",
                    path.display()
                ))
            })?;
            Segment::from_trajectory(traj, start, rec.h)
        };
        pairs.push(PreferencePair::new(
            seg_of(rec.traj_id0, rec.start0)?,
            seg_of(rec.traj_id1, rec.start1)?,
            rec.y,
        )?);
    }
    let ds = LabeledPrefDataset::new(pairs, header.provenance)
        .map_err(|e| CoreError::data(format!("{}: {e}", path.display())))?;
    if ds.h != header.h {
        return Err(CoreError::data(format!(
            "{}: header H {} does not match pairs",
            path.display(),
            header.h
        )));
    }
    Ok(ds)
}
