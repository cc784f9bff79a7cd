//! Learning step-wise rewards from trajectory-wise preference labels with
//! diffusion classifiers, and training offline RL policies on the result.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`tensor`]: dense f64 numerics — tensors, seeded RNG, reverse-mode
//!   autodiff, Adam.
//! - [`prefdata`]: offline transitions, fixed-length segments, preference
//!   pairs, scripted-teacher labeling, dataset and preference file I/O.
//! - [`diffusion`]: DDPM noise schedule, denoiser networks, diffusion
//!   classifier scores, DPR / C-DPR training, and step-wise reward
//!   inference for annotation.
//! - [`bt`]: Bradley-Terry MLP reward baseline.
//! - [`envs`]: desk-scale environments with known ground-truth rewards,
//!   behavior-policy dataset generation, normalized-score anchors.
//! - [`offline_rl`]: TD3+BC and IQL on annotated datasets, plus policy
//!   evaluation.
//! - [`reward`]: the trained-reward-model artifact shared by the methods
//!   (checkpointing and dataset annotation).

pub mod bt;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod offline_rl;
pub mod prefdata;
pub mod reward;
pub mod tensor;

pub use error::{CoreError, Result};
