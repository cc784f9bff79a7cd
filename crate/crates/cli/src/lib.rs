//! Library surface of the pipeline runner, so integration and acceptance
//! tests can drive the exact code paths behind the `dpr` binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_annotate, cmd_evaluate, cmd_gen_data, cmd_label, cmd_pipeline, cmd_train_policy,
    cmd_train_reward, ComparisonRow, Manifest, MethodReport, PolicyCheckpoint, RunPaths,
};
pub use config::PipelineConfig;
