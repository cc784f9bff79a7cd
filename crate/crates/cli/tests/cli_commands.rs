//! Stage-level behavior of the pipeline commands: artifact layout,
//! idempotence, error reporting, and the oracle pass-through.

use std::fs;
use std::path::{Path, PathBuf};

use dpr_cli::config::PipelineConfig;
use dpr_cli::{
    cmd_annotate, cmd_evaluate, cmd_gen_data, cmd_label, cmd_pipeline, cmd_train_policy,
    cmd_train_reward, Manifest, RunPaths,
};
use dpr_core::envs::{Environment, PointMassEnv};
use dpr_core::prefdata::io as dataio;
use dpr_core::prefdata::scripted_teacher_label;
use dpr_core::reward::{Method, RewardModel};

fn test_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dpr-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn tiny_config(dir: &Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.out_dir = dir.to_path_buf();
    cfg.env.horizon = 30;
    cfg.data.n_traj = 12;
    cfg.data.anchor_episodes = 10;
    cfg.label.h = 8;
    cfg.label.n_pairs = 30;
    cfg.reward.epochs = 3;
    cfg.reward.batch_size = 16;
    cfg.reward.hidden_layers = 1;
    cfg.reward.hidden_dim = 12;
    cfg.reward.t_embed_dim = 3;
    cfg.reward.cond_dim = 4;
    cfg.reward.mc_samples = 2;
    cfg.rl.steps = 120;
    cfg.rl.batch_size = 32;
    cfg.rl.hidden_layers = 1;
    cfg.rl.hidden_dim = 12;
    cfg.rl.eval_interval = 0;
    cfg.rl.eval_episodes = 2;
    cfg.rl.eval_seeds = 2;
    cfg
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Byte-compares all artifacts of two run dirs, ignoring the manifest
/// (which records wall-clock timings).
fn assert_runs_identical(a: &Path, b: &Path) {
    let rel = |root: &Path, p: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    let fa: Vec<_> = files_under(a)
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| rel(a, &p))
        .collect();
    let fb: Vec<_> = files_under(b)
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| rel(b, &p))
        .collect();
    assert_eq!(fa, fb, "different artifact sets");
    for p in fa {
        let ba = fs::read(a.join(&p)).unwrap();
        let bb = fs::read(b.join(&p)).unwrap();
        assert_eq!(ba, bb, "artifact {} differs between runs", p.display());
    }
}

#[test]
fn gen_data_writes_loadable_files_and_is_idempotent() {
    let dir = test_dir("gen");
    let cfg = tiny_config(&dir, 1);
    cmd_gen_data(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let ds = dataio::load_dataset(paths.dataset()).unwrap();
    let truth = dataio::load_dataset(paths.truth()).unwrap();
    assert_eq!(ds.trajectories.len(), 12);
    assert!(!ds.meta.has_rewards);
    assert!(truth.meta.has_rewards);
    assert!(ds.meta.anchors.is_some());

    let bytes1 = fs::read(paths.dataset()).unwrap();
    cmd_gen_data(&cfg).unwrap();
    let bytes2 = fs::read(paths.dataset()).unwrap();
    assert_eq!(bytes1, bytes2, "same seed must give byte-identical data");
}

#[test]
fn label_respects_pair_bound_and_relabel_oracle() {
    let dir = test_dir("label");
    let cfg = tiny_config(&dir, 2);
    cmd_gen_data(&cfg).unwrap();
    cmd_label(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let ds = dataio::load_dataset(paths.dataset()).unwrap();
    let prefs = dataio::load_preferences(paths.prefs(), &ds).unwrap();
    assert!(prefs.len() <= cfg.label.n_pairs, "{} pairs", prefs.len());
    assert!(prefs.pairs.iter().all(|p| p.label == 1.0));

    // relabel oracle: the analytic env reward reproduces every stored label
    let env = PointMassEnv::new(cfg.env.dt, cfg.env.horizon, cfg.rl.gamma);
    for p in &prefs.pairs {
        let y = scripted_teacher_label(
            &p.seg0,
            &p.seg1,
            |s, a| env.true_reward(s, a),
            cfg.label.tau_eq,
        );
        assert_eq!(y, 1.0, "stored pair contradicts the teacher");
    }
}

#[test]
fn label_errors_when_h_exceeds_trajectories() {
    let dir = test_dir("label-h");
    let mut cfg = tiny_config(&dir, 3);
    cmd_gen_data(&cfg).unwrap();
    cfg.label.h = 31; // horizon is 30
    let err = cmd_label(&cfg).unwrap_err().to_string();
    assert!(err.contains("longest has 30"), "{err}");
}

#[test]
fn label_without_sidecar_mentions_scope() {
    let dir = test_dir("label-sidecar");
    let cfg = tiny_config(&dir, 4);
    cmd_gen_data(&cfg).unwrap();
    fs::remove_file(RunPaths::new(&dir).truth()).unwrap();
    let err = cmd_label(&cfg).unwrap_err().to_string();
    assert!(err.contains("human labels are out of scope"), "{err}");
}

#[test]
fn train_reward_writes_round_trippable_checkpoint_and_full_curve() {
    let dir = test_dir("train-reward");
    let cfg = tiny_config(&dir, 5);
    cmd_gen_data(&cfg).unwrap();
    cmd_label(&cfg).unwrap();
    cmd_train_reward(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let model = RewardModel::load(paths.model(Method::Dpr)).unwrap();
    assert_eq!(model.method(), Method::Dpr);

    let csv = fs::read_to_string(paths.loss_csv(Method::Dpr)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,loss");
    assert_eq!(rows.len() - 1, cfg.reward.epochs, "loss rows == epochs");
}

#[test]
fn train_reward_rejects_oracle() {
    let dir = test_dir("train-oracle");
    let mut cfg = tiny_config(&dir, 6);
    cfg.reward.method = Method::Oracle;
    let err = cmd_train_reward(&cfg).unwrap_err().to_string();
    assert!(err.contains("oracle"), "{err}");
}

#[test]
fn cdpr_and_dpr_checkpoints_differ_in_conditionality() {
    let dir = test_dir("cond");
    let mut cfg = tiny_config(&dir, 7);
    cmd_gen_data(&cfg).unwrap();
    cmd_label(&cfg).unwrap();
    cmd_train_reward(&cfg).unwrap();
    cfg.reward.method = Method::Cdpr;
    cmd_train_reward(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let dpr = fs::read_to_string(paths.model(Method::Dpr)).unwrap();
    let cdpr = fs::read_to_string(paths.model(Method::Cdpr)).unwrap();
    assert!(dpr.contains("\"method\":\"dpr\""));
    assert!(cdpr.contains("\"method\":\"cdpr\""));
    assert!(cdpr.contains("cond_embed"));
}

#[test]
fn annotate_oracle_copies_sidecar_exactly() {
    let dir = test_dir("annotate-oracle");
    let mut cfg = tiny_config(&dir, 8);
    cfg.reward.method = Method::Oracle;
    cmd_gen_data(&cfg).unwrap();
    cmd_annotate(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let truth = dataio::load_dataset(paths.truth()).unwrap();
    let annotated = dataio::load_dataset(paths.annotated(Method::Oracle)).unwrap();
    assert_eq!(truth, annotated);
}

#[test]
fn annotate_dpr_is_positive_and_seed_stable() {
    let dir = test_dir("annotate-dpr");
    let cfg = tiny_config(&dir, 9);
    cmd_gen_data(&cfg).unwrap();
    cmd_label(&cfg).unwrap();
    cmd_train_reward(&cfg).unwrap();
    cmd_annotate(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(paths.annotate_summary(Method::Dpr)).unwrap())
            .unwrap();
    assert!(summary["min"].as_f64().unwrap() > 0.0, "raw rewards positive");

    let first = fs::read(paths.annotated(Method::Dpr)).unwrap();
    cmd_annotate(&cfg).unwrap();
    let second = fs::read(paths.annotated(Method::Dpr)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn missing_stage_artifacts_name_the_stage() {
    let dir = test_dir("missing");
    let cfg = tiny_config(&dir, 10);
    let err = cmd_label(&cfg).unwrap_err().to_string();
    assert!(err.contains("gen-data"), "{err}");
    cmd_gen_data(&cfg).unwrap();
    let err = cmd_train_reward(&cfg).unwrap_err().to_string();
    assert!(err.contains("label"), "{err}");
    let err = cmd_annotate(&cfg).unwrap_err().to_string();
    assert!(err.contains("train-reward"), "{err}");
    let err = cmd_train_policy(&cfg).unwrap_err().to_string();
    assert!(err.contains("annotate"), "{err}");
    let err = cmd_evaluate(&cfg).unwrap_err().to_string();
    assert!(err.contains("train-policy"), "{err}");
}

#[test]
fn oracle_pipeline_end_to_end_with_report_arithmetic() {
    let dir = test_dir("pipeline-oracle");
    let mut cfg = tiny_config(&dir, 11);
    cfg.reward.method = Method::Oracle;
    let reports = cmd_pipeline(&cfg).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0].report;
    let mean = r.per_seed.iter().map(|s| s.mean_normalized).sum::<f64>()
        / r.per_seed.len() as f64;
    assert!((r.mean - mean).abs() < 1e-12, "report mean is the per-seed mean");
    assert_eq!(r.per_seed.len(), cfg.rl.eval_seeds);
}

#[test]
fn pipeline_comparison_has_one_row_per_method() {
    let dir = test_dir("pipeline-compare");
    let mut cfg = tiny_config(&dir, 12);
    // keep it minimal: tiny nets, few steps, all four methods
    cfg.pipeline.methods = vec![Method::Dpr, Method::Cdpr, Method::Bt, Method::Oracle];
    cmd_pipeline(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let csv = fs::read_to_string(paths.comparison_csv()).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "method,score_mean,score_std");
    assert_eq!(rows.len() - 1, 4, "{csv}");
    let json: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(paths.comparison_json()).unwrap()).unwrap();
    assert_eq!(json.len(), 4);
}

#[test]
fn binary_reports_categorized_errors_and_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dpr");
    // config error: nonzero exit (2) with a categorized message
    let out = std::process::Command::new(bin)
        .args(["gen-data", "--config", "/nonexistent/nope.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[config]"), "{stderr}");

    // missing upstream artifact: nonzero exit with the stage named
    let dir = test_dir("bin-missing");
    let out = std::process::Command::new(bin)
        .args(["label", "--out-dir"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[data]") && stderr.contains("gen-data"), "{stderr}");

    // a valid run exits 0
    let dir = test_dir("bin-ok");
    let cfg = tiny_config(&dir, 20);
    let cfg_path = dir.join("config.toml");
    fs::create_dir_all(&dir).unwrap();
    fs::write(&cfg_path, toml_of(&cfg)).unwrap();
    let out = std::process::Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Serializes a config back to TOML for driving the binary.
fn toml_of(cfg: &PipelineConfig) -> String {
    toml::to_string(cfg).unwrap()
}

#[test]
fn manifest_lists_existing_artifacts_and_reproduces_the_run() {
    let dir = test_dir("manifest");
    let cfg = tiny_config(&dir, 13);
    cmd_pipeline(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(paths.manifest()).unwrap()).unwrap();
    assert!(!manifest.artifacts.is_empty());
    for p in manifest.artifacts.values() {
        assert!(Path::new(p).exists(), "{p} listed but missing");
    }

    // replaying the manifest's config snapshot into a fresh directory
    // reproduces every artifact byte for byte
    let dir2 = test_dir("manifest-replay");
    let mut cfg2 = manifest.config.clone();
    cfg2.out_dir = dir2.clone();
    cmd_pipeline(&cfg2).unwrap();
    assert_runs_identical(&dir, &dir2);
}
