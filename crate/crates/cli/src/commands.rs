//! Pipeline stages as library functions, one per subcommand.
//!
//! Every stage is deterministic for a fixed (config, seed): artifacts are
//! byte-identical across reruns. The run manifest is the one exception — it
//! records wall-clock timings alongside the resolved config snapshot and
//! artifact paths, and is written atomically at the end of each command.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use dpr_core::envs::{
    estimate_anchors, generate_offline_dataset, Environment, PointMassEnv, ScoreAnchors,
};
use dpr_core::offline_rl::{
    evaluate_protocol, train_iql, train_td3bc, Actor, EvalReport, MetricsRow, ReplayData, RlAlgo,
};
use dpr_core::prefdata::{
    canonicalize, io as dataio, sample_segments, PreferencePair, Trajectory, UnlabeledDataset,
};
use dpr_core::reward::{annotate_dataset, train_reward_model, Method, RewardModel, RewardSummary};
use dpr_core::tensor::Rng;
use dpr_core::{CoreError, Result};

use crate::config::PipelineConfig;

// rng stream ids, one per pipeline stage
pub const STAGE_GEN: u64 = 1;
pub const STAGE_ANCHORS: u64 = 2;
pub const STAGE_LABEL: u64 = 3;
pub const STAGE_REWARD: u64 = 4;
pub const STAGE_ANNOTATE: u64 = 5;
pub const STAGE_POLICY: u64 = 6;
pub const STAGE_EVAL: u64 = 7;

/// Stage-local seed derived from the run seed.
pub fn stage_seed(root: u64, stage: u64) -> u64 {
    Rng::with_stream(root, stage).next_u64()
}

/// Artifact layout: one directory per run, stage subdirectories, manifest at
/// the root.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.jsonl")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("data/truth.jsonl")
    }
    pub fn prefs(&self) -> PathBuf {
        self.root.join("label/prefs.jsonl")
    }
    pub fn model(&self, m: Method) -> PathBuf {
        self.root.join(format!("reward/{}/model.json", m.as_str()))
    }
    pub fn loss_csv(&self, m: Method) -> PathBuf {
        self.root.join(format!("reward/{}/loss.csv", m.as_str()))
    }
    pub fn annotated(&self, m: Method) -> PathBuf {
        self.root.join(format!("annotate/{}/annotated.jsonl", m.as_str()))
    }
    pub fn annotate_summary(&self, m: Method) -> PathBuf {
        self.root.join(format!("annotate/{}/summary.json", m.as_str()))
    }
    pub fn actor(&self, m: Method) -> PathBuf {
        self.root.join(format!("policy/{}/actor.json", m.as_str()))
    }
    pub fn metrics_csv(&self, m: Method) -> PathBuf {
        self.root.join(format!("policy/{}/metrics.csv", m.as_str()))
    }
    pub fn report_json(&self, m: Method) -> PathBuf {
        self.root.join(format!("eval/{}/report.json", m.as_str()))
    }
    pub fn report_csv(&self, m: Method) -> PathBuf {
        self.root.join(format!("eval/{}/report.csv", m.as_str()))
    }
    pub fn comparison_json(&self) -> PathBuf {
        self.root.join("eval/comparison.json")
    }
    pub fn comparison_csv(&self) -> PathBuf {
        self.root.join("eval/comparison.csv")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CoreError::config(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn require(path: &Path, what: &str, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::data(format!(
            "{what} not found at {}; run the '{stage}' stage first",
            path.display()
        )))
    }
}

/// Run manifest: resolved config snapshot, artifact paths, version stamp and
/// wall-clock timings. Written atomically; listed paths are verified to
/// exist first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: PipelineConfig,
    pub artifacts: BTreeMap<String, String>,
    pub timings_sec: BTreeMap<String, f64>,
}

impl Manifest {
    fn fresh(cfg: &PipelineConfig) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            artifacts: BTreeMap::new(),
            timings_sec: BTreeMap::new(),
        }
    }

    /// Continues an existing manifest when it was produced by the same run
    /// configuration; otherwise starts fresh. The reward-method fields are
    /// neutralized for the comparison so the per-method stages of one
    /// pipeline invocation accumulate into a single manifest.
    pub fn load_or_new(paths: &RunPaths, cfg: &PipelineConfig) -> Self {
        let neutral = |c: &PipelineConfig| {
            let mut c = c.clone();
            c.reward.method = Method::Dpr;
            c.pipeline.methods = Vec::new();
            c
        };
        let path = paths.manifest();
        if let Ok(f) = File::open(&path) {
            if let Ok(mut m) = serde_json::from_reader::<_, Manifest>(BufReader::new(f)) {
                if neutral(&m.config) == neutral(cfg) {
                    m.config = cfg.clone();
                    return m;
                }
            }
        }
        Manifest::fresh(cfg)
    }

    pub fn record(&mut self, key: &str, path: &Path) {
        self.artifacts
            .insert(key.to_string(), path.to_string_lossy().to_string());
    }

    pub fn time(&mut self, key: &str, secs: f64) {
        self.timings_sec.insert(key.to_string(), secs);
    }

    /// Atomic write: temp file in the run directory, then rename.
    pub fn write(&self, paths: &RunPaths) -> Result<()> {
        for (key, p) in &self.artifacts {
            if !Path::new(p).exists() {
                return Err(CoreError::data(format!(
                    "manifest artifact '{key}' missing on disk: {p}"
                )));
            }
        }
        fs::create_dir_all(&paths.root)?;
        let tmp = paths.root.join(".manifest.json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "{}", serde_json::to_string_pretty(self)?)?;
            w.flush()?;
        }
        fs::rename(&tmp, paths.manifest())?;
        Ok(())
    }
}

fn build_env(cfg: &PipelineConfig) -> PointMassEnv {
    PointMassEnv::new(cfg.env.dt, cfg.env.horizon, cfg.rl.gamma)
}

fn load_dataset_checked(path: &Path, stage: &str) -> Result<UnlabeledDataset> {
    require(path, "dataset", stage)?;
    dataio::load_dataset(path)
}

/// Generates the offline dataset: unlabeled export, ground-truth sidecar,
/// and normalized-score anchors stored in both headers.
pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    // fail on an unwritable output directory before any computation
    ensure_parent(&paths.dataset())?;
    let t0 = Instant::now();

    let env = build_env(cfg);
    let mut rng = Rng::with_stream(cfg.seed, STAGE_GEN);
    let mut generated =
        generate_offline_dataset(&env, cfg.data.quality, cfg.data.n_traj, cfg.seed, &mut rng)?;
    let mut anchor_rng = Rng::with_stream(cfg.seed, STAGE_ANCHORS);
    let anchors = estimate_anchors(&env, cfg.data.anchor_episodes, &mut anchor_rng)?;
    generated.unlabeled.meta.anchors = Some(anchors);
    generated.truth.meta.anchors = Some(anchors);

    dataio::save_dataset(&generated.unlabeled, paths.dataset())?;
    dataio::save_dataset(&generated.truth, paths.truth())?;

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record("dataset", &paths.dataset());
    manifest.record("truth", &paths.truth());
    manifest.time("gen_data", t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    println!(
        "gen-data: {} trajectories of {} steps ({}), anchors random {:.3} expert {:.3}",
        cfg.data.n_traj,
        cfg.env.horizon,
        cfg.data.quality.as_str(),
        anchors.score_random,
        anchors.score_expert
    );
    Ok(())
}

fn sidecar_return(truth: &Trajectory, start: usize, h: usize) -> f64 {
    truth.transitions[start..start + h]
        .iter()
        .map(|t| t.reward.expect("sidecar carries rewards"))
        .sum()
}

/// Samples segment pairs and labels them with the scripted teacher from the
/// ground-truth sidecar, then canonicalizes and writes the preference file.
pub fn cmd_label(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let dataset = load_dataset_checked(&paths.dataset(), "gen-data")?;
    if !paths.truth().exists() {
        return Err(CoreError::data(format!(
            "ground-truth sidecar not found at {}; scripted-teacher labels need it and human \
             labels are out of scope. Run the 'gen-data' stage first",
            paths.truth().display()
        )));
    }
    let truth = dataio::load_dataset(paths.truth())?;
    let t0 = Instant::now();

    let mut rng = Rng::with_stream(cfg.seed, STAGE_LABEL);
    let segments = sample_segments(&dataset, cfg.label.h, 2 * cfg.label.n_pairs, &mut rng)?;
    let mut pairs = Vec::with_capacity(cfg.label.n_pairs);
    for chunk in segments.chunks(2) {
        let (s0, s1) = (chunk[0].clone(), chunk[1].clone());
        let r0 = sidecar_return(
            truth
                .trajectory_by_id(s0.traj_id)
                .ok_or_else(|| CoreError::data(format!("trajectory {} missing in sidecar", s0.traj_id)))?,
            s0.start,
            cfg.label.h,
        );
        let r1 = sidecar_return(
            truth
                .trajectory_by_id(s1.traj_id)
                .ok_or_else(|| CoreError::data(format!("trajectory {} missing in sidecar", s1.traj_id)))?,
            s1.start,
            cfg.label.h,
        );
        let y = if (r1 - r0).abs() <= cfg.label.tau_eq {
            0.5
        } else if r1 > r0 {
            1.0
        } else {
            0.0
        };
        pairs.push(PreferencePair::new(s0, s1, y)?);
    }
    let prefs = canonicalize(pairs, cfg.label.tie_policy, "scripted")?;
    ensure_parent(&paths.prefs())?;
    dataio::save_preferences(&prefs, &dataset.meta, paths.prefs())?;

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record("prefs", &paths.prefs());
    manifest.time("label", t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    println!(
        "label: {} canonical pairs (H = {}, tie policy {:?})",
        prefs.len(),
        cfg.label.h,
        cfg.label.tie_policy
    );
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss")?;
    for (e, l) in curve.iter().enumerate() {
        writeln!(w, "{},{}", e + 1, l)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the configured reward model and writes the checkpoint plus the
/// per-epoch loss curve.
pub fn cmd_train_reward(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let method = cfg.reward.method;
    if method == Method::Oracle {
        return Err(CoreError::config(
            "method 'oracle' uses ground-truth rewards and needs no training; run 'annotate' directly"
                .to_string(),
        ));
    }
    let paths = RunPaths::new(&cfg.out_dir);
    let dataset = load_dataset_checked(&paths.dataset(), "gen-data")?;
    require(&paths.prefs(), "preference file", "label")?;
    let prefs = dataio::load_preferences(paths.prefs(), &dataset)?;
    let t0 = Instant::now();

    let train_cfg = cfg.reward.train_config(stage_seed(cfg.seed, STAGE_REWARD));
    let (model, curve) = train_reward_model(&prefs, method, &train_cfg)?;
    ensure_parent(&paths.model(method))?;
    model.save(paths.model(method))?;
    write_loss_csv(&paths.loss_csv(method), &curve)?;

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record(&format!("model_{}", method.as_str()), &paths.model(method));
    manifest.record(&format!("loss_{}", method.as_str()), &paths.loss_csv(method));
    manifest.time(&format!("train_reward_{}", method.as_str()), t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    println!(
        "train-reward ({}): {} epochs, final loss {:.6}",
        method.as_str(),
        curve.len(),
        curve.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

/// Fills the dataset's rewards: by copying the sidecar for the oracle
/// method, or by querying the trained model otherwise. Prints and stores a
/// raw-reward summary.
pub fn cmd_annotate(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let method = cfg.reward.method;
    let paths = RunPaths::new(&cfg.out_dir);
    let dataset = load_dataset_checked(&paths.dataset(), "gen-data")?;
    let t0 = Instant::now();

    let (annotated, summary) = if method == Method::Oracle {
        require(&paths.truth(), "ground-truth sidecar", "gen-data")?;
        let truth = dataio::load_dataset(paths.truth())?;
        let rewards: Vec<f64> = truth
            .trajectories
            .iter()
            .flat_map(|t| t.transitions.iter().map(|tr| tr.reward.expect("sidecar rewards")))
            .collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let summary = RewardSummary {
            min: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
            mean,
            max: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            count: rewards.len(),
        };
        (truth, summary)
    } else {
        require(
            &paths.model(method),
            &format!("reward model ({})", method.as_str()),
            "train-reward",
        )?;
        let model = RewardModel::load(paths.model(method))?;
        annotate_dataset(
            &model,
            &dataset,
            stage_seed(cfg.seed, STAGE_ANNOTATE),
            cfg.reward.standardize,
        )?
    };
    ensure_parent(&paths.annotated(method))?;
    dataio::save_dataset(&annotated, paths.annotated(method))?;
    {
        ensure_parent(&paths.annotate_summary(method))?;
        let mut w = BufWriter::new(File::create(paths.annotate_summary(method))?);
        writeln!(w, "{}", serde_json::to_string_pretty(&summary)?)?;
    }

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record(&format!("annotated_{}", method.as_str()), &paths.annotated(method));
    manifest.record(
        &format!("annotate_summary_{}", method.as_str()),
        &paths.annotate_summary(method),
    );
    manifest.time(&format!("annotate_{}", method.as_str()), t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    println!(
        "annotate ({}): {} rewards, min {:.6} mean {:.6} max {:.6}{}",
        method.as_str(),
        summary.count,
        summary.min,
        summary.mean,
        summary.max,
        if annotated.meta.reward_standardization.is_some() {
            " (standardized on disk)"
        } else {
            ""
        }
    );
    Ok(())
}

/// Policy checkpoint: the greedy actor plus enough metadata to rebuild the
/// evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub algo: RlAlgo,
    pub env: String,
    pub actor: Actor,
}

fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,critic_loss,actor_loss,eval_return")?;
    for r in rows {
        let ev = r.eval_return.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.step, r.critic_loss, r.actor_loss, ev)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the downstream offline RL policy on the annotated dataset.
pub fn cmd_train_policy(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let method = cfg.reward.method;
    let paths = RunPaths::new(&cfg.out_dir);
    require(
        &paths.annotated(method),
        &format!("annotated dataset ({})", method.as_str()),
        "annotate",
    )?;
    let annotated = dataio::load_dataset(paths.annotated(method))?;
    let replay = ReplayData::from_dataset(&annotated)?;
    let env = build_env(cfg);
    let t0 = Instant::now();

    let rl_cfg = cfg.rl.rl_config(stage_seed(cfg.seed, STAGE_POLICY));
    let (actor, metrics) = match cfg.rl.algo {
        RlAlgo::Td3bc => train_td3bc(
            &replay,
            env.action_low(),
            env.action_high(),
            &rl_cfg,
            Some(&env),
        )?,
        RlAlgo::Iql => train_iql(
            &replay,
            env.action_low(),
            env.action_high(),
            &rl_cfg,
            Some(&env),
        )?,
    };
    let checkpoint = PolicyCheckpoint {
        algo: cfg.rl.algo,
        env: cfg.env.name.clone(),
        actor,
    };
    ensure_parent(&paths.actor(method))?;
    {
        let mut w = BufWriter::new(File::create(paths.actor(method))?);
        writeln!(w, "{}", serde_json::to_string(&checkpoint)?)?;
    }
    write_metrics_csv(&paths.metrics_csv(method), &metrics)?;

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record(&format!("actor_{}", method.as_str()), &paths.actor(method));
    manifest.record(&format!("metrics_{}", method.as_str()), &paths.metrics_csv(method));
    manifest.time(&format!("train_policy_{}", method.as_str()), t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    let last_eval = metrics.iter().rev().find_map(|m| m.eval_return);
    println!(
        "train-policy ({}, {}): {} steps{}",
        method.as_str(),
        cfg.rl.algo.as_str(),
        rl_cfg.steps,
        last_eval
            .map(|v| format!(", final eval return {v:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

/// Per-method evaluation report, as stored in `eval/<method>/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub algo: RlAlgo,
    #[serde(flatten)]
    pub report: EvalReport,
}

fn dataset_anchors(dataset: &UnlabeledDataset) -> Result<ScoreAnchors> {
    dataset.meta.anchors.ok_or_else(|| {
        CoreError::data(
            "dataset header carries no score anchors; regenerate it with the 'gen-data' stage"
                .to_string(),
        )
    })
}

/// Evaluates the trained policy over the multi-seed protocol and writes the
/// JSON and CSV reports.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<MethodReport> {
    cfg.validate()?;
    let method = cfg.reward.method;
    let paths = RunPaths::new(&cfg.out_dir);
    require(
        &paths.actor(method),
        &format!("policy checkpoint ({})", method.as_str()),
        "train-policy",
    )?;
    let checkpoint: PolicyCheckpoint =
        serde_json::from_reader(BufReader::new(File::open(paths.actor(method))?))
            .map_err(|e| CoreError::data(format!("policy checkpoint: {e}")))?;
    let dataset = load_dataset_checked(&paths.dataset(), "gen-data")?;
    let anchors = dataset_anchors(&dataset)?;
    let env = build_env(cfg);
    let t0 = Instant::now();

    let report = evaluate_protocol(
        &checkpoint.actor,
        &env,
        &anchors,
        cfg.rl.eval_seeds,
        cfg.rl.eval_episodes,
        stage_seed(cfg.seed, STAGE_EVAL),
    )?;
    let method_report = MethodReport {
        method,
        algo: checkpoint.algo,
        report,
    };
    ensure_parent(&paths.report_json(method))?;
    {
        let mut w = BufWriter::new(File::create(paths.report_json(method))?);
        writeln!(w, "{}", serde_json::to_string_pretty(&method_report)?)?;
    }
    {
        let mut w = BufWriter::new(File::create(paths.report_csv(method))?);
        writeln!(w, "seed,mean_normalized,std_normalized")?;
        for s in &method_report.report.per_seed {
            writeln!(w, "{},{},{}", s.seed, s.mean_normalized, s.std_normalized)?;
        }
        writeln!(
            w,
            "overall,{},{}",
            method_report.report.mean, method_report.report.std
        )?;
        w.flush()?;
    }

    let mut manifest = Manifest::load_or_new(&paths, cfg);
    manifest.record(&format!("report_{}", method.as_str()), &paths.report_json(method));
    manifest.record(&format!("report_csv_{}", method.as_str()), &paths.report_csv(method));
    manifest.time(&format!("evaluate_{}", method.as_str()), t0.elapsed().as_secs_f64());
    manifest.write(&paths)?;
    println!(
        "evaluate ({}): normalized score {:.2} +/- {:.2} over {} seeds x {} episodes",
        method.as_str(),
        method_report.report.mean,
        method_report.report.std,
        cfg.rl.eval_seeds,
        cfg.rl.eval_episodes
    );
    Ok(method_report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub score_mean: f64,
    pub score_std: f64,
}

/// Runs every stage in order for each configured method and, when several
/// methods are configured, writes a comparison table.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<Vec<MethodReport>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    cmd_gen_data(cfg)?;
    cmd_label(cfg)?;

    let methods = cfg.pipeline_methods();
    let mut reports = Vec::with_capacity(methods.len());
    for &method in &methods {
        let mut mcfg = cfg.clone();
        mcfg.reward.method = method;
        if method != Method::Oracle {
            cmd_train_reward(&mcfg)?;
        }
        cmd_annotate(&mcfg)?;
        cmd_train_policy(&mcfg)?;
        reports.push(cmd_evaluate(&mcfg)?);
    }

    if reports.len() > 1 {
        let rows: Vec<ComparisonRow> = reports
            .iter()
            .map(|r| ComparisonRow {
                method: r.method,
                score_mean: r.report.mean,
                score_std: r.report.std,
            })
            .collect();
        ensure_parent(&paths.comparison_json())?;
        {
            let mut w = BufWriter::new(File::create(paths.comparison_json())?);
            writeln!(w, "{}", serde_json::to_string_pretty(&rows)?)?;
        }
        {
            let mut w = BufWriter::new(File::create(paths.comparison_csv())?);
            writeln!(w, "method,score_mean,score_std")?;
            for r in &rows {
                writeln!(w, "{},{},{}", r.method.as_str(), r.score_mean, r.score_std)?;
            }
            w.flush()?;
        }
        let mut manifest = Manifest::load_or_new(&paths, cfg);
        manifest.record("comparison", &paths.comparison_json());
        manifest.record("comparison_csv", &paths.comparison_csv());
        manifest.write(&paths)?;
        println!("pipeline: comparison table with {} rows", rows.len());
    }
    Ok(reports)
}
