//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (visible with `--nocapture`).
//!
//! Criterion 6 compares the learned-reward pipeline against baseline scores
//! that were fixed by running the oracle-reward and constant-reward TD3+BC
//! baselines first on the same configuration (see
//! `criterion6_baselines_recompute`, `#[ignore]`d, which reproduces them).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpr_cli::commands::{self, stage_seed, RunPaths};
use dpr_cli::config::PipelineConfig;
use dpr_core::bt::{bt_loss_grads, BtRewardNet};
use dpr_core::diffusion::{
    cdpr_loss_grads, cdpr_loss_with_draws, dpr_loss_grads, dpr_loss_with_draws,
    reward_from_step_probs, train_cdpr, train_dpr, CdprModel, DenoiserNet, DprDraws, DprModel,
    NoiseSchedule, NormStats, RewardTrainConfig, DEFAULT_P_MIN,
};
use dpr_core::envs::{Environment, PointMassEnv};
use dpr_core::offline_rl::{evaluate_protocol, train_td3bc, ReplayData};
use dpr_core::prefdata::io as dataio;
use dpr_core::prefdata::{LabeledPrefDataset, PreferencePair, Segment};
use dpr_core::reward::Method;
use dpr_core::tensor::gradcheck::{central_diff, max_rel_err};
use dpr_core::tensor::{Activation, MlpConfig, MlpParams, Rng, Tensor};

// ── Criterion 6 baseline scores ─────────────────────────────────────
//
// Fixed from the baseline runs on the acceptance configuration (seed 0,
// mixed 200-trajectory dataset, 500 scripted pairs, TD3+BC 50k steps):
// oracle-reward TD3+BC and uniform-constant-reward TD3+BC, evaluated over
// 5 seeds x 10 episodes. Recompute with `criterion6_baselines_recompute`.
const ORACLE_REWARD_TD3BC_SCORE: f64 = 92.36;
const CONSTANT_REWARD_TD3BC_SCORE: f64 = 84.25;

fn test_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dpr-accept-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// The end-to-end acceptance configuration: defaults except for a
/// desk-scale reward-training schedule (the 50k-step TD3+BC stays).
fn acceptance_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 0;
    cfg.out_dir = dir.to_path_buf();
    cfg.reward.epochs = 100;
    cfg.reward.batch_size = 64;
    cfg.reward.mc_samples = 8;
    cfg.rl.eval_interval = 0;
    cfg
}

// ── shared helpers ──────────────────────────────────────────────────

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Mann-Whitney AUC: probability a positive outranks a negative, ties at
/// half credit.
fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

// separable-Gaussian data: preferred steps ~ N(+1, 0.1 I), others mirrored
const SEP_DIM: usize = 4;
const SEP_H: usize = 5;

fn gaussian_step(rng: &mut Rng, mean: f64) -> Vec<f64> {
    (0..SEP_DIM).map(|_| mean + 0.1f64.sqrt() * rng.normal()).collect()
}

fn gaussian_segment(rng: &mut Rng, mean: f64) -> Segment {
    let rows: Vec<Vec<f64>> = (0..SEP_H).map(|_| gaussian_step(rng, mean)).collect();
    Segment {
        traj_id: 0,
        start: 0,
        states: rows.iter().map(|r| r[..2].to_vec()).collect(),
        actions: rows.iter().map(|r| r[2..].to_vec()).collect(),
    }
}

fn separable_pairs(n: usize, seed: u64) -> LabeledPrefDataset {
    let mut rng = Rng::new(seed);
    LabeledPrefDataset::new(
        (0..n)
            .map(|_| {
                PreferencePair::new(
                    gaussian_segment(&mut rng, -1.0),
                    gaussian_segment(&mut rng, 1.0),
                    1.0,
                )
                .unwrap()
            })
            .collect(),
        "external",
    )
    .unwrap()
}

// ── criteria ────────────────────────────────────────────────────────

#[test]
fn criterion_1_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = Rng::new(41);
    let const_seg = |rng: &mut Rng, h: usize| Segment {
        traj_id: 0,
        start: 0,
        states: (0..h).map(|_| vec![rng.normal(), rng.normal()]).collect(),
        actions: (0..h).map(|_| vec![rng.normal(), rng.normal()]).collect(),
    };
    let pair = |rng: &mut Rng, y: f64| {
        PreferencePair::new(const_seg(rng, 3), const_seg(rng, 3), y).unwrap()
    };

    // DPR loss
    let den = DenoiserNet::new(4, 3, 3, None, vec![8, 8], Activation::Tanh, &mut rng).unwrap();
    assert!(den.param_count() <= 1000);
    let schedule = NoiseSchedule::linear(3, 1e-3, 0.1).unwrap();
    let norm = NormStats::identity(4);
    let batch_owned = vec![pair(&mut rng, 1.0), pair(&mut rng, 1.0)];
    let batch: Vec<&PreferencePair> = batch_owned.iter().collect();
    let draws = DprDraws::sample(2 * 2 * 3, 4, 3, &mut rng);
    let (_, grads) = dpr_loss_grads(&den, &schedule, &norm, 1e-6, &batch, &draws).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let numeric = central_diff(
        |flat| {
            let d = den.with_flat(flat).unwrap();
            dpr_loss_with_draws(&d, &schedule, &norm, 1e-6, &batch, &draws).unwrap()
        },
        &den.to_flat(),
        1e-5,
    );
    let dpr_err = max_rel_err(&analytic, &numeric);
    assert!(dpr_err < 1e-4, "dpr gradient rel err {dpr_err}");

    // C-DPR loss
    let den =
        DenoiserNet::new(4, 3, 3, Some(3), vec![8, 8], Activation::Tanh, &mut rng).unwrap();
    assert!(den.param_count() <= 1000);
    let (_, grads) = cdpr_loss_grads(&den, &schedule, &norm, 1e-6, &batch, &draws).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let numeric = central_diff(
        |flat| {
            let d = den.with_flat(flat).unwrap();
            cdpr_loss_with_draws(&d, &schedule, &norm, 1e-6, &batch, &draws).unwrap()
        },
        &den.to_flat(),
        1e-5,
    );
    let cdpr_err = max_rel_err(&analytic, &numeric);
    assert!(cdpr_err < 1e-4, "cdpr gradient rel err {cdpr_err}");

    // Bradley-Terry loss, including a tie label
    let net = BtRewardNet {
        mlp: MlpParams::init(MlpConfig::new(4, vec![8, 8], 1), &mut rng).unwrap(),
        norm: NormStats::identity(4),
        p_min: 1e-6,
    };
    assert!(net.mlp.param_count() <= 1000);
    let batch_owned = vec![pair(&mut rng, 1.0), pair(&mut rng, 0.0), pair(&mut rng, 0.5)];
    let batch: Vec<&PreferencePair> = batch_owned.iter().collect();
    let (_, grads) = bt_loss_grads(&net, &batch).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let numeric = central_diff(
        |flat| {
            let mut n2 = net.clone();
            n2.mlp = MlpParams::from_flat(net.mlp.config.clone(), flat).unwrap();
            let (l, _) = bt_loss_grads(&n2, &batch).unwrap();
            l
        },
        &net.mlp.to_flat(),
        1e-5,
    );
    let bt_err = max_rel_err(&analytic, &numeric);
    assert!(bt_err < 1e-4, "bt gradient rel err {bt_err}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient fidelity took {secs:.1}s");
    println!(
        "[criterion 1] PASS: max rel err dpr {dpr_err:.2e}, cdpr {cdpr_err:.2e}, bt {bt_err:.2e} (< 1e-4) in {secs:.1}s"
    );
}

#[test]
fn criterion_2_classifier_normalization() {
    let mut rng = Rng::new(42);
    let cden =
        DenoiserNet::new(3, 4, 3, Some(4), vec![8, 8], Activation::Tanh, &mut rng).unwrap();
    let schedule = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
    let cmodel = CdprModel::new(
        cden,
        schedule.clone(),
        NormStats::identity(3),
        2,
        DEFAULT_P_MIN,
    )
    .unwrap();
    let den = DenoiserNet::new(3, 4, 3, None, vec![8, 8], Activation::Tanh, &mut rng).unwrap();
    let model = DprModel::new(den, schedule, NormStats::identity(3), 2, DEFAULT_P_MIN).unwrap();

    let mut worst_sum = 0.0f64;
    for i in 0..1000 {
        let mut probe = Rng::with_stream(900, i);
        let sa: Vec<f64> = (0..3).map(|_| 3.0 * probe.normal()).collect();
        let (p, q) = cmodel.conditional_prob_pair(&sa, &mut probe).unwrap();
        assert!(p > 0.0 && p < 1.0, "conditional prob {p} out of (0,1)");
        worst_sum = worst_sum.max((p + q - 1.0).abs());
        let s = model.elbo_score(&sa, &mut probe).unwrap();
        assert!(s > 0.0 && s <= 1.0, "elbo score {s} out of (0,1]");
    }
    assert!(worst_sum < 1e-12, "worst |p+q-1| = {worst_sum:.3e}");
    println!(
        "[criterion 2] PASS: 1000 inputs, worst |p(c+)+p(c-)-1| = {worst_sum:.2e} (< 1e-12), elbo scores in (0,1]"
    );
}

#[test]
fn criterion_3_log_mean_concavity() {
    let mut rng = Rng::new(43);
    let mut checked_equal = 0usize;
    let mut min_gap_unequal = f64::INFINITY;
    for i in 0..10_000 {
        let len = rng.below(50) + 1;
        let xs: Vec<f64> = if i % 10 == 0 {
            // exercise the equality branch explicitly
            vec![rng.range_f64(0.05, 0.95); len]
        } else {
            (0..len).map(|_| rng.range_f64(1e-6, 1.0 - 1e-6)).collect()
        };
        let mean = xs.iter().sum::<f64>() / len as f64;
        let mean_log = xs.iter().map(|x| x.ln()).sum::<f64>() / len as f64;
        let gap = mean.ln() - mean_log;
        assert!(gap >= -1e-12, "jensen violated: gap {gap}");
        let all_equal = xs.iter().all(|&x| x == xs[0]);
        if all_equal {
            assert!(gap.abs() < 1e-12, "equal entries must have zero gap, got {gap}");
            checked_equal += 1;
        } else {
            assert!(gap > 1e-12, "distinct entries must have positive gap, got {gap:.3e}");
            min_gap_unequal = min_gap_unequal.min(gap);
        }
    }
    assert!(checked_equal >= 1000);
    println!(
        "[criterion 3] PASS: 10^4 vectors, equality gap < 1e-12 on {checked_equal} all-equal vectors, min gap {min_gap_unequal:.2e} otherwise"
    );
}

#[test]
fn criterion_4_reward_spot_values() {
    // formula-level spot values
    let r_half = reward_from_step_probs(&[0.5; 10], 1e-6);
    assert!((r_half - 2f64.ln()).abs() < 1e-12, "{r_half}");
    let r_perfect = reward_from_step_probs(&[1.0; 10], 1e-6);
    assert!((r_perfect - 13.815510557964274).abs() < 1e-9, "{r_perfect}");

    // model-level: an exact denoiser with per-draw error ln 2 gives
    // probability 1/2 at its single timestep
    let d = 2;
    let schedule = NoiseSchedule::linear(1, 0.25, 0.25).unwrap();
    let mut mlp = MlpParams::zeros(MlpConfig::new(d + 2, vec![], d)).unwrap();
    for i in 0..d {
        mlp.layers[0].w.data[i * d + i] = 2.0;
    }
    mlp.layers[0].b.data = vec![2f64.ln().sqrt(), 0.0];
    let den = DenoiserNet {
        mlp,
        t_embed: Tensor::zeros(vec![1, 2]),
        cond_embed: None,
        data_dim: d,
    };
    let model = DprModel::new(den, schedule, NormStats::identity(d), 4, 1e-6).unwrap();
    let r_model = model.reward(&[0.0, 0.0], &mut Rng::new(3)).unwrap();
    assert!((r_model - 2f64.ln()).abs() < 1e-12, "model reward {r_model}");

    // strict monotonicity in a uniform per-timestep error increase,
    // premise verified per timestep on constructed constant denoisers
    let mk = |bias: f64| {
        let schedule = NoiseSchedule::linear(5, 1e-3, 0.05).unwrap();
        let mut mlp = MlpParams::zeros(MlpConfig::new(6, vec![], 4)).unwrap();
        mlp.layers[0].b.data.iter_mut().for_each(|v| *v = bias);
        let den = DenoiserNet {
            mlp,
            t_embed: Tensor::zeros(vec![5, 2]),
            cond_embed: None,
            data_dim: 4,
        };
        DprModel::new(den, schedule, NormStats::identity(4), 64, 1e-6).unwrap()
    };
    let (low, high) = (mk(0.0), mk(1.0));
    let sa = [0.0; 4];
    let probs_low = low.step_probs(&sa, &mut Rng::new(17)).unwrap();
    let probs_high = high.step_probs(&sa, &mut Rng::new(17)).unwrap();
    for (t, (pl, ph)) in probs_low.iter().zip(probs_high.iter()).enumerate() {
        assert!(pl > ph, "premise fails at t={}: {pl} vs {ph}", t + 1);
    }
    let r_low = reward_from_step_probs(&probs_low, 1e-6);
    let r_high = reward_from_step_probs(&probs_high, 1e-6);
    assert!(r_low > r_high, "monotonicity: {r_low} vs {r_high}");
    println!(
        "[criterion 4] PASS: r(0.5)=ln2 ({r_half:.12}), clamped-perfect r={r_perfect:.6} (= -ln p_min), model-path r={r_model:.12}, strict monotonicity {r_low:.4} > {r_high:.4}"
    );
}

#[test]
fn criterion_5_separable_gaussian_oracle() {
    let prefs = separable_pairs(200, 51);
    let (pos_held, neg_held): (Vec<Vec<f64>>, Vec<Vec<f64>>) = {
        let mut rng = Rng::new(52);
        (
            (0..300).map(|_| gaussian_step(&mut rng, 1.0)).collect(),
            (0..300).map(|_| gaussian_step(&mut rng, -1.0)).collect(),
        )
    };

    // brute-force logistic-regression oracle confirms the thresholds are
    // attainable on this data before they are enforced
    let lr_auc = {
        let mut w = vec![0.0; SEP_DIM + 1];
        let mut train: Vec<(Vec<f64>, f64)> = Vec::new();
        for p in &prefs.pairs {
            for row in p.seg1.sa_rows() {
                train.push((row, 1.0));
            }
            for row in p.seg0.sa_rows() {
                train.push((row, 0.0));
            }
        }
        for _ in 0..300 {
            let mut grad = vec![0.0; SEP_DIM + 1];
            for (x, y) in &train {
                let z: f64 = w[..SEP_DIM].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
                    + w[SEP_DIM];
                let p = 1.0 / (1.0 + (-z).exp());
                for (g, &xv) in grad.iter_mut().zip(x.iter()) {
                    *g += (p - y) * xv;
                }
                grad[SEP_DIM] += p - y;
            }
            for (wv, g) in w.iter_mut().zip(grad.iter()) {
                *wv -= 0.1 * g / train.len() as f64;
            }
        }
        let score = |x: &[f64]| {
            w[..SEP_DIM].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + w[SEP_DIM]
        };
        let pos: Vec<f64> = pos_held.iter().map(|x| score(x)).collect();
        let neg: Vec<f64> = neg_held.iter().map(|x| score(x)).collect();
        auc(&pos, &neg)
    };
    assert!(lr_auc >= 0.9, "logistic oracle AUC {lr_auc:.3}: data not separable enough");

    let cfg = RewardTrainConfig {
        epochs: 120,
        batch_size: 64,
        hidden_layers: 2,
        hidden_dim: 64,
        seed: 53,
        ..Default::default()
    };

    // DPR
    let t0 = Instant::now();
    let (dpr, _) = train_dpr(&prefs, &cfg).unwrap();
    let mut rng = Rng::new(54);
    let pos: Vec<f64> = pos_held.iter().map(|x| dpr.elbo_score(x, &mut rng).unwrap()).collect();
    let neg: Vec<f64> = neg_held.iter().map(|x| dpr.elbo_score(x, &mut rng).unwrap()).collect();
    let dpr_auc = auc(&pos, &neg);
    let rewards: Vec<f64> = pos_held
        .iter()
        .chain(neg_held.iter())
        .map(|x| dpr.reward(x, &mut rng).unwrap())
        .collect();
    let membership: Vec<f64> = (0..pos_held.len())
        .map(|_| 1.0)
        .chain((0..neg_held.len()).map(|_| 0.0))
        .collect();
    let dpr_rho = spearman(&rewards, &membership);
    let dpr_secs = t0.elapsed().as_secs_f64();
    assert!(dpr_auc >= 0.9, "DPR step-score AUC {dpr_auc:.3}");
    assert!(dpr_rho >= 0.5, "DPR reward Spearman {dpr_rho:.3}");
    assert!(dpr_secs < 180.0, "DPR took {dpr_secs:.0}s");

    // C-DPR, same thresholds
    let t0 = Instant::now();
    let (cdpr, _) = train_cdpr(&prefs, &cfg).unwrap();
    let mut rng = Rng::new(55);
    let pos: Vec<f64> = pos_held
        .iter()
        .map(|x| cdpr.conditional_prob(x, &mut rng).unwrap())
        .collect();
    let neg: Vec<f64> = neg_held
        .iter()
        .map(|x| cdpr.conditional_prob(x, &mut rng).unwrap())
        .collect();
    let cdpr_auc = auc(&pos, &neg);
    let rewards: Vec<f64> = pos_held
        .iter()
        .chain(neg_held.iter())
        .map(|x| cdpr.reward(x, &mut rng).unwrap())
        .collect();
    let cdpr_rho = spearman(&rewards, &membership);
    let cdpr_secs = t0.elapsed().as_secs_f64();
    assert!(cdpr_auc >= 0.9, "C-DPR step-score AUC {cdpr_auc:.3}");
    assert!(cdpr_rho >= 0.5, "C-DPR reward Spearman {cdpr_rho:.3}");
    assert!(cdpr_secs < 180.0, "C-DPR took {cdpr_secs:.0}s");

    println!(
        "[criterion 5] PASS: logistic oracle AUC {lr_auc:.3}; DPR auc {dpr_auc:.3} rho {dpr_rho:.3} ({dpr_secs:.0}s); C-DPR auc {cdpr_auc:.3} rho {cdpr_rho:.3} ({cdpr_secs:.0}s)"
    );
}

#[test]
fn criterion_6_and_7_end_to_end_with_baseline_parity() {
    let dir = test_dir("crit6");
    let mut cfg = acceptance_config(&dir);
    cfg.pipeline.methods = vec![Method::Dpr, Method::Bt];
    let reports = commands::cmd_pipeline(&cfg).unwrap();
    assert_eq!(reports.len(), 2);
    let dpr_score = reports[0].report.mean;
    let bt_score = reports[1].report.mean;

    // timed portion: the DPR chain (reward training -> annotation ->
    // TD3+BC -> evaluation), from the manifest's stage timings
    let paths = RunPaths::new(&dir);
    let manifest: commands::Manifest =
        serde_json::from_str(&fs::read_to_string(paths.manifest()).unwrap()).unwrap();
    let chain: f64 = ["train_reward_dpr", "annotate_dpr", "train_policy_dpr", "evaluate_dpr"]
        .iter()
        .map(|k| {
            manifest
                .timings_sec
                .get(*k)
                .copied()
                .unwrap_or_else(|| panic!("manifest lost the timing for stage {k}"))
        })
        .sum();
    assert!(chain > 0.0 && chain < 900.0, "dpr chain took {chain:.0}s (>= 15 min)");

    let oracle_floor = 0.6 * ORACLE_REWARD_TD3BC_SCORE;
    assert!(
        dpr_score >= oracle_floor,
        "dpr score {dpr_score:.2} below 60% of the oracle baseline ({oracle_floor:.2})"
    );
    assert!(
        dpr_score > CONSTANT_REWARD_TD3BC_SCORE,
        "dpr score {dpr_score:.2} does not beat the constant-reward control ({CONSTANT_REWARD_TD3BC_SCORE:.2})"
    );
    println!(
        "[criterion 6] PASS: dpr {dpr_score:.2} >= 0.6 * oracle {ORACLE_REWARD_TD3BC_SCORE:.2} = {oracle_floor:.2}, > constant control {CONSTANT_REWARD_TD3BC_SCORE:.2}; dpr chain {chain:.0}s < 900s"
    );

    // criterion 7: same pipeline with the Bradley-Terry baseline produced a
    // comparison table; the DPR >= BT relation is reported, not gated
    let csv = fs::read_to_string(paths.comparison_csv()).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "method,score_mean,score_std");
    assert_eq!(rows.len() - 1, 2, "{csv}");
    assert!(rows[1].starts_with("dpr,") && rows[2].starts_with("bt,"), "{csv}");
    println!(
        "[criterion 7] PASS: comparison table written (dpr {dpr_score:.2}, bt {bt_score:.2}); soft report: dpr - bt = {:+.2}",
        dpr_score - bt_score
    );
}

#[test]
fn criterion_8_pipeline_determinism() {
    let mk_cfg = |dir: &Path| {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 81;
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
        cfg.rl.steps = 150;
        cfg.rl.batch_size = 32;
        cfg.rl.hidden_layers = 1;
        cfg.rl.hidden_dim = 12;
        cfg.rl.eval_interval = 50;
        cfg.rl.eval_episodes = 2;
        cfg.rl.eval_seeds = 2;
        cfg.pipeline.methods = vec![Method::Dpr, Method::Cdpr, Method::Bt, Method::Oracle];
        cfg
    };
    let (dir_a, dir_b) = (test_dir("det-a"), test_dir("det-b"));
    commands::cmd_pipeline(&mk_cfg(&dir_a)).unwrap();
    commands::cmd_pipeline(&mk_cfg(&dir_b)).unwrap();

    let files = |root: &Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().unwrap() != "manifest.json" {
                    // the manifest holds wall-clock timings; every other
                    // artifact must be byte-identical
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    };
    let (fa, fb) = (files(&dir_a), files(&dir_b));
    assert_eq!(fa, fb, "different artifact sets");
    let mut n_bytes = 0usize;
    for rel in &fa {
        let a = fs::read(dir_a.join(rel)).unwrap();
        let b = fs::read(dir_b.join(rel)).unwrap();
        assert_eq!(a, b, "stage artifact {} differs between runs", rel.display());
        n_bytes += a.len();
    }
    println!(
        "[criterion 8] PASS: {} artifacts ({} bytes) byte-identical across two seeded runs of every stage and all four methods",
        fa.len(),
        n_bytes
    );
}

#[test]
fn criterion_9_trajectory_jensen_bound_on_trained_models() {
    let prefs = separable_pairs(60, 91);
    let cfg = RewardTrainConfig {
        epochs: 40,
        batch_size: 32,
        hidden_layers: 1,
        hidden_dim: 32,
        seed: 92,
        ..Default::default()
    };
    let (dpr, _) = train_dpr(&prefs, &cfg).unwrap();
    let (cdpr, _) = train_cdpr(&prefs, &cfg).unwrap();

    let mut rng = Rng::new(93);
    let mut checked = 0;
    for i in 0..100 {
        let h = rng.below(8) + 1;
        let mean = if i % 2 == 0 { 1.0 } else { -1.0 };
        let rows: Vec<Vec<f64>> = (0..h).map(|_| gaussian_step(&mut rng, mean)).collect();
        let seg = Segment {
            traj_id: 0,
            start: 0,
            states: rows.iter().map(|r| r[..2].to_vec()).collect(),
            actions: rows.iter().map(|r| r[2..].to_vec()).collect(),
        };
        for scores in [
            dpr.step_scores(&seg, &mut rng).unwrap(),
            cdpr.step_scores(&seg, &mut rng).unwrap(),
        ] {
            let mean_score = scores.iter().sum::<f64>() / scores.len() as f64;
            let mean_log = scores.iter().map(|s| s.ln()).sum::<f64>() / scores.len() as f64;
            assert!(
                mean_score.ln() >= mean_log - 1e-12,
                "jensen bound violated: log mean {} vs mean log {}",
                mean_score.ln(),
                mean_log
            );
            checked += 1;
        }
    }
    println!(
        "[criterion 9] PASS: log(trajectory score) >= mean step log-score on {checked} trained-model segment evaluations"
    );
}

/// Recomputes the criterion-6 baseline scores (oracle-reward and
/// constant-reward TD3+BC) on the acceptance configuration. Run with
/// `cargo test -p dpr-cli --test acceptance -- --ignored --nocapture` and
/// update the constants at the top of this file if the configuration
/// changes.
#[test]
#[ignore]
fn criterion6_baselines_recompute() {
    let dir = test_dir("crit6-baselines");
    let cfg = acceptance_config(&dir);
    commands::cmd_gen_data(&cfg).unwrap();
    let paths = RunPaths::new(&dir);
    let truth = dataio::load_dataset(paths.truth()).unwrap();
    let anchors = truth.meta.anchors.unwrap();
    let env = PointMassEnv::new(cfg.env.dt, cfg.env.horizon, cfg.rl.gamma);
    let rl_cfg = cfg.rl.rl_config(stage_seed(cfg.seed, commands::STAGE_POLICY));
    let eval_seed = stage_seed(cfg.seed, commands::STAGE_EVAL);

    let replay = ReplayData::from_dataset(&truth).unwrap();
    let (actor, _) =
        train_td3bc(&replay, env.action_low(), env.action_high(), &rl_cfg, None).unwrap();
    let oracle = evaluate_protocol(&actor, &env, &anchors, cfg.rl.eval_seeds, cfg.rl.eval_episodes, eval_seed)
        .unwrap();

    let mut constant = truth.clone();
    for traj in &mut constant.trajectories {
        for tr in &mut traj.transitions {
            tr.reward = Some(1.0);
        }
    }
    let replay = ReplayData::from_dataset(&constant).unwrap();
    let (actor, _) =
        train_td3bc(&replay, env.action_low(), env.action_high(), &rl_cfg, None).unwrap();
    let constant = evaluate_protocol(&actor, &env, &anchors, cfg.rl.eval_seeds, cfg.rl.eval_episodes, eval_seed)
        .unwrap();

    println!(
        "baselines: ORACLE_REWARD_TD3BC_SCORE = {:.2}; CONSTANT_REWARD_TD3BC_SCORE = {:.2}",
        oracle.mean, constant.mean
    );
}
