//! Preference-supervised training of the diffusion reward models.
//!
//! Each gradient step draws one (t, eps) pair per step-sample, scores every
//! step of the preferred segments with the ELBO exponential (or the two-way
//! conditional softmax) and minimizes the negated preference cross-entropy.
//! Inference sweeps all timesteps instead; the stochastic single-draw
//! estimate is only used under SGD.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, norm_stats_from_pairs, CdprModel, DenoiserNet, DprModel, NoiseSchedule,
    NormStats, DEFAULT_P_MIN,
};
use crate::error::{CoreError, Result};
use crate::prefdata::{LabeledPrefDataset, PreferencePair};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, AdamConfig, AdamState, Rng};

/// Hyperparameters for reward-model training (shared by DPR, C-DPR and the
/// Bradley-Terry baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Total diffusion timesteps T.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub t_embed_dim: usize,
    /// Condition embedding width (C-DPR only).
    pub cond_dim: usize,
    /// eps-draws per timestep at inference.
    pub mc_samples: usize,
    /// Probability clamp applied before logs.
    pub p_min: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            epochs: 500,
            batch_size: 256,
            lr: 3e-4,
            timesteps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden_layers: 4,
            hidden_dim: 128,
            activation: Activation::Tanh,
            t_embed_dim: 8,
            cond_dim: 10,
            mc_samples: 4,
            p_min: DEFAULT_P_MIN,
            seed: 0,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::config("epochs and batch_size must be >= 1".to_string()));
        }
        if self.timesteps == 0 || self.t_embed_dim == 0 || self.cond_dim == 0 {
            return Err(CoreError::config("timesteps and embedding dims must be >= 1".to_string()));
        }
        if self.mc_samples == 0 {
            return Err(CoreError::config("mc_samples must be >= 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(CoreError::config(format!("p_min {} not in (0, 0.5)", self.p_min)));
        }
        if self.hidden_layers == 0 || self.hidden_dim == 0 {
            return Err(CoreError::config("network needs at least one hidden layer".to_string()));
        }
        Ok(())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.hidden_dim; self.hidden_layers]
    }
}

/// One (t, eps) draw per row; rows are ordered preferred-then-non-preferred
/// across the whole batch.
#[derive(Debug, Clone)]
pub struct DprDraws {
    pub ts: Vec<usize>,
    pub eps: Vec<f64>,
    pub dim: usize,
}

/// C-DPR shares the draws across both conditions (paired estimator), so the
/// plan is identical.
pub type CdprDraws = DprDraws;

impl DprDraws {
    pub fn sample(n_rows: usize, dim: usize, t_max: usize, rng: &mut Rng) -> Self {
        let mut ts = Vec::with_capacity(n_rows);
        let mut eps = vec![0.0; n_rows * dim];
        for i in 0..n_rows {
            ts.push(rng.below(t_max) + 1);
            rng.fill_normal(&mut eps[i * dim..(i + 1) * dim]);
        }
        DprDraws { ts, eps, dim }
    }
}

/// Flattens a canonical batch into normalized rows: all preferred steps,
/// then all non-preferred steps. Returns (rows, rows_per_side, dim).
fn batch_rows(batch: &[&PreferencePair], norm: &NormStats) -> Result<(Vec<f64>, usize, usize)> {
    if batch.is_empty() {
        return Err(CoreError::data("empty preference batch".to_string()));
    }
    let h = batch[0].h();
    for (i, p) in batch.iter().enumerate() {
        if p.label != 1.0 {
            return Err(CoreError::data(format!(
                "batch pair {i} is not canonical (label {})",
                p.label
            )));
        }
        if p.h() != h {
            return Err(CoreError::data(format!(
                "batch pair {i} has H {} but the batch uses {h}",
                p.h()
            )));
        }
    }
    let dim = norm.dim();
    let side = batch.len() * h;
    let mut rows = Vec::with_capacity(2 * side * dim);
    for p in batch {
        for row in p.seg1.sa_rows() {
            rows.extend(norm.normalize(&row)?);
        }
    }
    for p in batch {
        for row in p.seg0.sa_rows() {
            rows.extend(norm.normalize(&row)?);
        }
    }
    Ok((rows, side, dim))
}

fn noisy_rows(rows: &[f64], dim: usize, draws: &DprDraws, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let n = rows.len() / dim;
    if draws.ts.len() != n || draws.eps.len() != rows.len() || draws.dim != dim {
        return Err(CoreError::shape(format!(
            "draw plan covers {} rows of {}, batch has {n} rows of {dim}",
            draws.ts.len(),
            draws.dim
        )));
    }
    let mut out = Vec::with_capacity(rows.len());
    for i in 0..n {
        out.extend(forward_noise(
            &rows[i * dim..(i + 1) * dim],
            draws.ts[i],
            &draws.eps[i * dim..(i + 1) * dim],
            schedule,
        )?);
    }
    Ok(out)
}

/// log D on preferred rows and log(1 - D) on the rest, D clamped into
/// [p_min, 1 - p_min]; the loss node is the negated mean of both terms.
fn preference_ce_loss(tape: &mut Tape, d_all: Var, side: usize, p_min: f64) -> Result<Var> {
    let dc = tape.clamp(d_all, p_min, 1.0 - p_min);
    let d_pref = tape.slice_rows(dc, 0, side)?;
    let d_rest = tape.slice_rows(dc, side, side)?;
    let log_pref = tape.log(d_pref);
    let term1 = tape.mean_all(log_pref);
    let neg = tape.scale(d_rest, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_rest = tape.log(one_minus);
    let term0 = tape.mean_all(log_rest);
    let total = tape.add(term1, term0)?;
    Ok(tape.scale(total, -1.0))
}

fn dpr_tape(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &DprDraws,
) -> Result<(Tape, crate::diffusion::DenoiserVars, Var)> {
    let (rows, side, dim) = batch_rows(batch, norm)?;
    let noisy = noisy_rows(&rows, dim, draws, schedule)?;
    let n = 2 * side;
    let ts0: Vec<usize> = draws.ts.iter().map(|&t| t - 1).collect();

    let mut tape = Tape::new();
    let vars = den.register(&mut tape)?;
    let x = tape.leaf_raw(n, dim, noisy, false)?;
    let eps = tape.leaf_raw(n, dim, draws.eps.clone(), false)?;
    let pred = vars.forward(&mut tape, x, &ts0, None)?;
    let diff = tape.sub(pred, eps)?;
    let sq = tape.square(diff);
    let m = tape.row_sum(sq);
    let neg_m = tape.scale(m, -1.0);
    let d_all = tape.exp(neg_m);
    let loss = preference_ce_loss(&mut tape, d_all, side, p_min)?;
    Ok((tape, vars, loss))
}

fn cdpr_tape(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &CdprDraws,
) -> Result<(Tape, crate::diffusion::DenoiserVars, Var)> {
    let (rows, side, dim) = batch_rows(batch, norm)?;
    let noisy = noisy_rows(&rows, dim, draws, schedule)?;
    let n = 2 * side;
    let ts0: Vec<usize> = draws.ts.iter().map(|&t| t - 1).collect();
    let plus = vec![1usize; n];
    let minus = vec![0usize; n];

    let mut tape = Tape::new();
    let vars = den.register(&mut tape)?;
    let x = tape.leaf_raw(n, dim, noisy, false)?;
    let eps = tape.leaf_raw(n, dim, draws.eps.clone(), false)?;
    // same noisy input and targets under both conditions
    let err_under = |tape: &mut Tape, conds: &[usize]| -> Result<Var> {
        let pred = vars.forward(tape, x, &ts0, Some(conds))?;
        let diff = tape.sub(pred, eps)?;
        let sq = tape.square(diff);
        Ok(tape.row_sum(sq))
    };
    let m_plus = err_under(&mut tape, &plus)?;
    let m_minus = err_under(&mut tape, &minus)?;
    let z = tape.sub(m_minus, m_plus)?;
    let p = tape.sigmoid(z);
    let loss = preference_ce_loss(&mut tape, p, side, p_min)?;
    Ok((tape, vars, loss))
}

/// DPR preference loss for a frozen draw plan (used by training and by
/// finite-difference oracles).
pub fn dpr_loss_with_draws(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &DprDraws,
) -> Result<f64> {
    let (tape, _, loss) = dpr_tape(den, schedule, norm, p_min, batch, draws)?;
    tape.scalar_value(loss)
}

pub fn cdpr_loss_with_draws(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &CdprDraws,
) -> Result<f64> {
    let (tape, _, loss) = cdpr_tape(den, schedule, norm, p_min, batch, draws)?;
    tape.scalar_value(loss)
}

/// Loss value and analytic parameter gradients (in `DenoiserNet::tensors`
/// order) for a frozen draw plan.
pub fn dpr_loss_grads(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &DprDraws,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut tape, vars, loss) = dpr_tape(den, schedule, norm, p_min, batch, draws)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    Ok((
        loss_val,
        vars.vars().iter().map(|&v| grads.wrt(v).to_vec()).collect(),
    ))
}

pub fn cdpr_loss_grads(
    den: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
    draws: &CdprDraws,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut tape, vars, loss) = cdpr_tape(den, schedule, norm, p_min, batch, draws)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    Ok((
        loss_val,
        vars.vars().iter().map(|&v| grads.wrt(v).to_vec()).collect(),
    ))
}

/// DPR preference loss with fresh (t, eps) draws from `rng`.
pub fn dpr_loss(model: &DprModel, batch: &[PreferencePair], rng: &mut Rng) -> Result<f64> {
    let refs: Vec<&PreferencePair> = batch.iter().collect();
    if refs.is_empty() {
        return Err(CoreError::data("empty preference batch".to_string()));
    }
    let n_rows = 2 * refs.len() * refs[0].h();
    let draws = DprDraws::sample(n_rows, model.data_dim(), model.schedule.t_max(), rng);
    dpr_loss_with_draws(
        &model.denoiser,
        &model.schedule,
        &model.norm,
        model.p_min,
        &refs,
        &draws,
    )
}

pub fn cdpr_loss(model: &CdprModel, batch: &[PreferencePair], rng: &mut Rng) -> Result<f64> {
    let refs: Vec<&PreferencePair> = batch.iter().collect();
    if refs.is_empty() {
        return Err(CoreError::data("empty preference batch".to_string()));
    }
    let n_rows = 2 * refs.len() * refs[0].h();
    let draws = CdprDraws::sample(n_rows, model.data_dim(), model.schedule.t_max(), rng);
    cdpr_loss_with_draws(
        &model.denoiser,
        &model.schedule,
        &model.norm,
        model.p_min,
        &refs,
        &draws,
    )
}

fn run_training(
    pairs: &LabeledPrefDataset,
    cfg: &RewardTrainConfig,
    conditional: bool,
) -> Result<(DenoiserNet, NoiseSchedule, NormStats, Vec<f64>)> {
    cfg.validate()?;
    let norm = norm_stats_from_pairs(pairs)?;
    let schedule = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let dim = pairs.state_dim() + pairs.action_dim();
    let mut rng = Rng::with_stream(cfg.seed, 0x7261_696e); // "rain" = reward training
    let mut den = DenoiserNet::new(
        dim,
        cfg.timesteps,
        cfg.t_embed_dim,
        conditional.then_some(cfg.cond_dim),
        cfg.hidden_dims(),
        cfg.activation,
        &mut rng,
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &den.tensors());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs.pairs[i]).collect();
            let n_rows = 2 * batch.len() * pairs.h;
            let draws = DprDraws::sample(n_rows, dim, cfg.timesteps, &mut rng);
            let (mut tape, vars, loss) = if conditional {
                cdpr_tape(&den, &schedule, &norm, cfg.p_min, &batch, &draws)?
            } else {
                dpr_tape(&den, &schedule, &norm, cfg.p_min, &batch, &draws)?
            };
            let loss_val = tape.scalar_value(loss)?;
            let grads = tape
                .backward(loss)
                .map_err(|e| CoreError::train(format!("epoch {epoch}, batch {bi}: {e}")))?;
            let grad_slices: Vec<&[f64]> = vars.vars().iter().map(|&v| grads.wrt(v)).collect();
            adam.step(&mut den.tensors_mut(), &grad_slices)
                .map_err(|e| CoreError::train(format!("epoch {epoch}, batch {bi}: {e}")))?;
            epoch_loss += loss_val * chunk.len() as f64;
        }
        curve.push(epoch_loss / pairs.len() as f64);
    }
    Ok((den, schedule, norm, curve))
}

/// Trains an unconditional diffusion reward model; returns the model and the
/// per-epoch loss curve.
pub fn train_dpr(pairs: &LabeledPrefDataset, cfg: &RewardTrainConfig) -> Result<(DprModel, Vec<f64>)> {
    let (den, schedule, norm, curve) = run_training(pairs, cfg, false)?;
    Ok((
        DprModel::new(den, schedule, norm, cfg.mc_samples, cfg.p_min)?,
        curve,
    ))
}

/// Trains the conditional variant.
pub fn train_cdpr(pairs: &LabeledPrefDataset, cfg: &RewardTrainConfig) -> Result<(CdprModel, Vec<f64>)> {
    let (den, schedule, norm, curve) = run_training(pairs, cfg, true)?;
    Ok((
        CdprModel::new(den, schedule, norm, cfg.mc_samples, cfg.p_min)?,
        curve,
    ))
}
