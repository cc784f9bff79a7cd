//! Diffusion classifiers over (state, action) pairs and the step-wise
//! rewards derived from them.
//!
//! A small MLP denoiser is trained to predict the Gaussian noise injected by
//! the DDPM forward process. Its exponentiated negative denoising error
//! `exp(-E||eps - eps_hat||^2)` acts as an unnormalized likelihood: trained
//! on preference pairs it scores preferred steps high (DPR), and with a
//! learned condition embedding a two-way Bayes posterior over the preference
//! label gives a calibrated step probability (C-DPR). Rewards average the
//! per-timestep log-odds over the full schedule.

pub mod train;

pub use train::{
    cdpr_loss, cdpr_loss_grads, cdpr_loss_with_draws, dpr_loss, dpr_loss_grads,
    dpr_loss_with_draws, train_cdpr, train_dpr, CdprDraws, DprDraws, RewardTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::prefdata::{LabeledPrefDataset, Segment};
use crate::tensor::tape::{stable_sigmoid, Tape, Var};
use crate::tensor::{Activation, MlpConfig, MlpParams, Rng, Tensor};

/// Per-timestep betas and their cumulative products for the DDPM forward
/// process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    bar_alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(CoreError::config("schedule needs T >= 1".to_string()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::config(format!(
                "invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut bar_alphas = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            bar_alphas.push(prod);
        }
        let s = NoiseSchedule {
            betas,
            alphas,
            bar_alphas,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Beta at 1-based timestep `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to 1-based `t`.
    pub fn bar_alpha(&self, t: usize) -> f64 {
        self.bar_alphas[t - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty()
            || self.betas.len() != self.alphas.len()
            || self.betas.len() != self.bar_alphas.len()
        {
            return Err(CoreError::config("schedule arrays inconsistent".to_string()));
        }
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(CoreError::config(format!("beta_{} = {b} out of (0,1)", i + 1)));
            }
            if (self.alphas[i] - (1.0 - b)).abs() > 1e-15 {
                return Err(CoreError::config("alpha != 1 - beta".to_string()));
            }
        }
        let mut prev = 1.0;
        for (i, &ab) in self.bar_alphas.iter().enumerate() {
            if !(ab > 0.0 && ab < 1.0 && ab < prev) {
                return Err(CoreError::config(format!(
                    "bar_alpha_{} = {ab} is not strictly decreasing in (0,1)",
                    i + 1
                )));
            }
            prev = ab;
        }
        Ok(())
    }
}

/// `sqrt(bar_alpha_t) * x0 + sqrt(1 - bar_alpha_t) * eps` for one row.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t < 1 || t > schedule.t_max() {
        return Err(CoreError::config(format!(
            "timestep {t} out of range 1..={}",
            schedule.t_max()
        )));
    }
    if x0.len() != eps.len() {
        return Err(CoreError::shape(format!(
            "forward_noise: x0 has {} dims, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.bar_alpha(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps.iter())
        .map(|(&x, &e)| sa * x + sb * e)
        .collect())
}

/// Noise-prediction network: an MLP over the concatenation of the noisy
/// (state, action) row, a learned per-timestep embedding, and (when
/// conditional) a learned embedding of the preference label c in {0, 1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub mlp: MlpParams,
    /// [T, t_embed_dim] learned timestep table.
    pub t_embed: Tensor,
    /// [2, cond_dim] learned condition table, present iff conditional.
    pub cond_embed: Option<Tensor>,
    pub data_dim: usize,
}

impl DenoiserNet {
    /// Initializes the MLP (fan-in uniform) and the embedding tables
    /// (uniform in [-0.5, 0.5]), in that order, from `rng`.
    pub fn new(
        data_dim: usize,
        t_max: usize,
        t_embed_dim: usize,
        cond_dim: Option<usize>,
        hidden_dims: Vec<usize>,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if data_dim == 0 || t_embed_dim == 0 {
            return Err(CoreError::config("denoiser dims must be positive".to_string()));
        }
        if let Some(cd) = cond_dim {
            if cd == 0 {
                return Err(CoreError::config("condition dim must be positive".to_string()));
            }
        }
        let input_dim = data_dim + t_embed_dim + cond_dim.unwrap_or(0);
        let mut config = MlpConfig::new(input_dim, hidden_dims, data_dim);
        config.activation = activation;
        let mlp = MlpParams::init(config, rng)?;
        let emb = |rows: usize, cols: usize, rng: &mut Rng| Tensor {
            shape: vec![rows, cols],
            data: (0..rows * cols).map(|_| rng.range_f64(-0.5, 0.5)).collect(),
        };
        let t_embed = emb(t_max, t_embed_dim, rng);
        let cond_embed = cond_dim.map(|cd| emb(2, cd, rng));
        Ok(DenoiserNet {
            mlp,
            t_embed,
            cond_embed,
            data_dim,
        })
    }

    pub fn conditional(&self) -> bool {
        self.cond_embed.is_some()
    }

    pub fn t_max(&self) -> usize {
        self.t_embed.shape[0]
    }

    fn t_embed_dim(&self) -> usize {
        self.t_embed.shape[1]
    }

    /// Predicted noise for `n` noisy rows with 1-based timesteps `ts` and,
    /// for conditional nets, per-row labels `conds` in {0, 1}.
    pub fn forward(
        &self,
        noisy: &[f64],
        n: usize,
        ts: &[usize],
        conds: Option<&[usize]>,
    ) -> Result<Vec<f64>> {
        let d = self.data_dim;
        if noisy.len() != n * d {
            return Err(CoreError::shape(format!(
                "denoiser forward: {} values for {n} rows of {d}",
                noisy.len()
            )));
        }
        if ts.len() != n {
            return Err(CoreError::shape("denoiser forward: one timestep per row".to_string()));
        }
        match (self.conditional(), conds) {
            (true, None) => {
                return Err(CoreError::shape(
                    "conditional denoiser called without condition labels".to_string(),
                ))
            }
            (false, Some(_)) => {
                return Err(CoreError::shape(
                    "unconditional denoiser called with condition labels".to_string(),
                ))
            }
            _ => {}
        }
        let te = self.t_embed_dim();
        let ce = self.cond_embed.as_ref().map(|c| c.shape[1]).unwrap_or(0);
        let in_dim = d + te + ce;
        let mut input = Vec::with_capacity(n * in_dim);
        for i in 0..n {
            let t = ts[i];
            if t < 1 || t > self.t_max() {
                return Err(CoreError::config(format!(
                    "timestep {t} out of range 1..={}",
                    self.t_max()
                )));
            }
            input.extend_from_slice(&noisy[i * d..(i + 1) * d]);
            input.extend_from_slice(&self.t_embed.data[(t - 1) * te..t * te]);
            if let (Some(table), Some(cs)) = (&self.cond_embed, conds) {
                let c = cs[i];
                if c > 1 {
                    return Err(CoreError::config(format!("condition label {c} not in {{0,1}}")));
                }
                input.extend_from_slice(&table.data[c * ce..(c + 1) * ce]);
            }
        }
        let out = self.mlp.forward(&Tensor {
            shape: vec![n, in_dim],
            data: input,
        })?;
        Ok(out.data)
    }

    /// Registers MLP weights and embedding tables as trainable tape leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<DenoiserVars> {
        let mlp = self.mlp.register(tape)?;
        let t_embed = tape.leaf(&self.t_embed, true)?;
        let cond_embed = match &self.cond_embed {
            Some(c) => Some(tape.leaf(c, true)?),
            None => None,
        };
        Ok(DenoiserVars {
            mlp,
            t_embed,
            cond_embed,
        })
    }

    /// Parameter tensors in registration order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.mlp.tensors_mut();
        v.push(&mut self.t_embed);
        if let Some(c) = &mut self.cond_embed {
            v.push(c);
        }
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.mlp.tensors();
        v.push(&self.t_embed);
        if let Some(c) = &self.cond_embed {
            v.push(c);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.mlp.to_flat();
        out.extend_from_slice(&self.t_embed.data);
        if let Some(c) = &self.cond_embed {
            out.extend_from_slice(&c.data);
        }
        out
    }

    /// A copy of `self` with parameters replaced by `flat` (layout of
    /// `to_flat`). Used by finite-difference oracles.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(CoreError::shape(format!(
                "flat vector has {} entries, denoiser needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mlp_n = out.mlp.param_count();
        out.mlp = MlpParams::from_flat(out.mlp.config.clone(), &flat[..mlp_n])?;
        let mut off = mlp_n;
        let tn = out.t_embed.numel();
        out.t_embed.data.copy_from_slice(&flat[off..off + tn]);
        off += tn;
        if let Some(c) = &mut out.cond_embed {
            let cn = c.numel();
            c.data.copy_from_slice(&flat[off..off + cn]);
        }
        Ok(out)
    }
}

/// Tape handles for a registered denoiser.
pub struct DenoiserVars {
    pub mlp: crate::tensor::mlp::MlpVars,
    pub t_embed: Var,
    pub cond_embed: Option<Var>,
}

impl DenoiserVars {
    /// Tape forward over constant noisy rows: gathers embeddings (so their
    /// gradients flow into the tables), concatenates and runs the MLP.
    pub fn forward(
        &self,
        tape: &mut Tape,
        noisy: Var,
        ts0: &[usize],
        conds: Option<&[usize]>,
    ) -> Result<Var> {
        let temb = tape.gather_rows(self.t_embed, ts0)?;
        let input = match (self.cond_embed, conds) {
            (Some(table), Some(cs)) => {
                let cemb = tape.gather_rows(table, cs)?;
                tape.concat_cols(&[noisy, temb, cemb])?
            }
            (None, None) => tape.concat_cols(&[noisy, temb])?,
            _ => {
                return Err(CoreError::shape(
                    "condition labels do not match the denoiser's conditionality".to_string(),
                ))
            }
        };
        self.mlp.forward(tape, input)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.push(self.t_embed);
        if let Some(c) = self.cond_embed {
            v.push(c);
        }
        v
    }
}

/// Per-dimension standardization of (state ++ action) rows, computed from
/// the preference data and applied at train and inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std per dimension, with the std floored at 1e-8 so
    /// constant dimensions stay finite.
    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Result<Self> {
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for row in rows.clone() {
            if row.len() != dim {
                return Err(CoreError::shape(format!(
                    "normalization row of {} dims, expected {dim}",
                    row.len()
                )));
            }
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(CoreError::data("no rows for normalization stats".to_string()));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((v, &x), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = x - m;
                *v += d * d;
            }
        }
        let std: Vec<f64> = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(1e-8))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(CoreError::shape(format!(
                "input has {} dims, model expects {}",
                row.len(),
                self.dim()
            )));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect())
    }
}

/// Both directions of the two-way ELBO softmax, computed stably from the
/// denoising errors: p_plus = sigma(m_minus - m_plus).
pub fn two_way_softmax(m_plus: f64, m_minus: f64) -> (f64, f64) {
    (
        stable_sigmoid(m_minus - m_plus),
        stable_sigmoid(m_plus - m_minus),
    )
}

/// `-(1/T) * sum_t log(1 - p_t)` with each step probability clamped into
/// [p_min, 1 - p_min]. Strictly positive and bounded by -log(p_min).
pub fn reward_from_step_probs(probs: &[f64], p_min: f64) -> f64 {
    let t = probs.len() as f64;
    -probs
        .iter()
        .map(|&p| (1.0 - p.clamp(p_min, 1.0 - p_min)).ln())
        .sum::<f64>()
        / t
}

pub const DEFAULT_P_MIN: f64 = 1e-6;

/// Unconditional diffusion reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DprModel {
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub mc_samples: usize,
    pub p_min: f64,
}

/// Conditional diffusion reward model; the condition set is exactly
/// {c- = 0, c+ = 1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdprModel {
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub mc_samples: usize,
    pub p_min: f64,
}

fn validate_model(
    denoiser: &DenoiserNet,
    schedule: &NoiseSchedule,
    norm: &NormStats,
    mc_samples: usize,
    conditional: bool,
) -> Result<()> {
    if denoiser.conditional() != conditional {
        return Err(CoreError::config(format!(
            "denoiser conditionality {} does not match model kind",
            denoiser.conditional()
        )));
    }
    if denoiser.t_max() != schedule.t_max() {
        return Err(CoreError::config(format!(
            "timestep table has {} rows, schedule has T = {}",
            denoiser.t_max(),
            schedule.t_max()
        )));
    }
    if norm.dim() != denoiser.data_dim {
        return Err(CoreError::shape(format!(
            "normalization over {} dims, denoiser over {}",
            norm.dim(),
            denoiser.data_dim
        )));
    }
    if mc_samples == 0 {
        return Err(CoreError::config("mc_samples must be >= 1".to_string()));
    }
    for v in norm.mean.iter().chain(norm.std.iter()) {
        if !v.is_finite() {
            return Err(CoreError::data("non-finite normalization stats".to_string()));
        }
    }
    schedule.validate()
}

/// Mean squared denoising error per draw: t ~ U{1..T}, eps ~ N(0, I),
/// averaged over `mc` draws. Scores derive from this.
fn mc_denoise_error(
    denoiser: &DenoiserNet,
    schedule: &NoiseSchedule,
    x0: &[f64],
    mc: usize,
    cond: Option<usize>,
    rng: &mut Rng,
) -> Result<f64> {
    let d = x0.len();
    let mut acc = 0.0;
    let mut eps = vec![0.0; d];
    for _ in 0..mc {
        let t = rng.below(schedule.t_max()) + 1;
        rng.fill_normal(&mut eps);
        let noisy = forward_noise(x0, t, &eps, schedule)?;
        let pred = denoiser.forward(&noisy, 1, &[t], cond.as_ref().map(std::slice::from_ref))?;
        acc += eps
            .iter()
            .zip(pred.iter())
            .map(|(e, p)| (e - p) * (e - p))
            .sum::<f64>();
    }
    Ok(acc / mc as f64)
}

/// Squared denoising error at a fixed timestep, averaged over `mc`
/// eps-draws. `conds` requests the same draws evaluated under each listed
/// condition (the paired estimator); the result has one error per condition.
fn fixed_t_errors(
    denoiser: &DenoiserNet,
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    mc: usize,
    conds: &[Option<usize>],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let d = x0.len();
    let mut acc = vec![0.0; conds.len()];
    let mut eps = vec![0.0; d];
    for _ in 0..mc {
        rng.fill_normal(&mut eps);
        let noisy = forward_noise(x0, t, &eps, schedule)?;
        for (a, cond) in acc.iter_mut().zip(conds.iter()) {
            let pred = denoiser.forward(&noisy, 1, &[t], cond.as_ref().map(std::slice::from_ref))?;
            *a += eps
                .iter()
                .zip(pred.iter())
                .map(|(e, p)| (e - p) * (e - p))
                .sum::<f64>();
        }
    }
    acc.iter_mut().for_each(|a| *a /= mc as f64);
    Ok(acc)
}

impl DprModel {
    pub fn new(
        denoiser: DenoiserNet,
        schedule: NoiseSchedule,
        norm: NormStats,
        mc_samples: usize,
        p_min: f64,
    ) -> Result<Self> {
        validate_model(&denoiser, &schedule, &norm, mc_samples, false)?;
        Ok(DprModel {
            denoiser,
            schedule,
            norm,
            mc_samples,
            p_min,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.denoiser.data_dim
    }

    pub fn validate(&self) -> Result<()> {
        validate_model(&self.denoiser, &self.schedule, &self.norm, self.mc_samples, false)
    }

    /// ELBO score in (0, 1]: exp of minus the Monte-Carlo mean denoising
    /// error over (t, eps) draws. Deterministic given the rng.
    pub fn elbo_score(&self, sa: &[f64], rng: &mut Rng) -> Result<f64> {
        let x0 = self.norm.normalize(sa)?;
        let m = mc_denoise_error(&self.denoiser, &self.schedule, &x0, self.mc_samples, None, rng)?;
        Ok((-m).exp().max(f64::MIN_POSITIVE))
    }

    /// Unclamped per-timestep probabilities `exp(-mean_eps error)` for
    /// t = 1..=T, `mc_samples` eps-draws each.
    pub fn step_probs(&self, sa: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let x0 = self.norm.normalize(sa)?;
        (1..=self.schedule.t_max())
            .map(|t| {
                let m = fixed_t_errors(
                    &self.denoiser,
                    &self.schedule,
                    &x0,
                    t,
                    self.mc_samples,
                    &[None],
                    rng,
                )?;
                Ok((-m[0]).exp().max(f64::MIN_POSITIVE))
            })
            .collect()
    }

    /// Step-wise reward: average over all timesteps of -log(1 - p_t).
    pub fn reward(&self, sa: &[f64], rng: &mut Rng) -> Result<f64> {
        Ok(reward_from_step_probs(&self.step_probs(sa, rng)?, self.p_min))
    }

    pub fn step_scores(&self, seg: &Segment, rng: &mut Rng) -> Result<Vec<f64>> {
        seg.sa_rows()
            .iter()
            .map(|row| self.elbo_score(row, rng))
            .collect()
    }

    /// Mean of the per-step ELBO scores over a segment.
    pub fn trajectory_score(&self, seg: &Segment, rng: &mut Rng) -> Result<f64> {
        let scores = self.step_scores(seg, rng)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

impl CdprModel {
    pub fn new(
        denoiser: DenoiserNet,
        schedule: NoiseSchedule,
        norm: NormStats,
        mc_samples: usize,
        p_min: f64,
    ) -> Result<Self> {
        validate_model(&denoiser, &schedule, &norm, mc_samples, true)?;
        Ok(CdprModel {
            denoiser,
            schedule,
            norm,
            mc_samples,
            p_min,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.denoiser.data_dim
    }

    pub fn validate(&self) -> Result<()> {
        validate_model(&self.denoiser, &self.schedule, &self.norm, self.mc_samples, true)
    }

    /// (p(c+ | sa), p(c- | sa)) from the two conditional ELBOs, using the
    /// same (t, eps) draws for both conditions. Clamped into
    /// [p_min, 1 - p_min] so both ends stay open.
    pub fn conditional_prob_pair(&self, sa: &[f64], rng: &mut Rng) -> Result<(f64, f64)> {
        let x0 = self.norm.normalize(sa)?;
        let (mut m_plus, mut m_minus) = (0.0, 0.0);
        let mut eps = vec![0.0; x0.len()];
        for _ in 0..self.mc_samples {
            let t = rng.below(self.schedule.t_max()) + 1;
            rng.fill_normal(&mut eps);
            let noisy = forward_noise(&x0, t, &eps, &self.schedule)?;
            let err_of = |pred: &[f64]| {
                eps.iter()
                    .zip(pred.iter())
                    .map(|(e, p)| (e - p) * (e - p))
                    .sum::<f64>()
            };
            m_plus += err_of(&self.denoiser.forward(&noisy, 1, &[t], Some(&[1]))?);
            m_minus += err_of(&self.denoiser.forward(&noisy, 1, &[t], Some(&[0]))?);
        }
        m_plus /= self.mc_samples as f64;
        m_minus /= self.mc_samples as f64;
        let (p_plus, p_minus) = two_way_softmax(m_plus, m_minus);
        let lim = |p: f64| p.clamp(self.p_min, 1.0 - self.p_min);
        Ok((lim(p_plus), lim(p_minus)))
    }

    /// p(c+ | sa) in (0, 1).
    pub fn conditional_prob(&self, sa: &[f64], rng: &mut Rng) -> Result<f64> {
        Ok(self.conditional_prob_pair(sa, rng)?.0)
    }

    /// Per-timestep conditional probabilities (paired draws per t).
    pub fn step_probs(&self, sa: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let x0 = self.norm.normalize(sa)?;
        (1..=self.schedule.t_max())
            .map(|t| {
                let m = fixed_t_errors(
                    &self.denoiser,
                    &self.schedule,
                    &x0,
                    t,
                    self.mc_samples,
                    &[Some(1), Some(0)],
                    rng,
                )?;
                Ok(two_way_softmax(m[0], m[1]).0)
            })
            .collect()
    }

    pub fn reward(&self, sa: &[f64], rng: &mut Rng) -> Result<f64> {
        Ok(reward_from_step_probs(&self.step_probs(sa, rng)?, self.p_min))
    }

    pub fn step_scores(&self, seg: &Segment, rng: &mut Rng) -> Result<Vec<f64>> {
        seg.sa_rows()
            .iter()
            .map(|row| self.conditional_prob(row, rng))
            .collect()
    }

    /// Mean of the per-step conditional probabilities over a segment.
    pub fn trajectory_score(&self, seg: &Segment, rng: &mut Rng) -> Result<f64> {
        let scores = self.step_scores(seg, rng)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Normalization stats over every step of every segment in the pairs.
pub fn norm_stats_from_pairs(pairs: &LabeledPrefDataset) -> Result<NormStats> {
    let dim = pairs.state_dim() + pairs.action_dim();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * pairs.len() * pairs.h);
    for p in &pairs.pairs {
        rows.extend(p.seg1.sa_rows());
        rows.extend(p.seg0.sa_rows());
    }
    NormStats::from_rows(rows.iter().map(|r| r.as_slice()), dim)
}
