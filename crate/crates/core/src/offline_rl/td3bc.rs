//! TD3+BC: twin critics with clipped double-Q targets and target policy
//! smoothing, a delayed actor update, and a behavior-cloning regularizer
//! with the adaptive weight lambda = alpha / mean|Q|.

use crate::envs::{rollout, Environment};
use crate::error::{CoreError, Result};
use crate::offline_rl::{
    concat_sa, polyak_params, Actor, CriticPair, MetricsRow, ReplayData, RlConfig,
};
use crate::tensor::tape::{FusedAct, Tape};
use crate::tensor::{AdamConfig, AdamState, Rng};

pub(crate) struct Batch {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s2: Vec<f64>,
    pub nd: Vec<f64>,
    pub n: usize,
}

pub(crate) fn sample_batch(data: &ReplayData, batch: usize, rng: &mut Rng) -> Batch {
    let idx = data.sample_indices(batch, rng);
    Batch {
        s: ReplayData::gather_rows(&data.states, data.state_dim, &idx),
        a: ReplayData::gather_rows(&data.actions, data.action_dim, &idx),
        r: ReplayData::gather_scalars(&data.rewards, &idx),
        s2: ReplayData::gather_rows(&data.next_states, data.state_dim, &idx),
        nd: ReplayData::gather_scalars(&data.not_done, &idx),
        n: idx.len(),
    }
}

/// Smoothed target action: actor_target(s') plus clipped Gaussian noise,
/// clamped back into bounds. Noise scales with the action half-range.
fn smoothed_target_action(
    actor_target: &Actor,
    s2: &[f64],
    n: usize,
    cfg: &RlConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut a2 = actor_target.act_batch(s2, n)?;
    let (half, _) = actor_target.squash_scale();
    let ad = actor_target.action_dim();
    for row in a2.chunks_mut(ad) {
        for (j, v) in row.iter_mut().enumerate() {
            let scale = half[j];
            let noise = (cfg.policy_noise * scale * rng.normal())
                .clamp(-cfg.noise_clip * scale, cfg.noise_clip * scale);
            *v = (*v + noise).clamp(actor_target.act_lo[j], actor_target.act_hi[j]);
        }
    }
    Ok(a2)
}

/// TD3+BC adaptive trade-off: lambda = alpha / mean|q|.
pub fn bc_lambda(alpha: f64, q_values: &[f64]) -> f64 {
    let mean_abs = q_values.iter().map(|q| q.abs()).sum::<f64>() / q_values.len() as f64;
    alpha / mean_abs.max(1e-12)
}

/// Critic regression toward `y` for both critics on one tape; returns the
/// summed MSE loss and applies one Adam step.
fn critic_step(
    critics: &mut CriticPair,
    adam: &mut AdamState,
    sa: &[f64],
    y: &[f64],
    n: usize,
) -> Result<f64> {
    let in_dim = critics.q1.config.input_dim;
    let mut tape = Tape::new();
    let q1v = critics.q1.register(&mut tape)?;
    let q2v = critics.q2.register(&mut tape)?;
    let x = tape.leaf_raw(n, in_dim, sa.to_vec(), false)?;
    let target = tape.leaf_raw(n, 1, y.to_vec(), false)?;
    let mse = |tape: &mut Tape, vars: &crate::tensor::mlp::MlpVars| -> Result<crate::tensor::Var> {
        let q = vars.forward(tape, x)?;
        let d = tape.sub(q, target)?;
        let sq = tape.square(d);
        Ok(tape.mean_all(sq))
    };
    let l1 = mse(&mut tape, &q1v)?;
    let l2 = mse(&mut tape, &q2v)?;
    let loss = tape.add(l1, l2)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let vars: Vec<_> = q1v.vars().into_iter().chain(q2v.vars()).collect();
    let grad_slices: Vec<&[f64]> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let mut tensors = critics.q1.tensors_mut();
    tensors.extend(critics.q2.tensors_mut());
    adam.step(&mut tensors, &grad_slices)?;
    Ok(loss_val)
}

/// Policy loss -lambda * mean Q1(s, pi(s)) + mean |pi(s) - a|^2 on one tape;
/// the critic participates as a frozen constant.
fn actor_step(
    actor: &mut Actor,
    critics: &CriticPair,
    adam: &mut AdamState,
    batch: &Batch,
    sd: usize,
    cfg: &RlConfig,
) -> Result<f64> {
    let (half, center) = actor.squash_scale();
    let ad = actor.action_dim();
    let mut tape = Tape::new();
    let actor_vars = actor.mlp.register(&mut tape)?;
    // critic weights frozen: gradients flow through them to the action only
    let mut critic_vars = Vec::new();
    for layer in &critics.q1.layers {
        let w = tape.leaf(&layer.w, false)?;
        let b = tape.leaf(&layer.b, false)?;
        critic_vars.push((w, b));
    }
    let s = tape.leaf_raw(batch.n, sd, batch.s.clone(), false)?;
    let a_data = tape.leaf_raw(batch.n, ad, batch.a.clone(), false)?;

    let raw = actor_vars.forward(&mut tape, s)?;
    let squashed = tape.tanh(raw);
    let a_pi = tape.affine_cols(squashed, half, center)?;

    let sa = tape.concat_cols(&[s, a_pi])?;
    let mut cur = sa;
    let last = critic_vars.len() - 1;
    for (li, &(w, b)) in critic_vars.iter().enumerate() {
        let act = if li != last { FusedAct::Relu } else { FusedAct::None };
        cur = tape.linear(cur, w, b, act)?;
    }
    let q = cur;
    let lambda = bc_lambda(cfg.alpha, tape.value(q));
    let q_mean = tape.mean_all(q);
    let q_term = tape.scale(q_mean, -lambda);
    let diff = tape.sub(a_pi, a_data)?;
    let sq = tape.square(diff);
    let bc_term = tape.mean_all(sq);
    let loss = tape.add(q_term, bc_term)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let vars = actor_vars.vars();
    let grad_slices: Vec<&[f64]> = vars.iter().map(|&v| grads.wrt(v)).collect();
    adam.step(&mut actor.mlp.tensors_mut(), &grad_slices)?;
    Ok(loss_val)
}

/// Runs the TD3+BC loop on an annotated dataset and returns the greedy
/// actor plus per-interval metrics. `eval_env` enables periodic evaluation
/// rollouts (logged as raw returns) on an independent rng stream.
pub fn train_td3bc(
    data: &ReplayData,
    act_lo: &[f64],
    act_hi: &[f64],
    cfg: &RlConfig,
    eval_env: Option<&dyn Environment>,
) -> Result<(Actor, Vec<MetricsRow>)> {
    cfg.validate()?;
    if act_lo.len() != data.action_dim || act_hi.len() != data.action_dim {
        return Err(CoreError::shape(format!(
            "action bounds of dim {} for dataset actions of dim {}",
            act_lo.len(),
            data.action_dim
        )));
    }
    let (sd, ad) = (data.state_dim, data.action_dim);
    let mut rng = Rng::with_stream(cfg.seed, 0x7464_3362); // "td3b"
    let mut eval_rng = Rng::with_stream(cfg.seed, 0x6576_616c); // "eval"

    let mut actor = Actor::new(sd, cfg.hidden_dims(), act_lo.to_vec(), act_hi.to_vec(), &mut rng)?;
    let mut actor_target = actor.clone();
    let mut critics = CriticPair::new(sd + ad, cfg.hidden_dims(), &mut rng)?;
    let mut critic_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &{
        let mut t = critics.q1.tensors();
        t.extend(critics.q2.tensors());
        t
    });
    let mut actor_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &actor.mlp.tensors());

    let mut metrics = Vec::new();
    let mut last_actor_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch_size, &mut rng);

        // Bellman target with clipped double-Q and smoothed target actions.
        let a2 = smoothed_target_action(&actor_target, &batch.s2, batch.n, cfg, &mut rng)?;
        let sa2 = concat_sa(&batch.s2, &a2, batch.n, sd, ad);
        let qmin = critics.min_target(&sa2, batch.n)?;
        let y: Vec<f64> = batch
            .r
            .iter()
            .zip(batch.nd.iter())
            .zip(qmin.iter())
            .map(|((&r, &nd), &q)| r + cfg.gamma * nd * q)
            .collect();

        let sa = concat_sa(&batch.s, &batch.a, batch.n, sd, ad);
        let critic_loss = critic_step(&mut critics, &mut critic_adam, &sa, &y, batch.n)
            .map_err(|e| CoreError::train(format!("step {step}: {e}")))?;

        if step % cfg.policy_delay == 0 {
            last_actor_loss = actor_step(&mut actor, &critics, &mut actor_adam, &batch, sd, cfg)
                .map_err(|e| CoreError::train(format!("step {step}: {e}")))?;
            critics.polyak_update(cfg.polyak);
            polyak_params(&mut actor_target.mlp, &actor.mlp, cfg.polyak);
        }

        let at_interval = cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
        if at_interval || step + 1 == cfg.steps {
            let eval_return = match eval_env {
                Some(env) => Some(
                    rollout(env, &actor, &mut eval_rng, cfg.eval_episodes)?.mean,
                ),
                None => None,
            };
            metrics.push(MetricsRow {
                step: step + 1,
                critic_loss,
                actor_loss: last_actor_loss,
                eval_return,
            });
        }
    }
    Ok((actor, metrics))
}

/// Gradient of the policy loss for the actor on a fixed batch at fixed
/// parameters, exposed for the reward-scale invariance check.
pub fn policy_loss_actor_grad(
    actor: &Actor,
    critics: &CriticPair,
    states: &[f64],
    actions: &[f64],
    n: usize,
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let sd = actor.mlp.config.input_dim;
    let ad = actor.action_dim();
    let (half, center) = actor.squash_scale();
    let mut tape = Tape::new();
    let actor_vars = actor.mlp.register(&mut tape)?;
    let mut critic_vars = Vec::new();
    for layer in &critics.q1.layers {
        critic_vars.push((tape.leaf(&layer.w, false)?, tape.leaf(&layer.b, false)?));
    }
    let s = tape.leaf_raw(n, sd, states.to_vec(), false)?;
    let a_data = tape.leaf_raw(n, ad, actions.to_vec(), false)?;
    let raw = actor_vars.forward(&mut tape, s)?;
    let squashed = tape.tanh(raw);
    let a_pi = tape.affine_cols(squashed, half, center)?;
    let sa = tape.concat_cols(&[s, a_pi])?;
    let mut cur = sa;
    let last = critic_vars.len() - 1;
    for (li, &(w, b)) in critic_vars.iter().enumerate() {
        let act = if li != last { FusedAct::Relu } else { FusedAct::None };
        cur = tape.linear(cur, w, b, act)?;
    }
    let lambda = bc_lambda(alpha, tape.value(cur));
    let q_mean = tape.mean_all(cur);
    let q_term = tape.scale(q_mean, -lambda);
    let diff = tape.sub(a_pi, a_data)?;
    let sq = tape.square(diff);
    let bc = tape.mean_all(sq);
    let loss = tape.add(q_term, bc)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    Ok((
        loss_val,
        actor_vars.vars().iter().map(|&v| grads.wrt(v).to_vec()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_offline_dataset, PointMassEnv, Quality};

    fn tiny_cfg(steps: usize) -> RlConfig {
        RlConfig {
            steps,
            batch_size: 32,
            hidden_layers: 1,
            hidden_dim: 16,
            eval_interval: 0,
            seed: 3,
            ..Default::default()
        }
    }

    fn tiny_data() -> ReplayData {
        let env = PointMassEnv::with_horizon(20);
        let data =
            generate_offline_dataset(&env, Quality::Mixed, 10, 0, &mut Rng::new(7)).unwrap();
        ReplayData::from_dataset(&data.truth).unwrap()
    }

    #[test]
    fn smoke_run_completes_with_finite_losses() {
        let data = tiny_data();
        let (actor, metrics) =
            train_td3bc(&data, &[-1.0, -1.0], &[1.0, 1.0], &tiny_cfg(500), None).unwrap();
        assert!(!metrics.is_empty());
        for m in &metrics {
            assert!(m.critic_loss.is_finite());
            assert!(m.actor_loss.is_finite());
        }
        let a = actor.act_batch(&[0.5, -0.5, 0.0, 0.0], 1).unwrap();
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn identical_seeds_identical_actors_and_evals() {
        let data = tiny_data();
        let env = PointMassEnv::with_horizon(20);
        let cfg = tiny_cfg(120);
        let (a1, m1) =
            train_td3bc(&data, &[-1.0, -1.0], &[1.0, 1.0], &cfg, Some(&env)).unwrap();
        let (a2, m2) =
            train_td3bc(&data, &[-1.0, -1.0], &[1.0, 1.0], &cfg, Some(&env)).unwrap();
        assert_eq!(a1.mlp, a2.mlp);
        assert_eq!(m1, m2);
    }

    #[test]
    fn lambda_normalization_identity() {
        // alpha = lambda * mean|Q| exactly when mean|Q| is a power of two,
        // and within roundoff otherwise.
        let qs = vec![2.0, -2.0, 2.0, -2.0];
        let lambda = bc_lambda(2.5, &qs);
        assert_eq!(lambda * 2.0, 2.5);
        let qs = vec![1.7f64, -0.3, 2.9];
        let mean_abs = qs.iter().map(|q| q.abs()).sum::<f64>() / 3.0;
        let lambda = bc_lambda(2.5, &qs);
        assert!((lambda * mean_abs - 2.5).abs() < 1e-12);
    }

    #[test]
    fn reward_scale_leaves_actor_gradient_unchanged() {
        // Doubling the critic outputs (exact powers of two throughout)
        // halves lambda and leaves the policy-loss gradient bit-identical.
        let mut rng = Rng::new(5);
        let actor = Actor::new(4, vec![8], vec![-1.0; 2], vec![1.0; 2], &mut rng).unwrap();
        let critics = CriticPair::new(6, vec![8], &mut rng).unwrap();
        let mut doubled = critics.clone();
        let out_layer = doubled.q1.layers.last_mut().unwrap();
        out_layer.w.data.iter_mut().for_each(|v| *v *= 2.0);
        out_layer.b.data.iter_mut().for_each(|v| *v *= 2.0);

        let n = 16;
        let mut states = vec![0.0; n * 4];
        rng.fill_normal(&mut states);
        let mut actions = vec![0.0; n * 2];
        rng.fill_normal(&mut actions);
        actions.iter_mut().for_each(|a| *a = a.clamp(-1.0, 1.0));

        let (_, g1) =
            policy_loss_actor_grad(&actor, &critics, &states, &actions, n, 2.5).unwrap();
        let (_, g2) =
            policy_loss_actor_grad(&actor, &doubled, &states, &actions, n, 2.5).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }
    }
}
