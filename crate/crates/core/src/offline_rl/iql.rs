//! Implicit Q-learning: expectile-regressed V, TD backups for the twin
//! critics against V, and advantage-weighted behavior cloning for the actor.

use crate::envs::{rollout, Environment};
use crate::error::{CoreError, Result};
use crate::offline_rl::td3bc::sample_batch;
use crate::offline_rl::{concat_sa, Actor, CriticPair, MetricsRow, ReplayData, RlConfig};
use crate::tensor::tape::Tape;
use crate::tensor::{Activation, AdamConfig, AdamState, MlpConfig, MlpParams, Rng, Tensor};

/// Asymmetric squared-error weight |tau - 1{u < 0}|. At tau = 0.5 every
/// residual weighs 0.5, reducing the objective to half the MSE.
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0).abs()
    } else {
        tau
    }
}

fn forward_scalar_net(net: &MlpParams, rows: &[f64], n: usize) -> Result<Vec<f64>> {
    Ok(net
        .forward(&Tensor {
            shape: vec![n, net.config.input_dim],
            data: rows.to_vec(),
        })?
        .data)
}

/// Weighted regression `mean(w * |net(x) - target|^2)` with constant
/// per-row weights; applies one Adam step and returns the loss.
fn weighted_mse_step(
    net: &mut MlpParams,
    adam: &mut AdamState,
    x: &[f64],
    target: &[f64],
    weights: &[f64],
    n: usize,
) -> Result<f64> {
    let in_dim = net.config.input_dim;
    let out_dim = net.config.output_dim;
    let mut tape = Tape::new();
    let vars = net.register(&mut tape)?;
    let xv = tape.leaf_raw(n, in_dim, x.to_vec(), false)?;
    let tv = tape.leaf_raw(n, out_dim, target.to_vec(), false)?;
    let wv = tape.constant(n, 1, weights.to_vec())?;
    let out = vars.forward(&mut tape, xv)?;
    let d = tape.sub(out, tv)?;
    let sq = tape.square(d);
    let per_row = tape.row_sum(sq);
    let weighted = tape.mul(wv, per_row)?;
    let loss = tape.mean_all(weighted);
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let var_list = vars.vars();
    let grad_slices: Vec<&[f64]> = var_list.iter().map(|&v| grads.wrt(v)).collect();
    adam.step(&mut net.tensors_mut(), &grad_slices)?;
    Ok(loss_val)
}

/// Actor update: weighted behavior cloning through the tanh squash, with
/// constant advantage weights.
fn awr_actor_step(
    actor: &mut Actor,
    adam: &mut AdamState,
    states: &[f64],
    actions: &[f64],
    weights: &[f64],
    n: usize,
) -> Result<f64> {
    let sd = actor.mlp.config.input_dim;
    let ad = actor.action_dim();
    let (half, center) = actor.squash_scale();
    let mut tape = Tape::new();
    let vars = actor.mlp.register(&mut tape)?;
    let s = tape.leaf_raw(n, sd, states.to_vec(), false)?;
    let a = tape.leaf_raw(n, ad, actions.to_vec(), false)?;
    let w = tape.constant(n, 1, weights.to_vec())?;
    let raw = vars.forward(&mut tape, s)?;
    let squashed = tape.tanh(raw);
    let a_pi = tape.affine_cols(squashed, half, center)?;
    let d = tape.sub(a_pi, a)?;
    let sq = tape.square(d);
    let per_row = tape.row_sum(sq);
    let weighted = tape.mul(w, per_row)?;
    let loss = tape.mean_all(weighted);
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let var_list = vars.vars();
    let grad_slices: Vec<&[f64]> = var_list.iter().map(|&v| grads.wrt(v)).collect();
    adam.step(&mut actor.mlp.tensors_mut(), &grad_slices)?;
    Ok(loss_val)
}

/// Runs IQL on an annotated dataset; returns the actor and per-interval
/// metrics (critic_loss = summed twin-Q loss, actor_loss = AWR loss).
pub fn train_iql(
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
    let mut rng = Rng::with_stream(cfg.seed, 0x6971_6c00); // "iql"
    let mut eval_rng = Rng::with_stream(cfg.seed, 0x6576_616c); // "eval"

    let mut actor = Actor::new(sd, cfg.hidden_dims(), act_lo.to_vec(), act_hi.to_vec(), &mut rng)?;
    let mut critics = CriticPair::new(sd + ad, cfg.hidden_dims(), &mut rng)?;
    let mut value_net = MlpParams::init(
        {
            let mut c = MlpConfig::new(sd, cfg.hidden_dims(), 1);
            c.activation = Activation::Relu;
            c
        },
        &mut rng,
    )?;

    let mut q1_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &critics.q1.tensors());
    let mut q2_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &critics.q2.tensors());
    let mut value_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &value_net.tensors());
    let mut actor_adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &actor.mlp.tensors());

    fn ctx(step: usize, what: &'static str) -> impl Fn(CoreError) -> CoreError {
        move |e| CoreError::train(format!("step {step} ({what}): {e}"))
    }

    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch_size, &mut rng);
        let sa = concat_sa(&batch.s, &batch.a, batch.n, sd, ad);

        // V regression toward the frozen min target-Q under the expectile.
        let q_min = critics.min_target(&sa, batch.n)?;
        let v_now = forward_scalar_net(&value_net, &batch.s, batch.n)?;
        let expectile_w: Vec<f64> = q_min
            .iter()
            .zip(v_now.iter())
            .map(|(&q, &v)| expectile_weight(q - v, cfg.tau_expectile))
            .collect();
        weighted_mse_step(&mut value_net, &mut value_adam, &batch.s, &q_min, &expectile_w, batch.n)
            .map_err(ctx(step, "V"))?;

        // Twin-Q TD regression toward r + gamma * nd * V(s').
        let v_next = forward_scalar_net(&value_net, &batch.s2, batch.n)?;
        let y: Vec<f64> = batch
            .r
            .iter()
            .zip(batch.nd.iter())
            .zip(v_next.iter())
            .map(|((&r, &nd), &v)| r + cfg.gamma * nd * v)
            .collect();
        let ones = vec![1.0; batch.n];
        let l1 = weighted_mse_step(&mut critics.q1, &mut q1_adam, &sa, &y, &ones, batch.n)
            .map_err(ctx(step, "Q1"))?;
        let l2 = weighted_mse_step(&mut critics.q2, &mut q2_adam, &sa, &y, &ones, batch.n)
            .map_err(ctx(step, "Q2"))?;
        let critic_loss = l1 + l2;

        // Advantage-weighted actor: w = min(exp(beta * (Q - V)), w_max).
        let awr_w: Vec<f64> = q_min
            .iter()
            .zip(v_now.iter())
            .map(|(&q, &v)| (cfg.beta_awr * (q - v)).exp().min(cfg.w_max))
            .collect();
        let actor_loss =
            awr_actor_step(&mut actor, &mut actor_adam, &batch.s, &batch.a, &awr_w, batch.n)
                .map_err(ctx(step, "actor"))?;

        critics.polyak_update(cfg.polyak);

        let at_interval = cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
        if at_interval || step + 1 == cfg.steps {
            let eval_return = match eval_env {
                Some(env) => Some(rollout(env, &actor, &mut eval_rng, cfg.eval_episodes)?.mean),
                None => None,
            };
            metrics.push(MetricsRow {
                step: step + 1,
                critic_loss,
                actor_loss,
                eval_return,
            });
        }
    }
    Ok((actor, metrics))
}
