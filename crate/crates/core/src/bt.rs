//! Bradley-Terry baseline: an MLP Markovian reward r(s, a) trained so that
//! segment preference probabilities (softmax over summed step rewards) match
//! the labels under binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::diffusion::{norm_stats_from_pairs, NormStats, RewardTrainConfig};
use crate::error::{CoreError, Result};
use crate::prefdata::{LabeledPrefDataset, PreferencePair, Segment};
use crate::tensor::tape::{stable_sigmoid, Tape, Var};
use crate::tensor::{AdamConfig, AdamState, MlpConfig, MlpParams, Rng, Tensor};

/// MLP mapping (state ++ action) to a scalar step reward. Output is left
/// unbounded; pairwise probabilities are computed in log-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtRewardNet {
    pub mlp: MlpParams,
    pub norm: NormStats,
    pub p_min: f64,
}

impl BtRewardNet {
    pub fn data_dim(&self) -> usize {
        self.norm.dim()
    }

    /// Per-step reward r(s, a).
    pub fn step_reward(&self, sa: &[f64]) -> Result<f64> {
        let x = self.norm.normalize(sa)?;
        let out = self.mlp.forward(&Tensor {
            shape: vec![1, x.len()],
            data: x,
        })?;
        let r = out.data[0];
        if !r.is_finite() {
            return Err(CoreError::train("non-finite reward output".to_string()));
        }
        Ok(r)
    }

    pub fn segment_return(&self, seg: &Segment) -> Result<f64> {
        let rows = seg.sa_rows();
        let mut flat = Vec::with_capacity(rows.len() * self.data_dim());
        for row in &rows {
            flat.extend(self.norm.normalize(row)?);
        }
        let out = self.mlp.forward(&Tensor {
            shape: vec![rows.len(), self.data_dim()],
            data: flat,
        })?;
        Ok(out.data.iter().sum())
    }
}

fn prob_from_returns(ra: f64, rb: f64) -> f64 {
    // Evaluate the softmax once for the larger side and take the exact
    // complement for the other, so prob(A,B) + prob(B,A) == 1 bit-for-bit.
    if ra >= rb {
        stable_sigmoid(ra - rb)
    } else {
        1.0 - stable_sigmoid(rb - ra)
    }
}

/// P[segA preferred over segB] = exp(sum r(A)) / (exp(sum r(A)) + exp(sum r(B))),
/// computed in log-space.
pub fn bt_prob(net: &BtRewardNet, seg_a: &Segment, seg_b: &Segment) -> Result<f64> {
    if seg_a.len() != seg_b.len() {
        return Err(CoreError::data(format!(
            "bt_prob: segment lengths {} vs {}",
            seg_a.len(),
            seg_b.len()
        )));
    }
    Ok(prob_from_returns(
        net.segment_return(seg_a)?,
        net.segment_return(seg_b)?,
    ))
}

/// Tape graph for the Bradley-Terry cross-entropy over a batch. Labels may
/// be 0, 0.5 or 1; y = 0.5 weights both orderings by a half.
fn bt_tape(
    mlp: &MlpParams,
    norm: &NormStats,
    p_min: f64,
    batch: &[&PreferencePair],
) -> Result<(Tape, crate::tensor::mlp::MlpVars, Var)> {
    if batch.is_empty() {
        return Err(CoreError::data("empty preference batch".to_string()));
    }
    let h = batch[0].h();
    for (i, p) in batch.iter().enumerate() {
        if p.h() != h {
            return Err(CoreError::data(format!(
                "batch pair {i} has H {} but the batch uses {h}",
                p.h()
            )));
        }
    }
    let b = batch.len();
    let dim = norm.dim();
    // rows: all seg0 steps, then all seg1 steps
    let mut rows = Vec::with_capacity(2 * b * h * dim);
    for p in batch {
        for row in p.seg0.sa_rows() {
            rows.extend(norm.normalize(&row)?);
        }
    }
    for p in batch {
        for row in p.seg1.sa_rows() {
            rows.extend(norm.normalize(&row)?);
        }
    }
    let w0: Vec<f64> = batch.iter().map(|p| 1.0 - p.label).collect();
    let w1: Vec<f64> = batch.iter().map(|p| p.label).collect();

    let mut tape = Tape::new();
    let vars = mlp.register(&mut tape)?;
    let x = tape.leaf_raw(2 * b * h, dim, rows, false)?;
    let r = vars.forward(&mut tape, x)?;
    let per_seg = tape.reshape(r, 2 * b, h)?;
    let sums = tape.row_sum(per_seg);
    let s0 = tape.slice_rows(sums, 0, b)?;
    let s1 = tape.slice_rows(sums, b, b)?;
    let z0 = tape.sub(s0, s1)?;
    let z1 = tape.sub(s1, s0)?;
    let p0 = tape.sigmoid(z0);
    let p1 = tape.sigmoid(z1);
    let p0c = tape.clamp(p0, p_min, 1.0 - p_min);
    let p1c = tape.clamp(p1, p_min, 1.0 - p_min);
    let l0 = tape.log(p0c);
    let l1 = tape.log(p1c);
    let w0v = tape.constant(b, 1, w0)?;
    let w1v = tape.constant(b, 1, w1)?;
    let t0 = tape.mul(w0v, l0)?;
    let t1 = tape.mul(w1v, l1)?;
    let s = tape.add(t0, t1)?;
    let mean = tape.mean_all(s);
    let loss = tape.scale(mean, -1.0);
    Ok((tape, vars, loss))
}

/// Binary cross-entropy of the Bradley-Terry probabilities against labels.
pub fn bt_loss(net: &BtRewardNet, batch: &[PreferencePair]) -> Result<f64> {
    let refs: Vec<&PreferencePair> = batch.iter().collect();
    let (tape, _, loss) = bt_tape(&net.mlp, &net.norm, net.p_min, &refs)?;
    tape.scalar_value(loss)
}

/// Loss value and analytic gradients (in `MlpParams::tensors` order).
pub fn bt_loss_grads(net: &BtRewardNet, batch: &[&PreferencePair]) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut tape, vars, loss) = bt_tape(&net.mlp, &net.norm, net.p_min, batch)?;
    let loss_val = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    Ok((
        loss_val,
        vars.vars().iter().map(|&v| grads.wrt(v).to_vec()).collect(),
    ))
}

/// Trains the Bradley-Terry reward net with the shared optimizer settings
/// (the diffusion-specific fields of the config are ignored).
pub fn train_bt(pairs: &LabeledPrefDataset, cfg: &RewardTrainConfig) -> Result<(BtRewardNet, Vec<f64>)> {
    cfg.validate()?;
    let norm = norm_stats_from_pairs(pairs)?;
    let dim = pairs.state_dim() + pairs.action_dim();
    let mut rng = Rng::with_stream(cfg.seed, 0x6274); // "bt"
    let mut config = MlpConfig::new(dim, cfg.hidden_dims(), 1);
    config.activation = cfg.activation;
    let mut mlp = MlpParams::init(config, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &mlp.tensors());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs.pairs[i]).collect();
            let (mut tape, vars, loss) = bt_tape(&mlp, &norm, cfg.p_min, &batch)?;
            let loss_val = tape.scalar_value(loss)?;
            let grads = tape
                .backward(loss)
                .map_err(|e| CoreError::train(format!("epoch {epoch}, batch {bi}: {e}")))?;
            let grad_slices: Vec<&[f64]> = vars.vars().iter().map(|&v| grads.wrt(v)).collect();
            adam.step(&mut mlp.tensors_mut(), &grad_slices)
                .map_err(|e| CoreError::train(format!("epoch {epoch}, batch {bi}: {e}")))?;
            epoch_loss += loss_val * chunk.len() as f64;
        }
        curve.push(epoch_loss / pairs.len() as f64);
    }
    Ok((
        BtRewardNet {
            mlp,
            norm,
            p_min: cfg.p_min,
        },
        curve,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_diff, max_rel_err};
    use crate::tensor::Activation;

    fn seg(vals: &[f64]) -> Segment {
        Segment {
            traj_id: 0,
            start: 0,
            states: vals.iter().map(|&v| vec![v]).collect(),
            actions: vals.iter().map(|_| vec![0.0]).collect(),
        }
    }

    /// Net whose step reward equals state[0] (identity readout).
    fn passthrough_net() -> BtRewardNet {
        let mut mlp = MlpParams::zeros(MlpConfig::new(2, vec![], 1)).unwrap();
        mlp.layers[0].w.data = vec![1.0, 0.0];
        BtRewardNet {
            mlp,
            norm: NormStats::identity(2),
            p_min: 1e-6,
        }
    }

    fn random_net(seed: u64) -> BtRewardNet {
        let mut rng = Rng::new(seed);
        let mut config = MlpConfig::new(2, vec![8], 1);
        config.activation = Activation::Tanh;
        BtRewardNet {
            mlp: MlpParams::init(config, &mut rng).unwrap(),
            norm: NormStats::identity(2),
            p_min: 1e-6,
        }
    }

    #[test]
    fn equal_returns_give_even_odds() {
        let net = passthrough_net();
        let a = seg(&[1.0, 2.0]);
        let b = seg(&[2.0, 1.0]);
        assert_eq!(bt_prob(&net, &a, &b).unwrap(), 0.5);
    }

    #[test]
    fn unit_margin_is_sigmoid_of_one() {
        let net = passthrough_net();
        let a = seg(&[0.5, 0.5]); // return 1
        let b = seg(&[0.0, 0.0]); // return 0
        let p = bt_prob(&net, &a, &b).unwrap();
        assert!((p - 0.7310585786300049).abs() < 1e-15, "p = {p}");
    }

    #[test]
    fn antisymmetry_is_exact() {
        let net = random_net(3);
        for i in 0..50 {
            let mut rng = Rng::with_stream(77, i);
            let a = seg(&[rng.normal(), rng.normal(), rng.normal()]);
            let b = seg(&[rng.normal(), rng.normal(), rng.normal()]);
            let pab = bt_prob(&net, &a, &b).unwrap();
            let pba = bt_prob(&net, &b, &a).unwrap();
            assert_eq!(pab, 1.0 - pba, "pair {i}: {pab} + {pba}");
            assert!(pab > 0.0 && pab < 1.0);
        }
    }

    #[test]
    fn shift_invariance_of_preferences() {
        let net = random_net(4);
        let mut shifted = net.clone();
        let kappa = 3.7;
        *shifted.mlp.layers.last_mut().unwrap().b.data.last_mut().unwrap() += kappa;
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let a = seg(&[rng.normal(), rng.normal()]);
            let b = seg(&[rng.normal(), rng.normal()]);
            let p = bt_prob(&net, &a, &b).unwrap();
            let ps = bt_prob(&shifted, &a, &b).unwrap();
            assert!((p - ps).abs() < 1e-9, "{p} vs {ps}");
        }
    }

    #[test]
    fn loss_spot_values_at_even_odds() {
        // zero net: every probability is 0.5
        let net = BtRewardNet {
            mlp: MlpParams::zeros(MlpConfig::new(2, vec![], 1)).unwrap(),
            norm: NormStats::identity(2),
            p_min: 1e-6,
        };
        let mk = |y: f64| PreferencePair::new(seg(&[0.0]), seg(&[1.0]), y).unwrap();
        for y in [1.0, 0.5, 0.0] {
            let loss = bt_loss(&net, &[mk(y)]).unwrap();
            assert!(
                (loss - 2.0f64.ln()).abs() < 1e-15,
                "y = {y}: loss {loss} should be ln 2"
            );
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = passthrough_net();
        assert!(bt_loss(&net, &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = random_net(6);
        assert!(net.mlp.param_count() <= 1000);
        let mut rng = Rng::new(7);
        let mut pairs = Vec::new();
        for y in [1.0, 0.0, 0.5] {
            let a = seg(&[rng.normal(), rng.normal(), rng.normal()]);
            let b = seg(&[rng.normal(), rng.normal(), rng.normal()]);
            pairs.push(PreferencePair::new(a, b, y).unwrap());
        }
        let refs: Vec<&PreferencePair> = pairs.iter().collect();

        let (mut tape, vars, loss) = bt_tape(&net.mlp, &net.norm, net.p_min, &refs).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for v in vars.vars() {
            analytic.extend_from_slice(grads.wrt(v));
        }

        let numeric = central_diff(
            |flat| {
                let mlp = MlpParams::from_flat(net.mlp.config.clone(), flat).unwrap();
                let (tape, _, loss) = bt_tape(&mlp, &net.norm, net.p_min, &refs).unwrap();
                tape.scalar_value(loss).unwrap()
            },
            &net.mlp.to_flat(),
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn training_smoke_and_determinism() {
        let pairs = LabeledPrefDataset::new(
            vec![
                PreferencePair::new(seg(&[-1.0, -1.0]), seg(&[1.0, 1.0]), 1.0).unwrap(),
                PreferencePair::new(seg(&[-0.5, -0.2]), seg(&[0.8, 0.3]), 1.0).unwrap(),
            ],
            "external",
        )
        .unwrap();
        let cfg = RewardTrainConfig {
            epochs: 5,
            batch_size: 2,
            hidden_layers: 1,
            hidden_dim: 8,
            lr: 1e-2,
            seed: 9,
            ..Default::default()
        };
        let (net_a, curve) = train_bt(&pairs, &cfg).unwrap();
        assert_eq!(curve.len(), 5);
        assert!(curve.iter().all(|l| l.is_finite()));
        let (net_b, _) = train_bt(&pairs, &cfg).unwrap();
        assert_eq!(net_a, net_b);
    }
}
