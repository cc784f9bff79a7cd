//! Fully-connected networks with configurable depth, width and activation.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::rng::Rng;
use crate::tensor::tape::{FusedAct, Tape, Var};
use crate::tensor::{matmul, Tensor};

/// Hidden-layer activation. Tanh is the default: the diffusion denoisers
/// need a smooth activation for stable squared-error objectives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total parameter count: sum of (fan_in + 1) * fan_out over layers.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| (i + 1) * o)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(CoreError::config("mlp dims must be positive".to_string()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(CoreError::config("mlp hidden dim of 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Weights and biases for an MLP; immutable once training finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// Fan-in scaled uniform init: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// drawn layer by layer (weights row-major, then bias) from `rng`.
    pub fn init(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let s = 1.0 / (fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.range_f64(-s, s)).collect();
                let b: Vec<f64> = (0..fan_out).map(|_| rng.range_f64(-s, s)).collect();
                LayerParams {
                    w: Tensor {
                        shape: vec![fan_in, fan_out],
                        data: w,
                    },
                    b: Tensor {
                        shape: vec![fan_out],
                        data: b,
                    },
                }
            })
            .collect();
        Ok(MlpParams { config, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| LayerParams {
                w: Tensor::zeros(vec![i, o]),
                b: Tensor::zeros(vec![o]),
            })
            .collect();
        Ok(MlpParams { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Checks that layer shapes chain consistently with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(CoreError::shape(format!(
                "expected {} layers, found {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (li, ((fan_in, fan_out), layer)) in dims.iter().zip(self.layers.iter()).enumerate() {
            if layer.w.shape != vec![*fan_in, *fan_out] || layer.b.shape != vec![*fan_out] {
                return Err(CoreError::shape(format!(
                    "layer {li}: weight shape {:?} / bias shape {:?} does not chain as {fan_in}->{fan_out}",
                    layer.w.shape, layer.b.shape
                )));
            }
            layer.w.check_finite("mlp weight")?;
            layer.b.check_finite("mlp bias")?;
        }
        Ok(())
    }

    /// Batched forward pass without gradient tracking.
    ///
    /// `input` is row-major [batch, input_dim]; the result is
    /// [batch, output_dim]. Deterministic for fixed params and input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (batch, in_dim) = input.dims2()?;
        if in_dim != self.config.input_dim {
            return Err(CoreError::shape(format!(
                "mlp forward: input has {} columns, network expects {} (layer 0)",
                in_dim, self.config.input_dim
            )));
        }
        let mut cur = input.data.clone();
        let mut cur_dim = in_dim;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.w.shape[0], layer.w.shape[1]);
            if fan_in != cur_dim {
                return Err(CoreError::shape(format!(
                    "mlp forward: layer {li} expects {fan_in} inputs, got {cur_dim}"
                )));
            }
            let mut next = vec![0.0; batch * fan_out];
            matmul(&cur, &layer.w.data, &mut next, batch, fan_in, fan_out);
            for row in next.chunks_mut(fan_out) {
                for (v, &bv) in row.iter_mut().zip(layer.b.data.iter()) {
                    *v += bv;
                }
            }
            if li != last {
                match self.config.activation {
                    Activation::Tanh => next.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => next.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            cur = next;
            cur_dim = fan_out;
        }
        Ok(Tensor {
            shape: vec![batch, cur_dim],
            data: cur,
        })
    }

    /// Registers every weight and bias on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<MlpVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(&layer.w, true)?;
            let b = tape.leaf(&layer.b, true)?;
            layers.push((w, b));
        }
        Ok(MlpVars {
            layers,
            activation: self.config.activation,
        })
    }

    /// Mutable references to all parameter tensors, in a fixed order
    /// (matching `register` / `MlpVars::vars`).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    /// Flattens all parameters into one vector (layer order, weights then
    /// bias). Used by finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b.data);
        }
        out
    }

    pub fn from_flat(config: MlpConfig, flat: &[f64]) -> Result<Self> {
        let mut mlp = MlpParams::zeros(config)?;
        if flat.len() != mlp.param_count() {
            return Err(CoreError::shape(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                mlp.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut mlp.layers {
            let wn = l.w.numel();
            l.w.data.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.numel();
            l.b.data.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(mlp)
    }
}

/// Tape handles for one registered MLP.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl MlpVars {
    /// Forward pass on the tape; mirrors `MlpParams::forward` exactly
    /// (same kernels, one fused node per layer).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let act = if li != last {
                match self.activation {
                    Activation::Tanh => FusedAct::Tanh,
                    Activation::Relu => FusedAct::Relu,
                }
            } else {
                FusedAct::None
            };
            cur = tape
                .linear(cur, w, b, act)
                .map_err(|e| CoreError::shape(format!("mlp layer {li}: {e}")))?;
        }
        Ok(cur)
    }

    /// Parameter leaves in the same order as `MlpParams::tensors_mut`.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
