//! Minimal dense numerics: tensors, a seeded RNG, reverse-mode automatic
//! differentiation over small MLPs, and Adam.
//!
//! Everything is 64-bit and single-threaded per training run, which keeps
//! gradient checks tight and runs bit-reproducible for a fixed seed.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod rng;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, MlpConfig, MlpParams};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer matches the shape and every
    /// entry is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interprets the tensor as a 2-D (rows, cols) view. Rank-1 tensors are
    /// treated as a single row; scalars as 1x1.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(CoreError::shape(format!(
                "expected rank <= 2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn check_finite(&self, who: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::train(format!("{who}: non-finite value in tensor")))
        }
    }
}

/// C = A @ B for row-major A [m,k] and B [k,n], written into `c`.
pub(crate) fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 1 {
        // matrix-vector: one dot product per output row
        for (cv, arow) in c.iter_mut().zip(a.chunks(k)) {
            *cv = arow.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        }
        return;
    }
    c.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// dA = dC @ B^T without materializing the transpose: dA[i,p] = sum_j dC[i,j] B[p,j].
pub(crate) fn matmul_nt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        // outer product: da_row += dc[i] * b
        for (darow, &g) in da.chunks_mut(k).zip(dc.iter()).take(m) {
            for (dav, &bv) in darow.iter_mut().zip(b.iter()) {
                *dav += g * bv;
            }
        }
        return;
    }
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dav) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in dcrow.iter().zip(brow.iter()) {
                s += x * y;
            }
            *dav += s;
        }
    }
}

/// dB = A^T @ dC accumulated into `db`: db[p,j] += sum_i A[i,p] dC[i,j].
pub(crate) fn matmul_tn(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        // db += A^T @ g, one scaled-row accumulation per input row
        for (arow, &g) in a.chunks(k).zip(dc.iter()).take(m) {
            for (dbv, &av) in db.iter_mut().zip(arow.iter()) {
                *dbv += av * g;
            }
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &dcv) in dbrow.iter_mut().zip(dcrow.iter()) {
                *dbv += av * dcv;
            }
        }
    }
}
