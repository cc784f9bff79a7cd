//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Ops are tensor-granular (matmul, activations, reductions), which keeps
//! the tape short and the hot loops inside vectorizable kernels. The op set
//! is closed: anything expressible here has an exact adjoint, so a graph
//! that constructs successfully always yields gradients for every trainable
//! leaf. Shape mismatches are rejected when the op is recorded, not during
//! backward.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Activation fused into a [`Tape::linear`] node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedAct {
    None,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Matmul { a: usize, b: usize },
    /// act(x @ w + b) in one node; only the activated output is stored.
    Linear { x: usize, w: usize, b: usize, act: FusedAct },
    /// x [n,d] + b ([d] broadcast over rows).
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Square { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    /// Per-column constant affine: y[:,j] = x[:,j] * scale[j] + shift[j].
    AffineCols { x: usize, scale: Vec<f64> },
    /// [n,d] -> [n,1] sum over columns.
    RowSum { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    SoftmaxRows { x: usize },
    /// Row lookup into a table: out[i,:] = table[idx[i],:].
    GatherRows { table: usize, idx: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Reshape { x: usize },
    SliceRows { x: usize, start: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient buffer for `v` (same layout as the node's data).
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

/// Operation tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(CoreError::shape(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.data[0])
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, trainable: bool) -> Result<Var> {
        let (rows, cols) = t.dims2()?;
        Ok(self.push(rows, cols, t.data.clone(), Op::Leaf { trainable }))
    }

    pub fn leaf_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>, trainable: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(CoreError::shape(format!(
                "leaf buffer {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf { trainable }))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf_raw(rows, cols, data, false)
    }

    // ── Ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        if ka != kb {
            return Err(CoreError::shape(format!(
                "matmul inner dims differ: lhs is {m}x{ka}, rhs is {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            ka,
            n,
        );
        Ok(self.push(m, n, out, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Fused act(x @ w + b). The workhorse of every MLP forward pass on the
    /// tape; its backward uses the stored output for the activation
    /// derivative, which both tanh and relu admit.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, act: FusedAct) -> Result<Var> {
        let (m, kx) = (self.rows(x), self.cols(x));
        let (kw, n) = (self.rows(w), self.cols(w));
        if kx != kw {
            return Err(CoreError::shape(format!(
                "linear: input is {m}x{kx}, weight is {kw}x{n}"
            )));
        }
        let bn = self.nodes[b.0].rows * self.nodes[b.0].cols;
        if bn != n {
            return Err(CoreError::shape(format!(
                "linear: bias of length {bn} does not match {n} outputs"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &mut out,
            m,
            kx,
            n,
        );
        let bias = &self.nodes[b.0].data;
        for row in out.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
        match act {
            FusedAct::None => {}
            FusedAct::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
            FusedAct::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
                act,
            },
        ))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        let bn = self.nodes[b.0].rows * self.nodes[b.0].cols;
        if bn != c {
            return Err(CoreError::shape(format!(
                "bias of length {bn} does not match {c} columns"
            )));
        }
        let mut out = self.nodes[x.0].data.clone();
        let bias = &self.nodes[b.0].data;
        for row in out.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
        Ok(self.push(r, c, out, Op::AddBias { x: x.0, b: b.0 }))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let (ra, ca) = (self.rows(a), self.cols(a));
        let (rb, cb) = (self.rows(b), self.cols(b));
        if (ra, ca) != (rb, cb) {
            return Err(CoreError::shape(format!(
                "{name}: shapes {ra}x{ca} and {rb}x{cb} differ"
            )));
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(r, c, out, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, out, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, k) = (self.rows(x), self.cols(x));
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        self.push(r, k, out, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (r, k) = (self.rows(x), self.cols(x));
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        self.push(r, k, out, Op::AddScalar { x: x.0 })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = (self.rows(x), self.cols(x));
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        self.push(r, c, out, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x: x.0 })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    pub fn affine_cols(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if scale.len() != c || shift.len() != c {
            return Err(CoreError::shape(format!(
                "affine_cols: scale/shift length {}/{} vs {} columns",
                scale.len(),
                shift.len(),
                c
            )));
        }
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(c) {
            for ((v, &s), &t) in row.iter_mut().zip(scale.iter()).zip(shift.iter()) {
                *v = *v * s + t;
            }
        }
        Ok(self.push(r, c, out, Op::AffineCols { x: x.0, scale }))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = (self.rows(x), self.cols(x));
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(c)
            .map(|row| row.iter().sum())
            .collect();
        self.push(r, 1, out, Op::RowSum { x: x.0 })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(1, 1, vec![s / n], Op::MeanAll { x: x.0 })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = (self.rows(x), self.cols(x));
        let mut out = vec![0.0; r * c];
        for (orow, xrow) in out.chunks_mut(c).zip(self.nodes[x.0].data.chunks(c)) {
            let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(r, c, out, Op::SoftmaxRows { x: x.0 })
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (tr, tc) = (self.rows(table), self.cols(table));
        if let Some(&bad) = idx.iter().find(|&&i| i >= tr) {
            return Err(CoreError::shape(format!(
                "gather_rows: index {bad} out of range for table with {tr} rows"
            )));
        }
        let tdata = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(idx.len() * tc);
        for &i in idx {
            out.extend_from_slice(&tdata[i * tc..(i + 1) * tc]);
        }
        Ok(self.push(
            idx.len(),
            tc,
            out,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_cols: no parts".to_string()));
        }
        let r = self.rows(parts[0]);
        for &p in parts {
            if self.rows(p) != r {
                return Err(CoreError::shape(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    self.rows(p),
                    r
                )));
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                let data = &self.nodes[p.0].data;
                out.extend_from_slice(&data[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            r,
            total_c,
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if rows * cols != n {
            return Err(CoreError::shape(format!(
                "reshape: {n} elements cannot form {rows}x{cols}"
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(rows, cols, data, Op::Reshape { x: x.0 }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if start + len > r {
            return Err(CoreError::shape(format!(
                "slice_rows: rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, data, Op::SliceRows { x: x.0, start }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// A frozen leaf never propagates further, so accumulating into it is
    /// wasted work.
    fn wants_grad(&self, i: usize) -> bool {
        !matches!(self.nodes[i].op, Op::Leaf { trainable: false })
    }

    /// Backpropagates from a scalar loss. Every node gets a gradient buffer;
    /// trainable leaves that do not influence the loss end up with zeros,
    /// and frozen leaves always read as zero.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.rows * loss_node.cols != 1 {
            return Err(CoreError::shape(format!(
                "backward: loss must be scalar, got {}x{}",
                loss_node.rows, loss_node.cols
            )));
        }
        if !loss_node.data[0].is_finite() {
            return Err(CoreError::train(format!(
                "backward: loss is non-finite ({})",
                loss_node.data[0]
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.rows * n.cols])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Split the grad buffers so we can read grads[i] while writing
            // into earlier entries (inputs always precede their op).
            let (head, tail) = grads.split_at_mut(i);
            let g = &tail[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].cols;
                    // in-place accumulate: dA += g @ B^T, dB += A^T @ g.
                    // Frozen leaves (constant inputs, frozen weights) skip
                    // their side entirely.
                    if self.wants_grad(*a) {
                        matmul_nt(g, &self.nodes[*b].data, &mut head[*a], m, k, n);
                    }
                    if self.wants_grad(*b) {
                        matmul_tn(&self.nodes[*a].data, g, &mut head[*b], m, k, n);
                    }
                }
                Op::Linear { x, w, b, act } => {
                    let (m, k) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    let n = node.cols;
                    // gradient at the pre-activation, from the stored output
                    let dpre: Vec<f64> = match act {
                        FusedAct::None => g.clone(),
                        FusedAct::Tanh => g
                            .iter()
                            .zip(node.data.iter())
                            .map(|(gv, &o)| gv * (1.0 - o * o))
                            .collect(),
                        FusedAct::Relu => g
                            .iter()
                            .zip(node.data.iter())
                            .map(|(gv, &o)| if o > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    };
                    if self.wants_grad(*x) {
                        matmul_nt(&dpre, &self.nodes[*w].data, &mut head[*x], m, k, n);
                    }
                    if self.wants_grad(*w) {
                        matmul_tn(&self.nodes[*x].data, &dpre, &mut head[*w], m, k, n);
                    }
                    if self.wants_grad(*b) {
                        for row in dpre.chunks(n) {
                            for (dbv, gv) in head[*b].iter_mut().zip(row.iter()) {
                                *dbv += gv;
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    for (dv, gv) in head[*x].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                    if self.wants_grad(*b) {
                        let c = node.cols;
                        for grow in g.chunks(c) {
                            for (dbv, gv) in head[*b].iter_mut().zip(grow.iter()) {
                                *dbv += gv;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (dv, gv) in head[*a].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                    for (dv, gv) in head[*b].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
                Op::Sub { a, b } => {
                    for (dv, gv) in head[*a].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                    for (dv, gv) in head[*b].iter_mut().zip(g.iter()) {
                        *dv -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (adata, bdata) = (&self.nodes[*a].data, &self.nodes[*b].data);
                    for ((dv, gv), bv) in head[*a].iter_mut().zip(g.iter()).zip(bdata.iter()) {
                        *dv += gv * bv;
                    }
                    for ((dv, gv), av) in head[*b].iter_mut().zip(g.iter()).zip(adata.iter()) {
                        *dv += gv * av;
                    }
                }
                Op::Scale { x, c } => {
                    for (dv, gv) in head[*x].iter_mut().zip(g.iter()) {
                        *dv += gv * c;
                    }
                }
                Op::AddScalar { x } => {
                    for (dv, gv) in head[*x].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
                Op::Tanh { x } => {
                    for ((dv, gv), &t) in head[*x].iter_mut().zip(g.iter()).zip(node.data.iter()) {
                        *dv += gv * (1.0 - t * t);
                    }
                }
                Op::Relu { x } => {
                    let xdata = &self.nodes[*x].data;
                    for ((dv, gv), &xv) in head[*x].iter_mut().zip(g.iter()).zip(xdata.iter()) {
                        if xv > 0.0 {
                            *dv += gv;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    for ((dv, gv), &s) in head[*x].iter_mut().zip(g.iter()).zip(node.data.iter()) {
                        *dv += gv * s * (1.0 - s);
                    }
                }
                Op::Exp { x } => {
                    for ((dv, gv), &e) in head[*x].iter_mut().zip(g.iter()).zip(node.data.iter()) {
                        *dv += gv * e;
                    }
                }
                Op::Log { x } => {
                    let xdata = &self.nodes[*x].data;
                    for ((dv, gv), &xv) in head[*x].iter_mut().zip(g.iter()).zip(xdata.iter()) {
                        *dv += gv / xv;
                    }
                }
                Op::Square { x } => {
                    let xdata = &self.nodes[*x].data;
                    for ((dv, gv), &xv) in head[*x].iter_mut().zip(g.iter()).zip(xdata.iter()) {
                        *dv += gv * 2.0 * xv;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xdata = &self.nodes[*x].data;
                    for ((dv, gv), &xv) in head[*x].iter_mut().zip(g.iter()).zip(xdata.iter()) {
                        if xv >= *lo && xv <= *hi {
                            *dv += gv;
                        }
                    }
                }
                Op::AffineCols { x, scale } => {
                    let c = node.cols;
                    for (drow, grow) in head[*x].chunks_mut(c).zip(g.chunks(c)) {
                        for ((dv, gv), &s) in drow.iter_mut().zip(grow.iter()).zip(scale.iter()) {
                            *dv += gv * s;
                        }
                    }
                }
                Op::RowSum { x } => {
                    let c = self.nodes[*x].cols;
                    for (drow, gv) in head[*x].chunks_mut(c).zip(g.iter()) {
                        for dv in drow.iter_mut() {
                            *dv += gv;
                        }
                    }
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    for dv in head[*x].iter_mut() {
                        *dv += gv;
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[*x].data.len() as f64;
                    let gv = g[0] / n;
                    for dv in head[*x].iter_mut() {
                        *dv += gv;
                    }
                }
                Op::SoftmaxRows { x } => {
                    let c = node.cols;
                    for ((drow, grow), srow) in head[*x]
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(node.data.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                        for ((dv, gv), &sv) in drow.iter_mut().zip(grow.iter()).zip(srow.iter()) {
                            *dv += sv * (gv - dot);
                        }
                    }
                }
                Op::GatherRows { table, idx } => {
                    if self.wants_grad(*table) {
                        let c = node.cols;
                        let dtable = &mut head[*table];
                        for (r, &ti) in idx.iter().enumerate() {
                            let grow = &g[r * c..(r + 1) * c];
                            let drow = &mut dtable[ti * c..(ti + 1) * c];
                            for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.rows;
                    let mut col_off = 0usize;
                    let total_c = node.cols;
                    for &p in parts {
                        let c = self.nodes[p].cols;
                        for r in 0..rows {
                            let grow = &g[r * total_c + col_off..r * total_c + col_off + c];
                            let drow = &mut head[p][r * c..(r + 1) * c];
                            for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                                *dv += gv;
                            }
                        }
                        col_off += c;
                    }
                }
                Op::Reshape { x } => {
                    for (dv, gv) in head[*x].iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.cols;
                    let dst = &mut head[*x][start * c..start * c + node.rows * c];
                    for (dv, gv) in dst.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sigmoid evaluated so that neither branch exponentiates a large positive
/// argument.
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
