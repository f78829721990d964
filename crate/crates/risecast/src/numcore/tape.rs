//! Reverse-mode differentiation via an operation tape.
//!
//! A `Tape` is built fresh for every forward pass: operations execute
//! eagerly, each recording enough context to replay its adjoint. `backward`
//! walks the record in exact reverse order, accumulating gradients into
//! per-buffer slots. Parameters are registered by name so the training loop
//! can pull their gradients out afterwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Activation, Parameter, Tensor, ALPHA_DROPOUT_SATURATION};

/// Index of a buffer in the tape arena.
pub type BufId = usize;

const LOG_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul {
        a: BufId,
        b: BufId,
        out: BufId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out = a + bias broadcast over rows; bias has `cols` entries
    AddRowBroadcast {
        a: BufId,
        bias: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// out = a + b, same shape
    AddElem { a: BufId, b: BufId, out: BufId },
    /// out = a ⊙ b, same shape
    MulElem { a: BufId, b: BufId, out: BufId },
    /// out = a ⊙ tile(t): a has R rows, t has `tile_rows` rows, R % tile_rows == 0
    MulTiledRows {
        a: BufId,
        tile: BufId,
        out: BufId,
        tile_rows: usize,
        cols: usize,
    },
    /// out[g] = sum of each consecutive group of `group` rows of a
    SumRowGroups {
        a: BufId,
        out: BufId,
        group: usize,
        cols: usize,
    },
    /// out = act(a) elementwise
    Activation {
        a: BufId,
        out: BufId,
        kind: Activation,
    },
    /// out = scale * (mask ? a : saturation) + shift; backward passes scale through kept units
    AlphaDropout {
        a: BufId,
        out: BufId,
        mask: Vec<bool>,
        scale: f64,
    },
    /// out = [inputs[0] | inputs[1] | ...] column-wise; all share `rows`
    ConcatCols {
        inputs: Vec<BufId>,
        out: BufId,
        rows: usize,
        cols: Vec<usize>,
    },
    /// out[r] = dot(a[r,:], b[r,:])
    RowwiseDot {
        a: BufId,
        b: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// out = max(a, min) elementwise
    ClampMin { a: BufId, out: BufId, min: f64 },
    /// out[r] = sum of row r
    RowSum {
        a: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// out[r,c] = a[r,c] / s[r]
    DivRowBroadcast {
        a: BufId,
        s: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// out[r] = a[r, indices[r]]
    GatherCols {
        a: BufId,
        out: BufId,
        indices: Vec<usize>,
        cols: usize,
    },
    /// out = ln(a + eps) elementwise
    LnEps { a: BufId, out: BufId, eps: f64 },
    /// out = mean of all entries (scalar)
    MeanAll { a: BufId, out: BufId, n: usize },
    /// out = factor * a
    Scale { a: BufId, out: BufId, factor: f64 },
    /// out = mean over rows of the per-row sum of binary cross-entropies
    BceMean {
        probs: BufId,
        out: BufId,
        targets: Vec<f64>,
        rows: usize,
    },
}

/// Fresh-per-forward record of primitive operations.
pub struct Tape {
    bufs: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, BufId)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn alloc(&mut self, t: Tensor) -> BufId {
        let id = self.bufs.len();
        self.bufs.push(t);
        self.grads.push(None);
        id
    }

    /// Register a non-learnable input (cloned).
    pub fn input(&mut self, t: &Tensor) -> BufId {
        self.alloc(t.clone())
    }

    pub fn input_owned(&mut self, t: Tensor) -> BufId {
        self.alloc(t)
    }

    /// Register a parameter; its gradient is retrievable by name afterwards.
    pub fn param(&mut self, p: &Parameter) -> BufId {
        let id = self.alloc(p.value.clone());
        self.params.push((p.name.clone(), id));
        id
    }

    pub fn value(&self, id: BufId) -> &Tensor {
        &self.bufs[id]
    }

    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// (name, gradient) pairs for every registered parameter; zero gradient
    /// if no adjoint reached it.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Vec<f64>)> {
        self.params.iter().map(|(name, id)| {
            let g = match &self.grads[*id] {
                Some(g) => g.clone(),
                None => vec![0.0; self.bufs[*id].len()],
            };
            (name.as_str(), g)
        })
    }

    fn dims(&self, id: BufId) -> (usize, usize) {
        self.bufs[id].matrix_dims()
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[b].shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.bufs[a].data();
            let bv = self.bufs[b].data();
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o += x * bb;
                    }
                }
            }
        }
        let out = self.alloc(Tensor::new(vec![m, n], out)?);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn add_row_broadcast(&mut self, a: BufId, bias: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        let blen = self.bufs[bias].len();
        if blen != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[bias].shape().to_vec(),
            });
        }
        let mut data = self.bufs[a].data().to_vec();
        {
            let bv = self.bufs[bias].data();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += bv[c];
                }
            }
        }
        let out = self.alloc(Tensor::new(vec![rows, cols], data)?);
        self.ops.push(Op::AddRowBroadcast {
            a,
            bias,
            out,
            rows,
            cols,
        });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].len() != self.bufs[b].len() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[b].shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.bufs[a]
            .data()
            .iter()
            .zip(self.bufs[b].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::AddElem { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].len() != self.bufs[b].len() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[b].shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.bufs[a]
            .data()
            .iter()
            .zip(self.bufs[b].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::MulElem { a, b, out });
        Ok(out)
    }

    /// Multiply `a` elementwise by `tile` repeated down the rows.
    pub fn mul_tiled_rows(&mut self, a: BufId, tile: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        let (tile_rows, tcols) = self.dims(tile);
        if tcols != cols || tile_rows == 0 || rows % tile_rows != 0 {
            return Err(Error::ShapeMismatch {
                op: "mul_tiled_rows",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[tile].shape().to_vec(),
            });
        }
        let mut data = self.bufs[a].data().to_vec();
        {
            let tv = self.bufs[tile].data();
            for r in 0..rows {
                let tr = r % tile_rows;
                for c in 0..cols {
                    data[r * cols + c] *= tv[tr * cols + c];
                }
            }
        }
        let out = self.alloc(Tensor::new(vec![rows, cols], data)?);
        self.ops.push(Op::MulTiledRows {
            a,
            tile,
            out,
            tile_rows,
            cols,
        });
        Ok(out)
    }

    /// Sum each consecutive group of `group` rows.
    pub fn sum_row_groups(&mut self, a: BufId, group: usize) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_row_groups",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: vec![group],
            });
        }
        let out_rows = rows / group;
        let mut data = vec![0.0; out_rows * cols];
        {
            let av = self.bufs[a].data();
            for r in 0..rows {
                let orow = r / group;
                for c in 0..cols {
                    data[orow * cols + c] += av[r * cols + c];
                }
            }
        }
        let out = self.alloc(Tensor::new(vec![out_rows, cols], data)?);
        self.ops.push(Op::SumRowGroups {
            a,
            out,
            group,
            cols,
        });
        Ok(out)
    }

    pub fn activation(&mut self, a: BufId, kind: Activation) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[a].data().iter().map(|&x| kind.apply(x)).collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::Activation { a, out, kind });
        Ok(out)
    }

    /// Self-normalizing dropout. Identity in inference mode or at rate 0.
    pub fn alpha_dropout(
        &mut self,
        a: BufId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BufId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "alpha dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let sat = ALPHA_DROPOUT_SATURATION;
        // Affine correction restoring mean 0 / variance 1 for unit-normalized inputs.
        let scale = (keep + sat * sat * keep * rate).powf(-0.5);
        let shift = -scale * rate * sat;
        let mask: Vec<bool> = (0..self.bufs[a].len())
            .map(|_| rng.random::<f64>() < keep)
            .collect();
        let data: Vec<f64> = self.bufs[a]
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| scale * (if m { x } else { sat }) + shift)
            .collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::AlphaDropout {
            a,
            out,
            mask,
            scale,
        });
        Ok(out)
    }

    pub fn concat_cols(&mut self, inputs: &[BufId]) -> Result<BufId> {
        if inputs.is_empty() {
            return Err(Error::Config("concat of zero inputs".into()));
        }
        let (rows, _) = self.dims(inputs[0]);
        let mut cols = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (r, c) = self.dims(id);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.bufs[inputs[0]].shape().to_vec(),
                    rhs: self.bufs[id].shape().to_vec(),
                });
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&id, &c) in inputs.iter().zip(&cols) {
            let v = self.bufs[id].data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let out = self.alloc(Tensor::new(vec![rows, total], data)?);
        self.ops.push(Op::ConcatCols {
            inputs: inputs.to_vec(),
            out,
            rows,
            cols,
        });
        Ok(out)
    }

    pub fn rowwise_dot(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        if self.dims(b) != (rows, cols) {
            return Err(Error::ShapeMismatch {
                op: "rowwise_dot",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[b].shape().to_vec(),
            });
        }
        let mut data = vec![0.0; rows];
        {
            let av = self.bufs[a].data();
            let bv = self.bufs[b].data();
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += av[r * cols + c] * bv[r * cols + c];
                }
                data[r] = acc;
            }
        }
        let out = self.alloc(Tensor::new(vec![rows, 1], data)?);
        self.ops.push(Op::RowwiseDot {
            a,
            b,
            out,
            rows,
            cols,
        });
        Ok(out)
    }

    pub fn clamp_min(&mut self, a: BufId, min: f64) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[a].data().iter().map(|&x| x.max(min)).collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::ClampMin { a, out, min });
        Ok(out)
    }

    pub fn row_sum(&mut self, a: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        let av = self.bufs[a].data();
        let data: Vec<f64> = (0..rows)
            .map(|r| av[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let out = self.alloc(Tensor::new(vec![rows, 1], data)?);
        self.ops.push(Op::RowSum { a, out, rows, cols });
        Ok(out)
    }

    pub fn div_row_broadcast(&mut self, a: BufId, s: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        if self.bufs[s].len() != rows {
            return Err(Error::ShapeMismatch {
                op: "div_row_broadcast",
                lhs: self.bufs[a].shape().to_vec(),
                rhs: self.bufs[s].shape().to_vec(),
            });
        }
        let mut data = self.bufs[a].data().to_vec();
        {
            let sv = self.bufs[s].data();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] /= sv[r];
                }
            }
        }
        let out = self.alloc(Tensor::new(vec![rows, cols], data)?);
        self.ops.push(Op::DivRowBroadcast {
            a,
            s,
            out,
            rows,
            cols,
        });
        Ok(out)
    }

    pub fn gather_cols(&mut self, a: BufId, indices: &[usize]) -> Result<BufId> {
        let (rows, cols) = self.dims(a);
        if indices.len() != rows || indices.iter().any(|&i| i >= cols) {
            return Err(Error::Data(format!(
                "gather indices invalid for shape [{rows}, {cols}]"
            )));
        }
        let av = self.bufs[a].data();
        let data: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| av[r * cols + i])
            .collect();
        let out = self.alloc(Tensor::new(vec![rows, 1], data)?);
        self.ops.push(Op::GatherCols {
            a,
            out,
            indices: indices.to_vec(),
            cols,
        });
        Ok(out)
    }

    pub fn ln_eps(&mut self, a: BufId, eps: f64) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[a].data().iter().map(|&x| (x + eps).ln()).collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::LnEps { a, out, eps });
        Ok(out)
    }

    pub fn mean_all(&mut self, a: BufId) -> Result<BufId> {
        let n = self.bufs[a].len();
        let mean = self.bufs[a].data().iter().sum::<f64>() / n as f64;
        let out = self.alloc(Tensor::scalar(mean));
        self.ops.push(Op::MeanAll { a, out, n });
        Ok(out)
    }

    pub fn scale(&mut self, a: BufId, factor: f64) -> Result<BufId> {
        let data: Vec<f64> = self.bufs[a].data().iter().map(|&x| factor * x).collect();
        let shape = self.bufs[a].shape().to_vec();
        let out = self.alloc(Tensor::new(shape, data)?);
        self.ops.push(Op::Scale { a, out, factor });
        Ok(out)
    }

    /// Fully connected layer: act(x @ w + bias).
    pub fn dense(
        &mut self,
        x: BufId,
        w: BufId,
        bias: Option<BufId>,
        act: Activation,
    ) -> Result<BufId> {
        let mut h = self.matmul(x, w)?;
        if let Some(b) = bias {
            h = self.add_row_broadcast(h, b)?;
        }
        if act == Activation::Identity {
            Ok(h)
        } else {
            self.activation(h, act)
        }
    }

    /// Mean over rows of the summed per-classifier binary cross-entropy.
    /// `targets` is row-major [rows, cols] of {0, 1}.
    pub fn bce_mean(&mut self, probs: BufId, targets: Vec<f64>) -> Result<BufId> {
        let (rows, cols) = self.dims(probs);
        if targets.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "bce_mean",
                lhs: self.bufs[probs].shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let pv = self.bufs[probs].data();
        let mut total = 0.0;
        for (p, t) in pv.iter().zip(&targets) {
            total -= t * (p + LOG_EPS).ln() + (1.0 - t) * (1.0 - p + LOG_EPS).ln();
        }
        let loss = total / rows as f64;
        let out = self.alloc(Tensor::scalar(loss));
        self.ops.push(Op::BceMean {
            probs,
            out,
            targets,
            rows,
        });
        Ok(out)
    }

    // -- backward ------------------------------------------------------------

    fn accumulate(&mut self, id: BufId, delta: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    /// Accumulate adjoints for every buffer reachable from `loss`.
    ///
    /// `loss` must be a scalar buffer. A second call without a fresh forward
    /// pass is an error: the tape is consumed.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Oracle(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.bufs[loss].len() != 1 {
            return Err(Error::Data(format!(
                "backward seed must be scalar, got shape {:?}",
                self.bufs[loss].shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![1.0]);

        // The tape is consumed by backward; take the op list outright so the
        // adjoint loop can borrow buffers and gradients freely.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let (m, k, n) = (*m, *k, *n);
                // d_a = d_out @ b^T
                let bv = self.bufs[*b].data().to_vec();
                let mut d_a = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            d_a[i * k + p] += d * bv[p * n + j];
                        }
                    }
                }
                self.accumulate(*a, &d_a);
                // d_b = a^T @ d_out
                let av = self.bufs[*a].data().to_vec();
                let mut d_b = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            d_b[p * n + j] += x * d_out[i * n + j];
                        }
                    }
                }
                self.accumulate(*b, &d_b);
            }
            Op::AddRowBroadcast {
                a,
                bias,
                out,
                rows,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                self.accumulate(*a, &d_out);
                let mut d_bias = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d_bias[c] += d_out[r * cols + c];
                    }
                }
                self.accumulate(*bias, &d_bias);
            }
            Op::AddElem { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            Op::MulElem { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.bufs[*b].data())
                    .map(|(d, y)| d * y)
                    .collect();
                let d_b: Vec<f64> = d_out
                    .iter()
                    .zip(self.bufs[*a].data())
                    .map(|(d, x)| d * x)
                    .collect();
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            Op::MulTiledRows {
                a,
                tile,
                out,
                tile_rows,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let rows = self.bufs[*a].len() / cols;
                let tv = self.bufs[*tile].data().to_vec();
                let av = self.bufs[*a].data().to_vec();
                let mut d_a = vec![0.0; rows * cols];
                let mut d_tile = vec![0.0; tile_rows * cols];
                for r in 0..rows {
                    let tr = r % tile_rows;
                    for c in 0..*cols {
                        d_a[r * cols + c] = d_out[r * cols + c] * tv[tr * cols + c];
                        d_tile[tr * cols + c] += d_out[r * cols + c] * av[r * cols + c];
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*tile, &d_tile);
            }
            Op::SumRowGroups { a, out, group, cols } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let rows = self.bufs[*a].len() / cols;
                let mut d_a = vec![0.0; rows * cols];
                for r in 0..rows {
                    let orow = r / group;
                    for c in 0..*cols {
                        d_a[r * cols + c] = d_out[orow * cols + c];
                    }
                }
                self.accumulate(*a, &d_a);
            }
            Op::Activation { a, out, kind } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.bufs[*a].data().iter().zip(self.bufs[*out].data()))
                    .map(|(d, (&x, &y))| d * kind.derivative(x, y))
                    .collect();
                self.accumulate(*a, &d_a);
            }
            Op::AlphaDropout { a, out, mask, scale } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(mask)
                    .map(|(d, &m)| if m { d * scale } else { 0.0 })
                    .collect();
                self.accumulate(*a, &d_a);
            }
            Op::ConcatCols {
                inputs,
                out,
                rows,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let total: usize = cols.iter().sum();
                let mut offset = 0;
                for (&id, &c) in inputs.iter().zip(cols) {
                    let mut d = vec![0.0; rows * c];
                    for r in 0..*rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&d_out[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(id, &d);
                    offset += c;
                }
            }
            Op::RowwiseDot {
                a,
                b,
                out,
                rows,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let av = self.bufs[*a].data().to_vec();
                let bv = self.bufs[*b].data().to_vec();
                let mut d_a = vec![0.0; rows * cols];
                let mut d_b = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d_a[r * cols + c] = d_out[r] * bv[r * cols + c];
                        d_b[r * cols + c] = d_out[r] * av[r * cols + c];
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            Op::ClampMin { a, out, min } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.bufs[*a].data())
                    .map(|(d, &x)| if x > *min { *d } else { 0.0 })
                    .collect();
                self.accumulate(*a, &d_a);
            }
            Op::RowSum { a, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let mut d_a = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d_a[r * cols + c] = d_out[r];
                    }
                }
                self.accumulate(*a, &d_a);
            }
            Op::DivRowBroadcast {
                a,
                s,
                out,
                rows,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let sv = self.bufs[*s].data().to_vec();
                let av = self.bufs[*a].data().to_vec();
                let mut d_a = vec![0.0; rows * cols];
                let mut d_s = vec![0.0; *rows];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d_a[r * cols + c] = d_out[r * cols + c] / sv[r];
                        d_s[r] -= d_out[r * cols + c] * av[r * cols + c] / (sv[r] * sv[r]);
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*s, &d_s);
            }
            Op::GatherCols {
                a,
                out,
                indices,
                cols,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let mut d_a = vec![0.0; indices.len() * cols];
                for (r, &i) in indices.iter().enumerate() {
                    d_a[r * cols + i] = d_out[r];
                }
                self.accumulate(*a, &d_a);
            }
            Op::LnEps { a, out, eps } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.bufs[*a].data())
                    .map(|(d, &x)| d / (x + eps))
                    .collect();
                self.accumulate(*a, &d_a);
            }
            Op::MeanAll { a, out, n } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d = d_out[0] / *n as f64;
                let d_a = vec![d; *n];
                self.accumulate(*a, &d_a);
            }
            Op::Scale { a, out, factor } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let d_a: Vec<f64> = d_out.iter().map(|d| d * factor).collect();
                self.accumulate(*a, &d_a);
            }
            Op::BceMean {
                probs,
                out,
                targets,
                rows,
            } => {
                let Some(d_out) = self.grads[*out].clone() else {
                    return;
                };
                let g = d_out[0] / *rows as f64;
                let d_p: Vec<f64> = self.bufs[*probs]
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| g * (-t / (p + LOG_EPS) + (1.0 - t) / (1.0 - p + LOG_EPS)))
                    .collect();
                self.accumulate(*probs, &d_p);
            }
        }
    }
}
