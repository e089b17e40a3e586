//! Computation tape: forward operations and the reverse-mode backward pass.
//!
//! Nodes are appended in topological order (inputs always precede consumers),
//! so the backward pass is a single reverse sweep that visits each node exactly
//! once. Gradients accumulate by summation over every use site of a tensor.

use super::{Tensor, COSINE_NORM_EPS, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation, referencing input nodes by id.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBiasRow { x: TensorId, bias: TensorId },
    AddMaskCol { x: TensorId, mask: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    MaskedSoftmaxRows { x: TensorId, allowed: Vec<bool> },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    Conv2d { x: TensorId, kernel: TensorId, padding: usize },
    CosineRows { a: TensorId, b: TensorId },
    ConcatRows { xs: Vec<TensorId> },
    ConcatCols { xs: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    GatherRows { table: TensorId, ids: Vec<usize> },
    Reshape { x: TensorId },
    Sum { x: TensorId },
    NllLoss { probs: TensorId, targets: Vec<(usize, usize)> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered list of operations with their inputs and outputs.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input tensor. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Insert a constant (never receives gradients).
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
        )
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        self.value(id).dims2(op)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, p) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        Ok(self.out(vec![m, p], data, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        Ok(self.out(vec![n, m], data, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.out(shape, data, Op::Add { a, b }))
    }

    /// `x[m,n] + bias[n]`, the bias broadcast down the rows.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "add_bias_row")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: vec![m, n],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut data = Vec::with_capacity(m * n);
        for row in xd.chunks_exact(n) {
            for (v, b) in row.iter().zip(bd) {
                data.push(v + b);
            }
        }
        Ok(self.out(vec![m, n], data, Op::AddBiasRow { x, bias }))
    }

    /// `x[m,n] + mask[m,1]`, the column broadcast across all channels.
    pub fn add_mask_col(&mut self, x: TensorId, mask: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "add_mask_col")?;
        if self.value(mask).shape() != [m, 1] {
            return Err(Error::ShapeMismatch {
                op: "add_mask_col",
                lhs: vec![m, n],
                rhs: self.value(mask).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let md = self.value(mask).data();
        let mut data = Vec::with_capacity(m * n);
        for (i, row) in xd.chunks_exact(n).enumerate() {
            for v in row {
                data.push(v + md[i]);
            }
        }
        Ok(self.out(vec![m, n], data, Op::AddMaskCol { x, mask }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.out(shape, data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.out(shape, data, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.out(shape, data, Op::Relu { x })
    }

    /// Row softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&xd[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        Ok(self.out(vec![m, n], data, Op::SoftmaxRows { x }))
    }

    /// Row softmax restricted to positions where `allowed > 0.5`; disallowed
    /// entries come out exactly 0, as if their logits were -inf.
    pub fn masked_softmax_rows(&mut self, x: TensorId, allowed: &Tensor) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "masked_softmax_rows")?;
        if allowed.shape() != [m, n] {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: vec![m, n],
                rhs: allowed.shape().to_vec(),
            });
        }
        let mask: Vec<bool> = allowed.data().iter().map(|&v| v > 0.5).collect();
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let rmask = &mask[i * n..(i + 1) * n];
            if !rmask.iter().any(|&a| a) {
                return Err(Error::Numeric(format!(
                    "masked_softmax_rows: row {i} has no allowed positions"
                )));
            }
            let mx = row
                .iter()
                .zip(rmask)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                if rmask[j] {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= denom;
            }
        }
        Ok(self.out(vec![m, n], data, Op::MaskedSoftmaxRows { x, allowed: mask }))
    }

    /// Per-row layer normalization with affine gain/bias over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if d < 2 {
            return Err(Error::DegenerateDimension {
                op: "layer_norm",
                dim: d,
            });
        }
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![d],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        Ok(self.out(vec![m, d], data, Op::LayerNorm { x, gain, bias }))
    }

    /// 2D cross-correlation of `x[h,w,cin]` with `kernel[kh,kw,cin,cout]`.
    /// Odd kernels only; with `padding = (k-1)/2` the spatial shape is kept.
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, padding: usize) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::UnsupportedKernel { kh, kw });
        }
        if ks[2] != cin || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let oh = h + 2 * padding + 1 - kh;
        let ow = w + 2 * padding + 1 - kw;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut data = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = (oy * ow + ox) * cout;
                for ky in 0..kh {
                    let iy = (oy + ky).wrapping_sub(padding);
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx).wrapping_sub(padding);
                        if ix >= w {
                            continue;
                        }
                        let x_base = (iy * w + ix) * cin;
                        let k_base = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[x_base + ci];
                            let k_row = k_base + ci * cout;
                            for co in 0..cout {
                                data[o_base + co] += xv * kd[k_row + co];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.out(
            vec![oh, ow, cout],
            data,
            Op::Conv2d { x, kernel, padding },
        ))
    }

    /// Row-wise cosine similarity of two `[m,d]` tensors, producing `[m,1]`.
    /// Rows whose norm falls below 1e-12 yield 0.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, d) = self.dims2(a, "cosine_rows")?;
        if self.value(b).shape() != [m, d] {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: vec![m, d],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; m];
        for i in 0..m {
            let ra = &ad[i * d..(i + 1) * d];
            let rb = &bd[i * d..(i + 1) * d];
            let na = norm(ra);
            let nb = norm(rb);
            if na >= COSINE_NORM_EPS && nb >= COSINE_NORM_EPS {
                data[i] = dot(ra, rb) / (na * nb);
            }
        }
        Ok(self.out(vec![m, 1], data, Op::CosineRows { a, b }))
    }

    /// Stack 2D tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let (_, n) = self.dims2(xs[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (m, n2) = self.dims2(x, "concat_rows")?;
            if n2 != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.out(vec![rows, n], data, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Stack 2D tensors along the column (channel) axis.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let (m, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (m2, n) = self.dims2(x, "concat_cols")?;
            if m2 != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &n) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * n..(i + 1) * n]);
            }
        }
        Ok(self.out(vec![m, total], data, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.out(vec![len, n], data, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        Ok(self.out(vec![m, len], data, Op::SliceCols { x, start }))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (m, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= m) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} out of range for table of {m} rows"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        Ok(self.out(
            vec![ids.len(), d],
            data,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Same data, new shape. Row-major layout makes this a free view.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).data().to_vec();
        Ok(self.out(shape.to_vec(), data, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        self.out(vec![1], vec![s], Op::Sum { x })
    }

    /// Mean negative log likelihood of `probs[target]` over the given
    /// (position, token) pairs. Probabilities are floored at 1e-300 so the
    /// log stays finite.
    pub fn nll_loss(&mut self, probs: TensorId, targets: &[(usize, usize)]) -> Result<TensorId> {
        let (m, n) = self.dims2(probs, "nll_loss")?;
        if targets.is_empty() {
            return Err(Error::Config(
                "cross entropy: no counted target positions".into(),
            ));
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::ShapeMismatch {
                op: "nll_loss",
                lhs: vec![m, n],
                rhs: vec![r, c],
            });
        }
        let pd = self.value(probs).data();
        let mut total = 0.0;
        for &(r, c) in targets {
            total -= pd[r * n + c].max(1e-300).ln();
        }
        let loss = total / targets.len() as f64;
        Ok(self.out(
            vec![1],
            vec![loss],
            Op::NllLoss {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients land in the `grad` slot of every tensor that needs them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.value(loss).numel(),
            });
        }
        // A node needs a gradient if it is a requires_grad leaf or feeds one.
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf => self.nodes[i].tensor.requires_grad,
                op => op_inputs(op).iter().any(|id| needs[id.0]),
            };
        }
        if !needs[loss.0] {
            // Nothing differentiable below the loss; clear stale grads and stop.
            for node in &mut self.nodes {
                node.tensor.grad = None;
            }
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                // Source node: nothing to propagate, keep the grad for publish.
                grads[i] = Some(g);
                continue;
            }
            match &op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (m, k) = self.nodes[a.0].tensor.dims2("matmul")?;
                    let p = self.nodes[b.0].tensor.shape()[1];
                    if needs[a.0] {
                        // dA = g . B^T
                        let bd = self.nodes[b.0].tensor.data();
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            for j in 0..p {
                                let gv = g[i2 * p + j];
                                if gv != 0.0 {
                                    for q in 0..k {
                                        da[i2 * k + q] += gv * bd[q * p + j];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                    if needs[b.0] {
                        // dB = A^T . g
                        let ad = self.nodes[a.0].tensor.data();
                        let mut db = vec![0.0; k * p];
                        for i2 in 0..m {
                            for q in 0..k {
                                let av = ad[i2 * k + q];
                                if av != 0.0 {
                                    for j in 0..p {
                                        db[q * p + j] += av * g[i2 * p + j];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Transpose { x } => {
                    let (m, nn) = self.nodes[x.0].tensor.dims2("transpose")?;
                    let mut dx = vec![0.0; m * nn];
                    for i2 in 0..m {
                        for j in 0..nn {
                            dx[i2 * nn + j] = g[j * m + i2];
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::AddBiasRow { x, bias } => {
                    accumulate(&mut grads[x.0], &g);
                    if needs[bias.0] {
                        let nn = self.nodes[bias.0].tensor.numel();
                        let mut db = vec![0.0; nn];
                        for row in g.chunks_exact(nn) {
                            for (acc, gv) in db.iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                        accumulate(&mut grads[bias.0], &db);
                    }
                }
                Op::AddMaskCol { x, mask } => {
                    accumulate(&mut grads[x.0], &g);
                    if needs[mask.0] {
                        let m = self.nodes[mask.0].tensor.shape()[0];
                        let nn = g.len() / m;
                        let dm: Vec<f64> =
                            g.chunks_exact(nn).map(|row| row.iter().sum()).collect();
                        accumulate(&mut grads[mask.0], &dm);
                    }
                }
                Op::Mul { a, b } => {
                    if needs[a.0] {
                        let da = zip_map(&g, self.nodes[b.0].tensor.data(), |x, y| x * y);
                        accumulate(&mut grads[a.0], &da);
                    }
                    if needs[b.0] {
                        let db = zip_map(&g, self.nodes[a.0].tensor.data(), |x, y| x * y);
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Relu { x } => {
                    let dx = zip_map(&g, self.nodes[x.0].tensor.data(), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::SoftmaxRows { x } | Op::MaskedSoftmaxRows { x, .. } => {
                    // dx_j = y_j * (g_j - sum_k g_k y_k); masked entries have
                    // y = 0, which zeroes their gradient automatically.
                    let y = self.nodes[i].tensor.data();
                    let nn = self.nodes[i].tensor.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / nn {
                        let yr = &y[r * nn..(r + 1) * nn];
                        let gr = &g[r * nn..(r + 1) * nn];
                        let inner: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..nn {
                            dx[r * nn + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, d) = self.nodes[x.0].tensor.dims2("layer_norm")?;
                    let xd = self.nodes[x.0].tensor.data();
                    let gd = self.nodes[gain.0].tensor.data();
                    let mut dx = vec![0.0; m * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..m {
                        let row = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row);
                        // h_j = g_j * gain_j; dx = inv_std*(h - mean(h) - xhat*mean(h*xhat))
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let h = gr[j] * gd[j];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        mean_h /= d as f64;
                        mean_hx /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let h = gr[j] * gd[j];
                            dx[r * d + j] = inv_std * (h - mean_h - xhat * mean_hx);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                    if needs[gain.0] {
                        accumulate(&mut grads[gain.0], &dgain);
                    }
                    if needs[bias.0] {
                        accumulate(&mut grads[bias.0], &dbias);
                    }
                }
                Op::Conv2d { x, kernel, padding } => {
                    let xs = self.nodes[x.0].tensor.shape().to_vec();
                    let ks = self.nodes[kernel.0].tensor.shape().to_vec();
                    let (h, w, cin) = (xs[0], xs[1], xs[2]);
                    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
                    let os = self.nodes[i].tensor.shape().to_vec();
                    let (oh, ow) = (os[0], os[1]);
                    let xd = self.nodes[x.0].tensor.data();
                    let kd = self.nodes[kernel.0].tensor.data();
                    let mut dx = vec![0.0; h * w * cin];
                    let mut dk = vec![0.0; kh * kw * cin * cout];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o_base = (oy * ow + ox) * cout;
                            for ky in 0..kh {
                                let iy = (oy + ky).wrapping_sub(*padding);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx).wrapping_sub(*padding);
                                    if ix >= w {
                                        continue;
                                    }
                                    let x_base = (iy * w + ix) * cin;
                                    let k_base = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xv = xd[x_base + ci];
                                        let k_row = k_base + ci * cout;
                                        let mut dxv = 0.0;
                                        for co in 0..cout {
                                            let gv = g[o_base + co];
                                            dk[k_row + co] += gv * xv;
                                            dxv += gv * kd[k_row + co];
                                        }
                                        dx[x_base + ci] += dxv;
                                    }
                                }
                            }
                        }
                    }
                    if needs[x.0] {
                        accumulate(&mut grads[x.0], &dx);
                    }
                    if needs[kernel.0] {
                        accumulate(&mut grads[kernel.0], &dk);
                    }
                }
                Op::CosineRows { a, b } => {
                    let (m, d) = self.nodes[a.0].tensor.dims2("cosine_rows")?;
                    let ad = self.nodes[a.0].tensor.data();
                    let bd = self.nodes[b.0].tensor.data();
                    let mut da = vec![0.0; m * d];
                    let mut db = vec![0.0; m * d];
                    for r in 0..m {
                        let ra = &ad[r * d..(r + 1) * d];
                        let rb = &bd[r * d..(r + 1) * d];
                        let na = norm(ra);
                        let nb = norm(rb);
                        if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
                            continue; // output pinned to 0, no gradient
                        }
                        let c = dot(ra, rb) / (na * nb);
                        let gv = g[r];
                        for j in 0..d {
                            da[r * d + j] = gv * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                            db[r * d + j] = gv * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                        }
                    }
                    if needs[a.0] {
                        accumulate(&mut grads[a.0], &da);
                    }
                    if needs[b.0] {
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::ConcatRows { xs } => {
                    let mut offset = 0;
                    for &xid in xs {
                        let numel = self.nodes[xid.0].tensor.numel();
                        if needs[xid.0] {
                            accumulate(&mut grads[xid.0], &g[offset..offset + numel]);
                        }
                        offset += numel;
                    }
                }
                Op::ConcatCols { xs } => {
                    let m = self.nodes[i].tensor.shape()[0];
                    let total = self.nodes[i].tensor.shape()[1];
                    let mut offset = 0;
                    for &xid in xs {
                        let nn = self.nodes[xid.0].tensor.shape()[1];
                        if needs[xid.0] {
                            let mut dxi = vec![0.0; m * nn];
                            for r in 0..m {
                                dxi[r * nn..(r + 1) * nn].copy_from_slice(
                                    &g[r * total + offset..r * total + offset + nn],
                                );
                            }
                            accumulate(&mut grads[xid.0], &dxi);
                        }
                        offset += nn;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (m, nn) = self.nodes[x.0].tensor.dims2("slice_rows")?;
                    let mut dx = vec![0.0; m * nn];
                    dx[start * nn..start * nn + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::SliceCols { x, start } => {
                    let (m, nn) = self.nodes[x.0].tensor.dims2("slice_cols")?;
                    let len = self.nodes[i].tensor.shape()[1];
                    let mut dx = vec![0.0; m * nn];
                    for r in 0..m {
                        dx[r * nn + start..r * nn + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::GatherRows { table, ids } => {
                    let (m, d) = self.nodes[table.0].tensor.dims2("gather_rows")?;
                    let mut dt = vec![0.0; m * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], &dt);
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads[x.0], &g);
                }
                Op::Sum { x } => {
                    let numel = self.nodes[x.0].tensor.numel();
                    let dx = vec![g[0]; numel];
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::NllLoss { probs, targets } => {
                    let nn = self.nodes[probs.0].tensor.shape()[1];
                    let pd = self.nodes[probs.0].tensor.data();
                    let mut dp = vec![0.0; pd.len()];
                    let scale = g[0] / targets.len() as f64;
                    for &(r, c) in targets {
                        dp[r * nn + c] -= scale / pd[r * nn + c].max(1e-300);
                    }
                    accumulate(&mut grads[probs.0], &dp);
                }
            }
        }

        // Publish gradients on the tensors themselves.
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            node.tensor.grad = if needs[idx] { grads[idx].take() } else { None };
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::Mul { a, b }
        | Op::CosineRows { a, b } => vec![*a, *b],
        Op::AddBiasRow { x, bias } => vec![*x, *bias],
        Op::AddMaskCol { x, mask } => vec![*x, *mask],
        Op::Transpose { x }
        | Op::Scale { x, .. }
        | Op::Relu { x }
        | Op::SoftmaxRows { x }
        | Op::MaskedSoftmaxRows { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::Reshape { x }
        | Op::Sum { x } => vec![*x],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
        Op::ConcatRows { xs } | Op::ConcatCols { xs } => xs.clone(),
        Op::GatherRows { table, .. } => vec![*table],
        Op::NllLoss { probs, .. } => vec![*probs],
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// Plain row-major matrix multiply, i-k-j loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for q in 0..k {
            let av = a[i * k + q];
            if av != 0.0 {
                let b_row = &b[q * p..(q + 1) * p];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}
