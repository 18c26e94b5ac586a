//! Wengert tape: primitive ops recorded forward, adjoints replayed in reverse.
//!
//! Values live in a node arena owned by the tape; a [`Var`] is a cheap handle
//! into it. Gradients accumulate additively across fan-out, and a node is
//! visited exactly once per backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Statistics source for the per-channel affine normalization op.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Normalize with per-call statistics computed over the rows.
    Batch { eps: f64 },
    /// Normalize with externally supplied (running) statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// Geometry of a k x k convolution over a `[H*W, C]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument("conv kernel and stride must be positive".into()));
        }
        if self.height + 2 * self.pad < self.kernel || self.width + 2 * self.pad < self.kernel {
            return Err(Error::InvalidArgument(format!(
                "kernel {} exceeds padded input {}x{}",
                self.kernel,
                self.height + 2 * self.pad,
                self.width + 2 * self.pad
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    Sum { a: Var },
    MeanRows { a: Var },
    RowSoftmax { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    /// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
    /// `mean`/`var` are the statistics actually used, saved at forward time.
    ChannelNorm { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64>, batch: bool },
    Im2Col { x: Var, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Ordered record of executed primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Snapshot a value as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).value.clone())
            .expect("tape nodes hold consistent shapes")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch { op, detail: format!("expected 2-D, got {other:?}") }),
        }
    }

    // ── Leafs ─────────────────────────────────────────────────────────

    /// Lift a tensor onto the tape. Data is snapshotted; later mutation of
    /// the source tensor does not affect the recorded value.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    // ── Primitive operations ──────────────────────────────────────────

    /// c[i,j] = sum_t a[i,t] * b[t,j]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{k}] x [{k2},{n}]: inner extents differ"),
            });
        }
        let value = mm_nn(&self.node(a).value, &self.node(b).value, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let value = transpose(&self.node(a).value, r, c);
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Transpose { a }, vec![c, r], value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        let value =
            self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x + y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, value, rg))
    }

    /// Broadcast-add a length-`c` row vector to every row of `[n, c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.dims2(a, "add_row")?;
        if self.node(row).shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("row {:?} vs [{c}]", self.node(row).shape),
            });
        }
        let rv = &self.node(row).value;
        let value = self
            .node(a)
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        let rg = self.node(a).requires_grad || self.node(row).requires_grad;
        Ok(self.push(Op::AddRow { a, row }, vec![n, c], value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        let value =
            self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x * y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.node(a).value.iter().map(|x| x * factor).collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Scale { a, factor }, shape, value, rg)
    }

    /// Elementwise max(x, 0); the subgradient at 0 is taken as 0. NaN
    /// propagates (f64::max would silently scrub it, masking divergence).
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .node(a)
            .value
            .iter()
            .map(|&x| if x.is_nan() { x } else { x.max(0.0) })
            .collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Relu { a }, shape, value, rg)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.node(a).value.iter().sum()];
        let rg = self.node(a).requires_grad;
        self.push(Op::Sum { a }, vec![1], value, rg)
    }

    /// Column means of `[n, c]`, as `[1, c]`. This is global average pooling
    /// when rows are spatial positions.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2(a, "mean_rows")?;
        let mut value = vec![0.0; c];
        for row in self.node(a).value.chunks(c) {
            for (acc, x) in value.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for acc in &mut value {
            *acc /= n as f64;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::MeanRows { a }, vec![1, c], value, rg))
    }

    /// Row-wise softmax of `[n, c]`, numerically stabilized.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2(a, "row_softmax")?;
        let mut value = Vec::with_capacity(n * c);
        for row in self.node(a).value.chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            value.extend(exps.iter().map(|e| e / total));
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::RowSoftmax { a }, vec![n, c], value, rg))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against `n` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = 0.0;
        for (row, &label) in self.node(logits).value.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = vec![total / n as f64];
        let rg = self.node(logits).requires_grad;
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec() }, vec![1], value, rg))
    }

    /// Per-channel affine normalization of `[n, c]`:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// With [`NormStats::Batch`] the statistics are computed over the rows
    /// (biased variance) and saved on the node; [`batch_stats`](Self::batch_stats)
    /// exposes them so callers can maintain running estimates.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats) -> Result<Var> {
        let (n, c) = self.dims2(x, "channel_norm")?;
        if self.node(gamma).shape != [c] || self.node(beta).shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs [{c}]",
                    self.node(gamma).shape,
                    self.node(beta).shape
                ),
            });
        }
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                for row in self.node(x).value.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; c];
                for row in self.node(x).value.chunks(c) {
                    for ((vr, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *vr += d * d;
                    }
                }
                for vr in &mut var {
                    *vr /= n as f64;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "channel_norm",
                        detail: format!("fixed stats of length {}/{} vs {c}", mean.len(), var.len()),
                    });
                }
                (mean, var, eps, false)
            }
        };
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("norm eps must be positive, got {eps}")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = &self.node(gamma).value;
        let bv = &self.node(beta).value;
        let mut value = Vec::with_capacity(n * c);
        for row in self.node(x).value.chunks(c) {
            for (j, v) in row.iter().enumerate() {
                value.push(gv[j] * (v - mean[j]) * inv_std[j] + bv[j]);
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(Op::ChannelNorm { x, gamma, beta, eps, mean, var, batch }, vec![n, c], value, rg))
    }

    /// Batch statistics saved by a [`channel_norm`](Self::channel_norm) node,
    /// if it was computed in batch mode.
    pub fn batch_stats(&self, normed: Var) -> Option<(&[f64], &[f64])> {
        match &self.node(normed).op {
            Op::ChannelNorm { mean, var, batch: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Statistics of every batch-mode norm node, in recording order.
    pub fn batch_norm_stats_in_order(&self) -> Vec<(&[f64], &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::ChannelNorm { mean, var, batch: true, .. } => {
                    Some((mean.as_slice(), var.as_slice()))
                }
                _ => None,
            })
            .collect()
    }

    /// Unfold k x k patches of a `[H*W, C]` map into `[Ho*Wo, k*k*C]` rows,
    /// zero-padded at the borders. A convolution is `im2col` then `matmul`
    /// against a `[k*k*C, Cout]` weight.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        geom.validate()?;
        let (rows, c) = self.dims2(x, "im2col")?;
        if rows != geom.height * geom.width || c != geom.in_channels {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                detail: format!(
                    "input [{rows},{c}] vs geometry {}x{}x{}",
                    geom.height, geom.width, geom.in_channels
                ),
            });
        }
        let mut value = vec![0.0; geom.out_positions() * geom.patch_len()];
        let xv = &self.node(x).value;
        for_each_patch_element(&geom, |out_idx, in_idx| {
            value[out_idx] = xv[in_idx];
        });
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Op::Im2Col { x, geom },
            vec![geom.out_positions(), geom.patch_len()],
            value,
            rg,
        ))
    }

    // ── Backward pass ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Replays every recorded node at
    /// most once, in reverse order; gradients for fan-out accumulate
    /// additively. Results are queried with [`grad`](Self::grad).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_node = self.node(output);
        if out_node.value.len() != 1 {
            return Err(Error::NonScalarOutput(out_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let d = grads[id].clone().expect("checked above");
            self.adjoint(Var(id), &d, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient accumulated for a var by the last [`backward`](Self::backward)
    /// call; `None` if no gradient flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy the accumulated gradient into a tensor's `grad` slot.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) if g.len() == target.len() => {
                target.set_grad(Some(g.to_vec()));
                Ok(())
            }
            Some(g) => Err(Error::ShapeMismatch {
                op: "write_grad",
                detail: format!("gradient length {} vs tensor length {}", g.len(), target.len()),
            }),
            None => {
                target.set_grad(None);
                Ok(())
            }
        }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn accumulate_if_needed(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.node(v).requires_grad {
            Self::accumulate(grads, v, &delta);
        }
    }

    fn adjoint(&self, out: Var, d: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[out.0].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                let n = self.node(b).shape[1];
                if self.node(a).requires_grad {
                    // dA = dC . B^T
                    let da = mm_nt(d, &self.node(b).value, m, n, k);
                    Self::accumulate(grads, a, &da);
                }
                if self.node(b).requires_grad {
                    // dB = A^T . dC
                    let db = mm_tn(&self.node(a).value, d, m, k, n);
                    Self::accumulate(grads, b, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                self.accumulate_if_needed(grads, a, transpose(d, c, r));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate_if_needed(grads, a, d.to_vec());
                self.accumulate_if_needed(grads, b, d.to_vec());
            }
            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                let c = self.node(row).shape[0];
                self.accumulate_if_needed(grads, a, d.to_vec());
                if self.node(row).requires_grad {
                    let mut dr = vec![0.0; c];
                    for chunk in d.chunks(c) {
                        for (acc, x) in dr.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    Self::accumulate(grads, row, &dr);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.node(a).requires_grad {
                    let da: Vec<f64> =
                        d.iter().zip(&self.node(b).value).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, a, &da);
                }
                if self.node(b).requires_grad {
                    let db: Vec<f64> =
                        d.iter().zip(&self.node(a).value).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                self.accumulate_if_needed(grads, a, d.iter().map(|x| x * factor).collect());
            }
            Op::Relu { a } => {
                let a = *a;
                if self.node(a).requires_grad {
                    let da: Vec<f64> = d
                        .iter()
                        .zip(&self.node(a).value)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, a, &da);
                }
            }
            Op::Sum { a } => {
                let a = *a;
                let n = self.node(a).value.len();
                self.accumulate_if_needed(grads, a, vec![d[0]; n]);
            }
            Op::MeanRows { a } => {
                let a = *a;
                let (n, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                let inv = 1.0 / n as f64;
                let mut da = vec![0.0; n * c];
                for row in da.chunks_mut(c) {
                    for (x, g) in row.iter_mut().zip(d) {
                        *x = g * inv;
                    }
                }
                self.accumulate_if_needed(grads, a, da);
            }
            Op::RowSoftmax { a } => {
                let a = *a;
                let c = self.nodes[out.0].shape[1];
                let s = &self.nodes[out.0].value;
                let mut da = vec![0.0; s.len()];
                for ((da_row, s_row), d_row) in
                    da.chunks_mut(c).zip(s.chunks(c)).zip(d.chunks(c))
                {
                    let dot: f64 = s_row.iter().zip(d_row).map(|(x, y)| x * y).sum();
                    for ((out, &sv), &dv) in da_row.iter_mut().zip(s_row).zip(d_row) {
                        *out = sv * (dv - dot);
                    }
                }
                self.accumulate_if_needed(grads, a, da);
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let (n, k) = (self.node(logits).shape[0], self.node(logits).shape[1]);
                if self.node(logits).requires_grad {
                    let scale = d[0] / n as f64;
                    let mut dl = vec![0.0; n * k];
                    for ((dl_row, row), &label) in
                        dl.chunks_mut(k).zip(self.node(logits).value.chunks(k)).zip(labels)
                    {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for (out, e) in dl_row.iter_mut().zip(&exps) {
                            *out = e / total * scale;
                        }
                        dl_row[label] -= scale;
                    }
                    Self::accumulate(grads, logits, &dl);
                }
            }
            Op::ChannelNorm { x, gamma, beta, eps, mean, var, batch } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c) = (self.node(x).shape[0], self.node(x).shape[1]);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xv = &self.node(x).value;
                // x_hat recomputed from saved statistics.
                let x_hat = |i: usize, j: usize| (xv[i * c + j] - mean[j]) * inv_std[j];

                if self.node(beta).requires_grad {
                    let mut db = vec![0.0; c];
                    for row in d.chunks(c) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    Self::accumulate(grads, beta, &db);
                }
                if self.node(gamma).requires_grad {
                    let mut dg = vec![0.0; c];
                    for (i, row) in d.chunks(c).enumerate() {
                        for (j, g) in row.iter().enumerate() {
                            dg[j] += g * x_hat(i, j);
                        }
                    }
                    Self::accumulate(grads, gamma, &dg);
                }
                if self.node(x).requires_grad {
                    let gv = &self.node(gamma).value;
                    let mut dx = vec![0.0; n * c];
                    if *batch {
                        // Statistics depend on x: standard batch-norm adjoint.
                        let inv_n = 1.0 / n as f64;
                        let mut d_mean = vec![0.0; c];
                        let mut d_dot = vec![0.0; c];
                        for (i, row) in d.chunks(c).enumerate() {
                            for (j, g) in row.iter().enumerate() {
                                d_mean[j] += g;
                                d_dot[j] += g * x_hat(i, j);
                            }
                        }
                        for j in 0..c {
                            d_mean[j] *= inv_n;
                            d_dot[j] *= inv_n;
                        }
                        for i in 0..n {
                            for j in 0..c {
                                dx[i * c + j] = gv[j]
                                    * inv_std[j]
                                    * (d[i * c + j] - d_mean[j] - x_hat(i, j) * d_dot[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..c {
                                dx[i * c + j] = d[i * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    Self::accumulate(grads, x, &dx);
                }
            }
            Op::Im2Col { x, geom } => {
                let (x, geom) = (*x, *geom);
                if self.node(x).requires_grad {
                    let mut dx = vec![0.0; geom.height * geom.width * geom.in_channels];
                    for_each_patch_element(&geom, |out_idx, in_idx| {
                        dx[in_idx] += d[out_idx];
                    });
                    Self::accumulate(grads, x, &dx);
                }
            }
        }
    }
}

/// Visit every (patch element, source element) pair of an im2col unfolding.
/// Out-of-bounds (padding) elements are skipped, leaving zeros in place.
fn for_each_patch_element(geom: &ConvGeom, mut visit: impl FnMut(usize, usize)) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (k, c) = (geom.kernel, geom.in_channels);
    let patch = geom.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let out_base = (oy * ow + ox) * patch;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let in_base = (iy as usize * geom.width + ix as usize) * c;
                    let out_off = out_base + (ky * k + kx) * c;
                    for ch in 0..c {
                        visit(out_off + ch, in_base + ch);
                    }
                }
            }
        }
    }
}

// ── Dense kernels ──────────────────────────────────────────────────────

/// c[m,n] = a[m,k] . b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// c[m,k] = a[m,n] . b[k,n]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let b_row = &b[t * n..(t + 1) * n];
            out[i * k + t] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// c[k,n] = a[m,k]^T . b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let out_row = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(&t2(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_frozen_example() {
        // Expected values from the naive triple loop, by hand.
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(&t2(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 3]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let zero = tape.leaf(&Tensor::zeros(&[2]));
        let s = tape.add(a, zero).unwrap();
        assert_eq!(tape.value(s), &[1.0, 2.0]);

        let b = tape.leaf(&Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let half = tape.scale(b, 0.5);
        assert_eq!(tape.value(half), &[0.5, -1.0]);

        let c = tape.leaf(&Tensor::new(vec![3], vec![-1.0, 0.0, 3.0]).unwrap());
        let r = tape.relu(c);
        assert_eq!(tape.value(r), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // output = sum(x . x), x = [1, 2, 3] -> grad 2x = [2, 4, 6]
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_matmul_weight_grad_is_column_sums() {
        // d/dW sum(X.W): dW[t, j] = sum_i x[i, t], replicated over j.
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let w = tape.leaf(&t2(&[vec![0.1, 0.2], vec![0.3, 0.4]]).with_requires_grad(true));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        // column sums of x: [9, 12]
        assert_eq!(tape.grad(w).unwrap(), &[9.0, 9.0, 12.0, 12.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        // y = x + x -> dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(5.0).with_requires_grad(true));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_diamond_graph() {
        // Fan out, transform each arm, merge: z = x*x + 3x -> dz/dx = 2x + 3.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(4.0).with_requires_grad(true));
        let left = tape.mul(x, x).unwrap();
        let right = tape.scale(x, 3.0);
        let z = tape.add(left, right).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[11.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![0.0, 1.0, 2.0], vec![-5.0, 3.0, 0.5]]));
        let s = tape.row_softmax(a).unwrap();
        for row in tape.value(s).chunks(3) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_zero_gamma_beta_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, -2.0], vec![3.0, 4.0]]));
        let gamma = tape.leaf(&Tensor::zeros(&[2]));
        let beta = tape.leaf(&Tensor::zeros(&[2]));
        let y = tape.channel_norm(x, gamma, beta, NormStats::Batch { eps: 1e-5 }).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_norm_batch_stats_exposed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 0.0], vec![3.0, 0.0]]));
        let gamma = tape.leaf(&Tensor::full(&[2], 1.0));
        let beta = tape.leaf(&Tensor::zeros(&[2]));
        let y = tape.channel_norm(x, gamma, beta, NormStats::Batch { eps: 1e-5 }).unwrap();
        let (mean, var) = tape.batch_stats(y).unwrap();
        assert_eq!(mean, &[2.0, 0.0]);
        assert_eq!(var, &[1.0, 0.0]);
    }

    #[test]
    fn im2col_known_patch() {
        // 2x2 single-channel input, k=2, stride 1, no pad -> one patch, row-major.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let geom =
            ConvGeom { height: 2, width: 2, in_channels: 1, kernel: 2, stride: 1, pad: 0 };
        let p = tape.im2col(x, geom).unwrap();
        assert_eq!(tape.shape(p), &[1, 4]);
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_padding_zeroes() {
        // 1x1 input with k=3, pad 1: the single patch has the value centered.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 1], vec![7.0]).unwrap());
        let geom =
            ConvGeom { height: 1, width: 1, in_channels: 1, kernel: 3, stride: 1, pad: 1 };
        let p = tape.im2col(x, geom).unwrap();
        let mut expected = vec![0.0; 9];
        expected[4] = 7.0;
        assert_eq!(tape.value(p), expected.as_slice());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 4]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(loss)[0] - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_grad_leaves_are_skipped() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0)); // requires_grad = false
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
