use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{kernels, DiffError, Tensor, PROB_CLIP};

/// Forward-pass mode. Train mode normalizes by batch statistics and reports
/// them for the running-average update; eval mode uses the stored running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Learned scale/shift plus running statistics for one batch-normalized
/// feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.9,
            epsilon: 1e-5,
            initialized: false,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// running <- momentum * running + (1 - momentum) * batch_stat
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.initialized = true;
    }
}

/// Per-feature batch statistics produced by a train-mode batchnorm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Input { pattern: Option<Vec<Vec<usize>>> },
    Constant,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    BceMean { p: NodeId, y: NodeId },
    CceMean { q: NodeId, y: NodeId },
    AbsMean { pred: NodeId, y: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape. Nodes are recorded in topological order, so
/// reverse iteration is a valid reverse-mode sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    /// Register a named parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push((name.into(), id));
        id
    }

    /// Register an input leaf. `pattern`, when given, lists the nonzero
    /// column indices of each row; downstream affine ops exploit it.
    pub fn input(&mut self, value: Tensor, pattern: Option<Vec<Vec<usize>>>) -> NodeId {
        if let Some(p) = &pattern {
            debug_assert_eq!(p.len(), value.rows());
        }
        self.push(Op::Input { pattern }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// y = x W^T + b with W of shape `[m, n]` and rows of x of length n.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        let (rows, n) = {
            let xv = self.value(x);
            (xv.rows(), xv.cols())
        };
        let (m, wn) = {
            let wv = self.value(w);
            if wv.shape().len() != 2 {
                return Err(DiffError::NotTwoDimensional { op: "linear", shape: wv.shape().to_vec() });
            }
            (wv.shape()[0], wv.shape()[1])
        };
        if wn != n {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(DiffError::ShapeMismatch {
                    op: "linear bias",
                    left: vec![m],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; rows * m];
        {
            let xv = self.value(x);
            let pattern = self.input_pattern(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            kernels::linear_forward(xv.data(), pattern, wv, bv, &mut out, n, m);
        }
        let shape = if self.value(x).shape().len() < 2 { vec![m] } else { vec![rows, m] };
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_parts(shape, out)))
    }

    fn input_pattern(&self, id: NodeId) -> Option<&[Vec<usize>]> {
        match &self.nodes[id.0].op {
            Op::Input { pattern: Some(p) } => Some(p.as_slice()),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        // NaN must survive the rectifier so a poisoned activation reaches the
        // loss instead of being silently zeroed.
        let out: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| if v.is_nan() || v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Relu { x }, Tensor::from_parts(shape, out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Sigmoid { x }, Tensor::from_parts(shape, out))
    }

    /// Row-wise softmax over the trailing dimension, stabilized by max
    /// subtraction.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (row, out_row) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out_row.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
            // Non-finite rows pass through so the caller can diagnose them
            // at the loss; finite rows must normalize exactly.
            debug_assert!(
                out_row.iter().any(|v| !v.is_finite())
                    || (out_row.iter().sum::<f64>() - 1.0).abs() < 1e-9
            );
        }
        let shape = xv.shape().to_vec();
        self.push(Op::Softmax { x }, Tensor::from_parts(shape, out))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "hadamard",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Hadamard { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale { x, factor }, Tensor::from_parts(shape, out))
    }

    /// Batch normalization over `[batch, features]`. In train mode the batch
    /// statistics are returned so the caller can fold them into the running
    /// averages; eval mode requires initialized running statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats>), DiffError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(DiffError::NotTwoDimensional { op: "batchnorm", shape: xv.shape().to_vec() });
        }
        let (rows, m) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(DiffError::ShapeMismatch {
                op: "batchnorm",
                left: xv.shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let eps = state.epsilon;
        let (mean, var) = match mode {
            Mode::Train => {
                if rows == 0 {
                    return Err(DiffError::EmptyBatch);
                }
                let mut mean = vec![0.0; m];
                for row in xv.data().chunks(m) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                for acc in mean.iter_mut() {
                    *acc /= rows as f64;
                }
                let mut var = vec![0.0; m];
                for row in xv.data().chunks(m) {
                    for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - mu;
                        *acc += d * d;
                    }
                }
                for acc in var.iter_mut() {
                    *acc /= rows as f64;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(DiffError::BatchNormUninitialized);
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * m];
        for (row, xh_row) in xv.data().chunks(m).zip(xhat.chunks_mut(m)) {
            for (((xh, &v), mu), is) in xh_row.iter_mut().zip(row).zip(&mean).zip(&inv_std) {
                *xh = (v - mu) * is;
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![0.0; rows * m];
        for (xh_row, out_row) in xhat.chunks(m).zip(out.chunks_mut(m)) {
            for (((o, &xh), g), b) in out_row.iter_mut().zip(xh_row).zip(&gv).zip(&bv) {
                *o = g * xh + b;
            }
        }
        let stats = match mode {
            Mode::Train => Some(BatchStats { mean, var }),
            Mode::Eval => None,
        };
        let cache = BnCache { mode, xhat, inv_std };
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, cache },
            Tensor::from_parts(vec![rows, m], out),
        );
        Ok((id, stats))
    }

    /// Mean binary cross-entropy; `y` entries must be exactly 0 or 1 and `p`
    /// is clamped to `[1e-7, 1 - 1e-7]` before the logarithm.
    pub fn bce_mean(&mut self, p: NodeId, y: NodeId) -> Result<NodeId, DiffError> {
        if self.value(p).len() != self.value(y).len() {
            return Err(DiffError::ShapeMismatch {
                op: "bce",
                left: self.value(p).shape().to_vec(),
                right: self.value(y).shape().to_vec(),
            });
        }
        for (row, &t) in self.value(y).data().iter().enumerate() {
            if t != 0.0 && t != 1.0 {
                return Err(DiffError::TargetNotBinary { row, value: t });
            }
        }
        let n = self.value(p).len() as f64;
        let mut total = 0.0;
        for (&pv, &t) in self.value(p).data().iter().zip(self.value(y).data()) {
            let pc = pv.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        Ok(self.push(Op::BceMean { p, y }, Tensor::scalar(total / n)))
    }

    /// Mean categorical cross-entropy; target rows must lie on the simplex.
    pub fn cce_mean(&mut self, q: NodeId, y: NodeId) -> Result<NodeId, DiffError> {
        if self.value(q).shape() != self.value(y).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "cce",
                left: self.value(q).shape().to_vec(),
                right: self.value(y).shape().to_vec(),
            });
        }
        let cols = self.value(y).cols();
        for (row, y_row) in self.value(y).data().chunks(cols).enumerate() {
            let sum: f64 = y_row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || y_row.iter().any(|&v| v < -1e-12) {
                return Err(DiffError::TargetNotSimplex { row, sum });
            }
        }
        let rows = self.value(q).rows() as f64;
        let mut total = 0.0;
        for (&qv, &t) in self.value(q).data().iter().zip(self.value(y).data()) {
            if t != 0.0 {
                let qc = qv.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                total -= t * qc.ln();
            }
        }
        Ok(self.push(Op::CceMean { q, y }, Tensor::scalar(total / rows)))
    }

    /// Mean absolute error.
    pub fn abs_mean(&mut self, pred: NodeId, y: NodeId) -> Result<NodeId, DiffError> {
        if self.value(pred).len() != self.value(y).len() {
            return Err(DiffError::ShapeMismatch {
                op: "abs",
                left: self.value(pred).shape().to_vec(),
                right: self.value(y).shape().to_vec(),
            });
        }
        let n = self.value(pred).len() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(self.push(Op::AbsMean { pred, y }, Tensor::scalar(total / n)))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients are always
    /// accumulated; input-leaf gradients only when `input_grads` is set (the
    /// explanation path needs them, training does not pay for them).
    pub fn backward(&self, loss: NodeId, input_grads: bool) -> Result<Gradients, DiffError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(DiffError::LossNotScalar { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Param | Op::Input { .. } | Op::Constant => {}
                Op::Linear { x, w, b } => {
                    let (n, m) = {
                        let wv = self.value(*w);
                        (wv.shape()[1], wv.shape()[0])
                    };
                    let xv = self.value(*x);
                    let rows = xv.rows();
                    if self.wants_grad(*x, input_grads) {
                        let mut dx = vec![0.0; rows * n];
                        kernels::linear_grad_input(g.data(), self.value(*w).data(), &mut dx, n, m);
                        self.accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx), input_grads);
                    }
                    let mut dw = vec![0.0; m * n];
                    kernels::linear_grad_weight(g.data(), xv.data(), self.input_pattern(*x), &mut dw, n, m);
                    self.accumulate(&mut grads, *w, Tensor::from_parts(vec![m, n], dw), input_grads);
                    if let Some(b) = b {
                        let mut db = vec![0.0; m];
                        kernels::bias_grad(g.data(), &mut db, m);
                        self.accumulate(&mut grads, *b, Tensor::from_parts(vec![m], db), input_grads);
                    }
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::from_parts(shape, dx), input_grads);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect();
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::from_parts(shape, dx), input_grads);
                }
                Op::Softmax { x } => {
                    let y = self.nodes[idx].value.data();
                    let cols = self.nodes[idx].value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((y_row, g_row), dx_row) in
                        y.chunks(cols).zip(g.data().chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                            *d = yv * (gv - dot);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::from_parts(shape, dx), input_grads);
                }
                Op::Hadamard { a, b } => {
                    let da: Vec<f64> = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&bv, &gv)| bv * gv)
                        .collect();
                    let db: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&av, &gv)| av * gv)
                        .collect();
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::from_parts(shape.clone(), da), input_grads);
                    self.accumulate(&mut grads, *b, Tensor::from_parts(shape, db), input_grads);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone(), input_grads);
                    self.accumulate(&mut grads, *b, g.clone(), input_grads);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = g.data().iter().map(|&gv| gv * factor).collect();
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::from_parts(shape, dx), input_grads);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let m = self.nodes[idx].value.cols();
                    let rows = self.nodes[idx].value.rows();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    for (g_row, xh_row) in g.data().chunks(m).zip(cache.xhat.chunks(m)) {
                        for j in 0..m {
                            dgamma[j] += g_row[j] * xh_row[j];
                            dbeta[j] += g_row[j];
                        }
                    }
                    let mut dxhat = vec![0.0; rows * m];
                    for (g_row, dxh_row) in g.data().chunks(m).zip(dxhat.chunks_mut(m)) {
                        for j in 0..m {
                            dxh_row[j] = g_row[j] * gv[j];
                        }
                    }
                    let dx = match cache.mode {
                        Mode::Eval => {
                            let mut dx = vec![0.0; rows * m];
                            for (dxh_row, dx_row) in dxhat.chunks(m).zip(dx.chunks_mut(m)) {
                                for j in 0..m {
                                    dx_row[j] = dxh_row[j] * cache.inv_std[j];
                                }
                            }
                            dx
                        }
                        Mode::Train => {
                            // Batch statistics couple every row of the batch.
                            let mut sum_dxhat = vec![0.0; m];
                            let mut sum_dxhat_xhat = vec![0.0; m];
                            for (dxh_row, xh_row) in dxhat.chunks(m).zip(cache.xhat.chunks(m)) {
                                for j in 0..m {
                                    sum_dxhat[j] += dxh_row[j];
                                    sum_dxhat_xhat[j] += dxh_row[j] * xh_row[j];
                                }
                            }
                            let bf = rows as f64;
                            let mut dx = vec![0.0; rows * m];
                            for ((dxh_row, xh_row), dx_row) in
                                dxhat.chunks(m).zip(cache.xhat.chunks(m)).zip(dx.chunks_mut(m))
                            {
                                for j in 0..m {
                                    dx_row[j] = cache.inv_std[j] / bf
                                        * (bf * dxh_row[j]
                                            - sum_dxhat[j]
                                            - xh_row[j] * sum_dxhat_xhat[j]);
                                }
                            }
                            dx
                        }
                    };
                    self.accumulate(&mut grads, *gamma, Tensor::from_parts(vec![m], dgamma), input_grads);
                    self.accumulate(&mut grads, *beta, Tensor::from_parts(vec![m], dbeta), input_grads);
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::from_parts(shape, dx), input_grads);
                }
                Op::BceMean { p, y } => {
                    let gs = g.item();
                    let n = self.value(*p).len() as f64;
                    let dp: Vec<f64> = self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(self.value(*y).data())
                        .map(|(&pv, &t)| {
                            if pv <= PROB_CLIP || pv >= 1.0 - PROB_CLIP {
                                0.0
                            } else {
                                gs / n * (-t / pv + (1.0 - t) / (1.0 - pv))
                            }
                        })
                        .collect();
                    let shape = self.value(*p).shape().to_vec();
                    self.accumulate(&mut grads, *p, Tensor::from_parts(shape, dp), input_grads);
                }
                Op::CceMean { q, y } => {
                    let gs = g.item();
                    let rows = self.value(*q).rows() as f64;
                    let dq: Vec<f64> = self
                        .value(*q)
                        .data()
                        .iter()
                        .zip(self.value(*y).data())
                        .map(|(&qv, &t)| {
                            if t == 0.0 || qv <= PROB_CLIP || qv >= 1.0 - PROB_CLIP {
                                0.0
                            } else {
                                -gs / rows * t / qv
                            }
                        })
                        .collect();
                    let shape = self.value(*q).shape().to_vec();
                    self.accumulate(&mut grads, *q, Tensor::from_parts(shape, dq), input_grads);
                }
                Op::AbsMean { pred, y } => {
                    let gs = g.item();
                    let n = self.value(*pred).len() as f64;
                    let dp: Vec<f64> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*y).data())
                        .map(|(&a, &b)| gs / n * (a - b).signum() * if a == b { 0.0 } else { 1.0 })
                        .collect();
                    let shape = self.value(*pred).shape().to_vec();
                    self.accumulate(&mut grads, *pred, Tensor::from_parts(shape, dp), input_grads);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants_grad(&self, id: NodeId, input_grads: bool) -> bool {
        match &self.nodes[id.0].op {
            Op::Constant => false,
            Op::Input { .. } => input_grads,
            _ => true,
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        contribution: Tensor,
        input_grads: bool,
    ) {
        if !self.wants_grad(id, input_grads) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients for every reached node, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients keyed by parameter name. Parameters the loss does not reach
    /// get an explicit zero tensor of the right shape.
    pub fn param_map(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params()
            .iter()
            .map(|(name, id)| {
                let g = match self.by_id(*id) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(graph.value(*id).shape().to_vec()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
