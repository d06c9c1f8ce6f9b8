//! Reverse-mode differentiation over a Wengert tape.
//!
//! Each primitive op records its inputs and output on the tape during the
//! forward pass; [`Tape::backward`] replays the records in reverse and
//! accumulates vector-Jacobian products. The tape owns all intermediate
//! values; code outside holds lightweight [`Var`] handles.
//!
//! A tape is single-threaded and lives for one forward/backward pass.
//! Calling `backward` twice recomputes gradients from scratch each time;
//! accumulation into parameters only happens through an explicit
//! [`crate::params::Lease::accumulate`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowBroadcast { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    Exp { a: usize },
    Ln { a: usize },
    Tanh { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanRows { a: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Reshape { a: usize },
    NormalizeRows { a: usize, norms: Vec<f64> },
    MaskedSoftmaxRows { a: usize, mask: Tensor },
    LogSoftmaxRows { a: usize },
    TakeDiag { a: usize },
    CosineSim { a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Record a leaf value. `requires_grad` marks it as a differentiation root.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ── primitive ops ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::Transpose { a: a.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// `[r, c] + [1, c]`, broadcasting the single row (bias addition).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || bv.rows() != 1 || av.cols() != bv.cols() {
            return Err(Error::DimensionMismatch {
                context: "row broadcast add".to_string(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::AddRowBroadcast { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Scale { a: a.0, k }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Exp { a: a.0 }, rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Ln { a: a.0 }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Tanh { a: a.0 }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let out = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Mean { a: a.0 }, rg)
    }

    /// Mean over the rows of a rank-2 tensor: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::MeanRows { a: a.0 }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(idx)?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(
            out,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Vertically stack rank-2 tensors that share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySample("concat of zero parts".to_string()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::DimensionMismatch {
                    context: "concat_rows".to_string(),
                    left: vec![cols],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(&parts.iter().map(|v| v.0).collect::<Vec<_>>());
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            rg,
        ))
    }

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::Reshape { a: a.0 }, rg))
    }

    /// Scale every row of a rank-2 tensor to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::DimensionMismatch {
                context: "normalize_rows expects rank 2".to_string(),
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("row {i} of normalize_rows input")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::NormalizeRows { a: a.0, norms }, rg))
    }

    /// Row-wise softmax of `scores + mask`. Mask entries must be 0 or -inf;
    /// -inf positions get weight exactly 0. A fully masked row is an error.
    pub fn masked_softmax_rows(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        let s = self.value(scores);
        if s.rank() != 2 {
            return Err(Error::DimensionMismatch {
                context: "masked_softmax_rows expects rank 2".to_string(),
                left: s.shape().to_vec(),
                right: vec![],
            });
        }
        if s.shape() != mask.shape() {
            return Err(Error::DimensionMismatch {
                context: "softmax mask".to_string(),
                left: s.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        if mask
            .data()
            .iter()
            .any(|&m| m != 0.0 && m != f64::NEG_INFINITY)
        {
            return Err(Error::Config(
                "softmax mask entries must be 0 or -inf".to_string(),
            ));
        }
        s.check_finite("softmax scores")?;
        let (r, c) = (s.rows(), s.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = s.row_slice(i);
            let mrow = mask.row_slice(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mrow[j] == 0.0 {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mrow[j] == 0.0 {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(&[scores.0]);
        Ok(self.push(
            out,
            Op::MaskedSoftmaxRows {
                a: scores.0,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Row-wise softmax without masking.
    pub fn softmax_rows(&mut self, scores: Var) -> Result<Var> {
        let mask = Tensor::zeros(self.value(scores).shape().to_vec());
        self.masked_softmax_rows(scores, &mask)
    }

    /// Row-wise log-softmax (stabilized by the row max).
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::DimensionMismatch {
                context: "log_softmax_rows expects rank 2".to_string(),
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .map(|v| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::LogSoftmaxRows { a: a.0 }, rg))
    }

    /// Diagonal of a square rank-2 tensor as a rank-1 vector.
    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != t.cols() {
            return Err(Error::DimensionMismatch {
                context: "take_diag expects a square matrix".to_string(),
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let n = t.rows();
        let data: Vec<f64> = (0..n).map(|i| t.at(i, i)).collect();
        let out = Tensor::vector(data);
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::TakeDiag { a: a.0 }, rg))
    }

    /// Cosine similarity of two tensors viewed as flat vectors -> scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(Error::DimensionMismatch {
                context: "cosine_sim".to_string(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let na = av.norm();
        let nb = bv.norm();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm("cosine_sim operand".to_string()));
        }
        let dot: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .sum();
        let out = Tensor::scalar(dot / (na * nb));
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::CosineSim { a: a.0, b: b.0 }, rg))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients; nodes
    /// unreachable from the loss (or not requiring grad) stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: loss_val.numel(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_op(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = g.matmul(&bv.transpose()?)?;
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let db = av.transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { a } => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, g.hadamard(bv)?);
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, g.hadamard(av)?);
                }
            }
            Op::AddRowBroadcast { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[*b].requires_grad {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % c] += v;
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![1, c], db)?);
                }
            }
            Op::Scale { a, k } => {
                self.accumulate(grads, *a, g.scale(*k));
            }
            Op::Exp { a } => {
                self.accumulate(grads, *a, g.hadamard(out)?);
            }
            Op::Ln { a } => {
                let av = &self.nodes[*a].value;
                let da = g.hadamard(&av.map(|v| 1.0 / v))?;
                self.accumulate(grads, *a, da);
            }
            Op::Tanh { a } => {
                let da = g.hadamard(&out.map(|y| 1.0 - y * y))?;
                self.accumulate(grads, *a, da);
            }
            Op::Sum { a } => {
                let av = &self.nodes[*a].value;
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::filled(av.shape().to_vec(), s));
            }
            Op::Mean { a } => {
                let av = &self.nodes[*a].value;
                let s = g.data()[0] / av.numel() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape().to_vec(), s));
            }
            Op::MeanRows { a } => {
                let av = &self.nodes[*a].value;
                let (r, c) = (av.rows(), av.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::GatherRows { a, idx } => {
                let av = &self.nodes[*a].value;
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::ConcatRows { parts } => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    if self.nodes[p].requires_grad {
                        let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, c], slice)?);
                    }
                    offset += rows;
                }
            }
            Op::Reshape { a } => {
                let av = &self.nodes[*a].value;
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), g.data().to_vec())?,
                );
            }
            Op::NormalizeRows { a, norms } => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..c {
                        da[i * c + j] = (gr[j] - dot * y[j]) / norms[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::MaskedSoftmaxRows { a, mask } => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let p = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = gr.iter().zip(p).map(|(gv, pv)| gv * pv).sum();
                    for j in 0..c {
                        if mask.at(i, j) == 0.0 {
                            da[i * c + j] = p[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::LogSoftmaxRows { a } => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let gr = g.row_slice(i);
                    let gsum: f64 = gr.iter().sum();
                    let yrow = out.row_slice(i);
                    for j in 0..c {
                        da[i * c + j] = gr[j] - yrow[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::TakeDiag { a } => {
                let av = &self.nodes[*a].value;
                let n = av.rows();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g.data()[i];
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, n], da)?);
            }
            Op::CosineSim { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let na = av.norm();
                let nb = bv.norm();
                let cos = out.data()[0];
                let s = g.data()[0];
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| s * (y / (na * nb) - cos * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = bv
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(y, x)| s * (x / (na * nb) - cos * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
        }
        Ok(())
    }
}

/// In-batch InfoNCE over cosine similarities at temperature `tau`: row i
/// of `a` with row i of `b` is the positive pair, the other rows of `b`
/// the negatives; mean of the per-row losses.
pub fn in_batch_infonce(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::DimensionMismatch {
            context: "in-batch contrastive loss".to_string(),
            left: tape.value(a).shape().to_vec(),
            right: tape.value(b).shape().to_vec(),
        });
    }
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    let sims = tape.matmul(an, bt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let ls = tape.log_softmax_rows(logits)?;
    let diag = tape.take_diag(ls)?;
    let mean = tape.mean(diag);
    Ok(tape.scale(mean, -1.0))
}
