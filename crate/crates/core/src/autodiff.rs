//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node indices are already a topological order: backward walks them in
//! reverse and visits each node once. Leaf gradients accumulate across
//! [`Graph::backward`] calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a broadcast `1×n` row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Tensor times a `1×1` node.
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.op(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.op(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let bias = self.value(row);
        if bias.len() != c {
            return Err(Error::shape(format!(
                "broadcast row of length {} onto {r}x{c}",
                bias.len()
            )));
        }
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        Ok(self.op(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.op(v, Op::AddScalar(a), &[a])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().ok_or_else(|| {
            Error::shape(format!("scale_by needs a scalar, got {:?}", self.value(s).shape()))
        })?;
        let v = self.value(a).scale(sv);
        Ok(self.op(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.op(v, Op::Exp(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.op(v, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.op(v, Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax(1)?;
        Ok(self.op(v, Op::SoftmaxRows(a), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).l2_normalize_rows()?;
        Ok(self.op(v, Op::L2NormalizeRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self
            .value(x)
            .layer_norm(self.value(gain), self.value(bias), eps)?;
        Ok(self.op(v, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.op(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "columns {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        Ok(self.op(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.op(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!("concat cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        Ok(self.op(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Summed softmax cross-entropy: `Σ_r −log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (r, c) = l.dims2()?;
        if targets.len() != r {
            return Err(Error::shape(format!(
                "{} targets for {r} rows of logits",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::shape(format!("target {t} out of range for {c} classes")));
            }
            let row = l.row(i);
            total += tensor::log_sum_exp(row) - row[t];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.op(Tensor::scalar(total), op, &[logits]))
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::filled(&shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut pending[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if rg(*a) {
                    v.push((*a, g.matmul_t(val(*b))?));
                }
                if rg(*b) {
                    v.push((*b, val(*a).transpose()?.matmul(g)?));
                }
                v
            }
            Op::MatMulT(a, b) => {
                let mut v = Vec::with_capacity(2);
                if rg(*a) {
                    v.push((*a, g.matmul(val(*b))?));
                }
                if rg(*b) {
                    v.push((*b, g.transpose()?.matmul(val(*a))?));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::AddRow(a, row) => {
                let (r, c) = g.dims2()?;
                let mut db = vec![0.0; c];
                for k in 0..r {
                    for (d, x) in db.iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                let db = Tensor::new(val(*row).shape().to_vec(), db)?;
                vec![(*a, g.clone()), (*row, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                let ds = tensor::dot(g.data(), val(*a).data());
                let ds = Tensor::new(val(*s).shape().to_vec(), vec![ds])?;
                vec![(*a, g.scale(sv)), (*s, ds)]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(out, |x, y| x * y)?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |gx, x| gx * gelu_grad(x))?)],
            Op::Sum(a) => {
                let s = g.data()[0];
                vec![(*a, Tensor::filled(val(*a).shape(), s))]
            }
            Op::SoftmaxRows(a) => {
                let (r, _) = out.dims2()?;
                let mut dx = g.clone();
                for k in 0..r {
                    let y = out.row(k);
                    let inner = tensor::dot(g.row(k), y);
                    for (d, &yy) in dx.row_mut(k).iter_mut().zip(y) {
                        *d = yy * (*d - inner);
                    }
                }
                vec![(*a, dx)]
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let (r, _) = out.dims2()?;
                let mut dx = g.clone();
                for k in 0..r {
                    let y = out.row(k);
                    let n = tensor::norm(x.row(k));
                    let inner = tensor::dot(g.row(k), y);
                    for (d, &yy) in dx.row_mut(k).iter_mut().zip(y) {
                        *d = (*d - yy * inner) / n;
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gamma = val(*gain).data();
                let (r, d) = xv.dims2()?;
                let n = d as f64;
                let mut dx = Tensor::zeros(&[r, d]);
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for k in 0..r {
                    let row = xv.row(k);
                    let (mean, inv_std) = tensor::moments(row, *eps);
                    let gr = g.row(k);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * gamma[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat = tensor::dot(&dxhat, &xhat);
                    for (j, o) in dx.row_mut(k).iter_mut().enumerate() {
                        *o = inv_std / n * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                vec![
                    (*x, dx),
                    (*gain, Tensor::new(val(*gain).shape().to_vec(), dgain)?),
                    (*bias, Tensor::new(val(*bias).shape().to_vec(), dbias)?),
                ]
            }
            Op::SliceRows { x, start } => {
                let src = val(*x);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let src = val(*x);
                let (r, _) = src.dims2()?;
                let w = g.cols();
                let mut dx = Tensor::zeros(src.shape());
                for k in 0..r {
                    dx.row_mut(k)[*start..start + w].copy_from_slice(g.row(k));
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let r = val(*p).rows();
                    v.push((*p, g.slice_rows(offset, r)?));
                    offset += r;
                }
                v
            }
            Op::ConcatCols(parts) => {
                let (r, _) = g.dims2()?;
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = val(*p).cols();
                    let mut data = Vec::with_capacity(r * w);
                    for k in 0..r {
                        data.extend_from_slice(&g.row(k)[offset..offset + w]);
                    }
                    v.push((*p, Tensor::new(vec![r, w], data)?));
                    offset += w;
                }
                v
            }
            Op::CrossEntropy { logits, targets } => {
                let upstream = g.data()[0];
                let mut d = val(*logits).softmax(1)?;
                for (k, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(k);
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= upstream;
                    }
                }
                vec![(*logits, d)]
            }
        };
        Ok(grads)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
