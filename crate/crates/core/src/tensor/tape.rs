//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for the backward rule. [`Tape::backward`] walks the nodes in
//! strict reverse order of execution.

use std::sync::Arc;

use super::ops::gemm;
use super::{Mask, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax(Var),
    Block { x: Var, row0: usize, col0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds `scale ·` each parameter gradient into `set`.
    pub fn accumulate_into(&self, set: &mut ParamSet, scale: f64) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                set.accumulate(id, g, scale);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A free-standing input; `requires_grad` makes it a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter without copying its buffer.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let p = set.get(id);
        self.push_shared(p.shared_value(), Op::Leaf { param: Some(id) }, p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.require_matrix("scale_rows")?;
        if factors.len() != r {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: vec![r, c],
                rhs: vec![factors.len()],
            });
        }
        let mut data = x.data().to_vec();
        for (row, f) in data.chunks_mut(c.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::matrix(r, c, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::ScaleRows(a, factors), ng))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("add_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let out = Tensor::matrix(r, c, data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("layer_norm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row softmax over `mask` support; see [`super::masked_softmax`].
    pub fn masked_softmax(&mut self, scores: Var, mask: &Mask) -> Result<Var> {
        let out = super::masked_softmax(self.value(scores), mask)?;
        let ng = self.needs(scores);
        Ok(self.push(out, Op::MaskedSoftmax(scores), ng))
    }

    /// Sub-matrix `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn block(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("block")?;
        if row0 + rows > r || col0 + cols > c {
            return Err(Error::Shape {
                op: "block",
                lhs: vec![r, c],
                rhs: vec![row0 + rows, col0 + cols],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            data.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Block { x, row0, col0 }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    /// Mean cross-entropy over rows selected by `loss_mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var> {
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let w = 1.0 / count as f64;
        let weights = loss_mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, weights)
    }

    /// `Σ_i weights[i] · -log softmax(logits_i)[targets[i]]`; zero-weight rows are skipped.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Vec<f64>) -> Result<Var> {
        let (n, vocab) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(Error::contract(format!("target {t} out of range for vocab {vocab}")));
            }
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            for j in 0..vocab {
                probs[i * vocab + j] = (row[j] - max).exp() / z;
            }
            loss += weights[i] * (max + z.ln() - row[t]);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                if let Op::Leaf { param: Some(id) } = self.nodes[i].op {
                    params.push((id, Var(i)));
                }
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), 1.0, ga);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm(m, n, k, g, (n, 1), bv.data(), (k, 1), 1.0, ga);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm(n, m, k, g, (1, n), av.data(), (k, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(self.grad_buf(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    ga.iter_mut().zip(g).zip(bv).for_each(|((d, gg), y)| *d += gg * y);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    gb.iter_mut().zip(g).zip(av).for_each(|((d, gg), x)| *d += gg * x);
                }
            }
            Op::Scale(a, f) => {
                let ga = self.grad_buf(grads, *a);
                ga.iter_mut().zip(g).for_each(|(d, gg)| *d += f * gg);
            }
            Op::ScaleRows(a, factors) => {
                let c = out.cols().max(1);
                let ga = self.grad_buf(grads, *a);
                for ((drow, grow), f) in ga.chunks_mut(c).zip(g.chunks(c)).zip(factors) {
                    drow.iter_mut().zip(grow).for_each(|(d, gg)| *d += f * gg);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    add_into(self.grad_buf(grads, *x), g);
                }
                if self.needs(*b) {
                    let c = out.cols().max(1);
                    let gb = self.grad_buf(grads, *b);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga = self.grad_buf(grads, *a);
                for ((d, gg), &x) in ga.iter_mut().zip(g).zip(xv) {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    *d += gg * (0.5 * (1.0 + t) + 0.5 * x * dt);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (i, rs) in rstd.iter().enumerate() {
                        let (grow, hrow) = (&g[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let gh = grow[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * hrow[j];
                        }
                        mean_gh /= c as f64;
                        mean_ghx /= c as f64;
                        for j in 0..c {
                            let gh = grow[j] * gv[j];
                            gx[i * c + j] += rs * (gh - mean_gh - hrow[j] * mean_ghx);
                        }
                    }
                }
                if self.needs(*gain) {
                    let gg = self.grad_buf(grads, *gain);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut().zip(grow).zip(hrow).for_each(|((d, a), h)| *d += a * h);
                    }
                }
                if self.needs(*bias) {
                    let gb = self.grad_buf(grads, *bias);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                let c = out.cols();
                let y = out.data();
                let ga = self.grad_buf(grads, *a);
                for i in 0..out.rows() {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Block { x, row0, col0 } => {
                let src_cols = self.value(*x).cols();
                let (rows, cols) = (out.rows(), out.cols());
                let gx = self.grad_buf(grads, *x);
                for i in 0..rows {
                    let dst = &mut gx[(row0 + i) * src_cols + col0..(row0 + i) * src_cols + col0 + cols];
                    add_into(dst, &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = self.grad_buf(grads, p);
                        for i in 0..out.rows() {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        add_into(self.grad_buf(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let c = out.cols();
                let gx = self.grad_buf(grads, *x);
                for (i, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::Sum(a) => {
                let ga = self.grad_buf(grads, *a);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let vocab = self.value(*logits).cols();
                let gl = self.grad_buf(grads, *logits);
                for (i, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    for j in 0..vocab {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gl[i * vocab + j] += scale * (probs[i * vocab + j] - onehot);
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
