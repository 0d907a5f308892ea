use super::kernels::{self, axis_split, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a node of a [`Graph`]. Ids grow in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, with whatever it saved for the backward pass.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Clamp(f64, f64),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Reshape,
    Transpose,
    Concat(usize),
    Slice { axis: usize, start: usize },
    MatMul,
    Softmax(usize),
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    AddBias(usize),
    Conv3d(ConvGeom),
    Upsample(usize),
    Dropout(Vec<f64>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Clamp(..) => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::MatMul => "matmul",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AddBias(_) => "add_bias",
            Op::Conv3d(_) => "conv3d",
            Op::Upsample(_) => "upsample",
            Op::Dropout(_) => "dropout",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run computation record. Build one per forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that records values only; nothing will require gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Inserts a leaf; it tracks gradients when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = self.record && t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced NaN/Inf", op.name())));
        }
        let needs = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs { op } else { strip(op) };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(op, vec![x], out)
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op.name(), ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(op, vec![a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), x, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp(lo, hi), x, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let row = &d[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let op = if mean { Op::MeanAxis(axis) } else { Op::SumAxis(axis) };
        self.push(op, vec![x], Tensor::new(&new_shape, out)?)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape, vec![x], t)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D input, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push(Op::Transpose, vec![x], Tensor::new(&[n, m], out)?)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Op::Concat(axis), xs.to_vec(), Tensor::new(&shape, out)?)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.push(Op::Slice { axis, start }, vec![x], Tensor::new(&new_shape, out)?)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = kernels::matmul(self.data(a), self.data(b), sa[0], sa[1], sb[1]);
        self.push(Op::MatMul, vec![a, b], Tensor::new(&[sa[0], sb[1]], out)?)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let y = kernels::softmax(self.data(x), &shape, axis);
        self.push(Op::Softmax(axis), vec![x], Tensor::new(&shape, y)?)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xhat, inv_std) = kernels::layer_norm(self.data(x), n, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % n] + b[i % n])
            .collect();
        let out = Tensor::new(&shape, y)?;
        self.push(Op::LayerNorm { xhat, inv_std }, vec![x, gamma, beta], out)
    }

    /// Adds `b` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(b).numel() != shape[axis] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let (_, n, inner) = axis_split(&shape, axis);
        let bd = self.data(b);
        let y = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / inner) % n])
            .collect();
        self.push(Op::AddBias(axis), vec![x, b], Tensor::new(&shape, y)?)
    }

    /// Cross-correlation of `x: [Cin×W×H×D]` with `w: [Cout×Cin×k×k×k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(Error::Dimension {
                op: "conv3d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if sw[3] != k || sw[4] != k || k % 2 == 0 {
            return Err(Error::Parameter(format!("conv3d kernel must be odd and cubic, got {sw:?}")));
        }
        let geom = ConvGeom::new(sx[0], sw[0], k, stride, padding, [sx[1], sx[2], sx[3]])
            .ok_or_else(|| Error::Parameter(format!("conv3d geometry invalid for {sx:?}")))?;
        let y = kernels::conv3d(self.data(x), self.data(w), &geom);
        let [a, b, c] = geom.output;
        self.push(Op::Conv3d(geom), vec![x, w], Tensor::new(&[sw[0], a, b, c], y)?)
    }

    /// Nearest-neighbour upsampling of `[C×W×H×D]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::Shape(format!("upsample needs [C,W,H,D], got {s:?}")));
        }
        let y = kernels::upsample_nearest(self.data(x), s[0], [s[1], s[2], s[3]], factor);
        let shape = [s[0], s[1] * factor, s[2] * factor, s[3] * factor];
        self.push(Op::Upsample(factor), vec![x], Tensor::new(&shape, y)?)
    }

    /// Inverted dropout. Inactive or zero-rate dropout returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let y = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(t.shape(), y)?;
        self.push(Op::Dropout(mask), vec![x], out)
    }

    /// Reverse pass from a one-element `loss`; gradients accumulate into leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((id, g));
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ins = &node.inputs;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        let unary = |grads: &mut [Option<Vec<f64>>], f: &dyn Fn(usize, f64) -> f64| {
            let x = ins[0];
            if wants(x) {
                let n = g.len();
                let gx = slot(grads, x, n);
                for (i, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                    *o += f(i, *gv);
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                if wants(ins[0]) {
                    slot(grads, ins[0], g.len()).iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if wants(ins[1]) {
                    slot(grads, ins[1], g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += sign * v);
                }
            }
            Op::Mul => {
                let (a, b) = (val(ins[0]).data(), val(ins[1]).data());
                if wants(ins[0]) {
                    let s = slot(grads, ins[0], g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * b[i];
                    }
                }
                if wants(ins[1]) {
                    let s = slot(grads, ins[1], g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * a[i];
                    }
                }
            }
            Op::Div => {
                let (a, b) = (val(ins[0]).data(), val(ins[1]).data());
                if wants(ins[0]) {
                    let s = slot(grads, ins[0], g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] / b[i];
                    }
                }
                if wants(ins[1]) {
                    let s = slot(grads, ins[1], g.len());
                    for i in 0..g.len() {
                        s[i] -= g[i] * a[i] / (b[i] * b[i]);
                    }
                }
            }
            Op::Scale(c) => unary(grads, &|_, gv| c * gv),
            Op::AddScalar(_) | Op::Reshape => unary(grads, &|_, gv| gv),
            Op::Relu => {
                let x = val(ins[0]).data();
                unary(grads, &|i, gv| if x[i] > 0.0 { gv } else { 0.0 })
            }
            Op::Sigmoid => unary(grads, &|i, gv| gv * y[i] * (1.0 - y[i])),
            Op::Exp => unary(grads, &|i, gv| gv * y[i]),
            Op::Ln => {
                let x = val(ins[0]).data();
                unary(grads, &|i, gv| gv / x[i])
            }
            Op::Clamp(lo, hi) => {
                let x = val(ins[0]).data();
                unary(grads, &|i, gv| if x[i] >= *lo && x[i] <= *hi { gv } else { 0.0 })
            }
            Op::Dropout(mask) => unary(grads, &|i, gv| gv * mask[i]),
            Op::Sum | Op::Mean => {
                let x = ins[0];
                if wants(x) {
                    let n = val(x).numel();
                    let v = if matches!(node.op, Op::Mean) { g[0] / n as f64 } else { g[0] };
                    slot(grads, x, n).iter_mut().for_each(|o| *o += v);
                }
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let x = ins[0];
                if wants(x) {
                    let (outer, n, inner) = axis_split(val(x).shape(), *axis);
                    let c = if matches!(node.op, Op::MeanAxis(_)) { 1.0 / n as f64 } else { 1.0 };
                    let s = slot(grads, x, outer * n * inner);
                    for o in 0..outer {
                        for t in 0..n {
                            for i in 0..inner {
                                s[(o * n + t) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Transpose => {
                let x = ins[0];
                if wants(x) {
                    let sh = val(x).shape();
                    let (m, n) = (sh[0], sh[1]);
                    let s = slot(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Concat(axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in ins {
                    let n = val(x).shape()[*axis];
                    if wants(x) {
                        let s = slot(grads, x, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (a, b) in s[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { axis, start } => {
                let x = ins[0];
                if wants(x) {
                    let (outer, n, inner) = axis_split(val(x).shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let s = slot(grads, x, outer * n * inner);
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (a, b) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::MatMul => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(ins[0]) {
                    let s = slot(grads, ins[0], m * k);
                    kernels::matmul_grad_lhs(g, b.data(), s, m, k, n);
                }
                if wants(ins[1]) {
                    let s = slot(grads, ins[1], k * n);
                    kernels::matmul_grad_rhs(g, a.data(), s, m, k, n);
                }
            }
            Op::Softmax(axis) => {
                let x = ins[0];
                if wants(x) {
                    let s = slot(grads, x, g.len());
                    kernels::softmax_grad(y, g, s, node.value.shape(), *axis);
                }
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let n = val(gamma).numel();
                let gm = val(gamma).data();
                if wants(gamma) {
                    let s = slot(grads, gamma, n);
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv * xhat[i];
                    }
                }
                if wants(beta) {
                    let s = slot(grads, beta, n);
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                }
                if wants(x) {
                    let gxhat: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * gm[i % n]).collect();
                    let s = slot(grads, x, g.len());
                    kernels::layer_norm_grad(xhat, inv_std, &gxhat, s, n);
                }
            }
            Op::AddBias(axis) => {
                let (x, b) = (ins[0], ins[1]);
                if wants(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if wants(b) {
                    let (_, n, inner) = axis_split(node.value.shape(), *axis);
                    let s = slot(grads, b, n);
                    for (i, gv) in g.iter().enumerate() {
                        s[(i / inner) % n] += gv;
                    }
                }
            }
            Op::Conv3d(geom) => {
                let (x, w) = (ins[0], ins[1]);
                let (xd, wd) = (val(x).data(), val(w).data());
                let mut gx = wants(x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xd.len()]));
                let mut gw = wants(w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; wd.len()]));
                kernels::conv3d_grad(xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut(), geom);
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
            Op::Upsample(f) => {
                let x = ins[0];
                if wants(x) {
                    let s = val(x).shape();
                    let (c, dims) = (s[0], [s[1], s[2], s[3]]);
                    let gx = slot(grads, x, val(x).numel());
                    kernels::upsample_nearest_grad(g, gx, c, dims, *f);
                }
            }
        }
    }
}

/// Drops saved backward state from ops that will never be differentiated.
fn strip(op: Op) -> Op {
    match op {
        Op::LayerNorm { .. } => Op::LayerNorm {
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        Op::Dropout(_) => Op::Dropout(Vec::new()),
        other => other,
    }
}
