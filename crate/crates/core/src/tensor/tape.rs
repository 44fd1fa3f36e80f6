use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_VAR_FLOOR: f64 = 1e-6;
/// `sqrt(2/π)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Scale(usize, f64),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        floored: Vec<bool>,
    },
    Reshape(usize),
    Transpose(usize),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    SumAll(usize),
    Expand(usize),
    L1 { pred: usize, coeff: Vec<f64> },
    Kl { mu: usize, logvar: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Every op returns a [`Var`]. On a recording tape, nodes that depend on a
/// parameter keep what their backward rule needs; on an inference tape only
/// values are kept and [`Tape::backward`] is refused.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reached by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Sums `g` (period-`n` repetition of a smaller operand) down to `n` values.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn mm_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn mm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// (outer, axis length, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that keeps values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry backward data.
    pub fn tracked_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if ta.shape == tb.shape || ta.shape.ends_with(&tb.shape) {
            ta.shape.clone()
        } else if tb.shape.ends_with(&ta.shape) {
            tb.shape.clone()
        } else {
            return Err(shape_err(name, &ta.shape, &tb.shape));
        };
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.numel(), tb.numel());
        let data = if na == n && nb == n {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ta.data[i % na], tb.data[i % nb])).collect()
        };
        Ok(self.push(Tensor { shape, data }, op, &[a.0, b.0]))
    }

    /// Elementwise `a + b`; the smaller shape must be a suffix of the larger.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `[..., M, K] × [K, N]` (shared right operand) or
    /// `[..., M, K] × [..., K, N]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (&ta.shape, &tb.shape);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut data = vec![0.0; shape.iter().product()];
        if sb.len() == 2 {
            let rows = ta.numel() / k;
            mm_acc(&ta.data, &tb.data, &mut data, rows, k, n);
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", sa, sb));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for bi in 0..batch {
                mm_acc(
                    &ta.data[bi * m * k..(bi + 1) * m * k],
                    &tb.data[bi * k * n..(bi + 1) * k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// GELU, tanh approximation `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = *t.shape.last().ok_or_else(|| shape_err("softmax", &t.shape, &[]))?;
        if d == 0 {
            return Err(shape_err("softmax", &t.shape, &[]));
        }
        let mut data = t.data.clone();
        for row in data.chunks_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x.0), &[x.0]))
    }

    /// Layer normalization over the last axis with learned `gamma`, `beta`
    /// of shape `[D]`; the variance is floored at 1e-6.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = *t.shape.last().ok_or_else(|| shape_err("layer_norm", &t.shape, &[]))?;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.shape != [d] || b.shape != [d] {
            return Err(shape_err("layer_norm", &t.shape, &g.shape));
        }
        let rows = t.numel() / d.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut floored = vec![false; rows];
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            floored[r] = var < LN_VAR_FLOOR;
            let rs = 1.0 / var.max(LN_VAR_FLOOR).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g.data[j] + b.data[j];
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
                floored,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", &t.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let nd = t.ndim();
        if nd < 2 {
            return Err(shape_err("transpose", &t.shape, &[]));
        }
        let (m, n) = (t.shape[nd - 2], t.shape[nd - 1]);
        let mut shape = t.shape.clone();
        shape.swap(nd - 2, nd - 1);
        let data = transpose_data(&t.data, m, n);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(x.0), &[x.0]))
    }

    /// `x[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() || start >= end || end > t.shape[axis] {
            return Err(shape_err("slice", &t.shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&t.shape, axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&t.data[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = w;
        Ok(self.push(Tensor { shape, data }, Op::Slice { x: x.0, axis, start }, &[x.0]))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = &self.nodes[xs.first().ok_or_else(|| shape_err("concat", &[], &[]))?.0].value;
        if axis >= first.ndim() {
            return Err(shape_err("concat", &first.shape, &[axis]));
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for v in xs {
            let s = &self.nodes[v.0].value.shape;
            let same = s.len() == first.ndim() && s.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err("concat", &first.shape, s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let w = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * w..(o + 1) * w]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() {
            return Err(shape_err(if mean { "mean" } else { "sum" }, &t.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&t.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let op = if mean {
            Op::Mean { x: x.0, axis }
        } else {
            Op::Sum { x: x.0, axis }
        };
        Ok(self.push(Tensor { shape, data }, op, &[x.0]))
    }

    /// Sum over `axis`, which is removed.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    /// Repeats `x` over new leading dims; `x`'s shape must be a suffix of `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !shape.ends_with(&t.shape) {
            return Err(shape_err("expand", &t.shape, shape));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Expand(x.0),
            &[x.0],
        ))
    }

    /// Mean of `mask·|pred − target|` over entries with nonzero mask.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        if p.shape != target.shape {
            return Err(shape_err("l1_loss", &p.shape, &target.shape));
        }
        if p.shape != mask.shape {
            return Err(shape_err("l1_loss", &p.shape, &mask.shape));
        }
        let count: f64 = mask.data.iter().sum();
        if count <= 0.0 {
            return Err(Error::InvalidArgument("l1_loss: every entry is masked out".into()));
        }
        let mut loss = 0.0;
        let mut coeff = Vec::with_capacity(p.numel());
        for ((&x, &y), &m) in p.data.iter().zip(&target.data).zip(&mask.data) {
            let d = x - y;
            loss += m * d.abs();
            coeff.push(m * crate::dynamics::sign0(d) / count);
        }
        Ok(self.push(Tensor::scalar(loss / count), Op::L1 { pred: pred.0, coeff }, &[pred.0]))
    }

    /// `−½·Σ(1 + logvar − mu² − exp(logvar))` over the last axis, averaged
    /// over the rest.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, l) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
        if m.shape != l.shape || m.ndim() == 0 {
            return Err(shape_err("gaussian_kl", &m.shape, &l.shape));
        }
        let batch = m.numel() / m.shape[m.ndim() - 1].max(1);
        let s: f64 = m
            .data
            .iter()
            .zip(&l.data)
            .map(|(&u, &v)| 1.0 + v - u * u - v.exp())
            .sum();
        let kl = -0.5 * s / batch as f64;
        Ok(self.push(
            Tensor::scalar(kl),
            Op::Kl {
                mu: mu.0,
                logvar: logvar.0,
            },
            &[mu.0, logvar.0],
        ))
    }

    /// Reverse pass from a scalar. Runs once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Backward("tape was recorded in inference mode"));
        }
        if self.consumed {
            return Err(Error::Backward("stale tape: backward already ran, record a new forward pass"));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss does not depend on any parameter"));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, g: Vec<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot => *slot = Some(g),
            }
        };

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, val(*a).numel()));
                    acc(&mut grads, *b, reduce_to(&g, val(*b).numel()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, val(*a).numel()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(&mut grads, *b, reduce_to(&neg, val(*b).numel()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (na, nb) = (ta.numel(), tb.numel());
                    if nodes[*a].requires_grad {
                        let full: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * tb.data[i % nb]).collect();
                        acc(&mut grads, *a, reduce_to(&full, na));
                    }
                    if nodes[*b].requires_grad {
                        let full: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * ta.data[i % na]).collect();
                        acc(&mut grads, *b, reduce_to(&full, nb));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (sa, sb) = (&ta.shape, &tb.shape);
                    let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                    let want_a = nodes[*a].requires_grad;
                    let want_b = nodes[*b].requires_grad;
                    let mut ga = if want_a { vec![0.0; ta.numel()] } else { vec![] };
                    let mut gb = if want_b { vec![0.0; tb.numel()] } else { vec![] };
                    if sb.len() == 2 {
                        let rows = ta.numel() / k;
                        if want_a {
                            mm_bt_acc(&g, &tb.data, &mut ga, rows, n, k);
                        }
                        if want_b {
                            mm_at_acc(&ta.data, &g, &mut gb, rows, k, n);
                        }
                    } else {
                        let batch = ta.numel() / (m * k);
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            if want_a {
                                mm_bt_acc(gs, &tb.data[bi * k * n..(bi + 1) * k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                            }
                            if want_b {
                                mm_at_acc(&ta.data[bi * m * k..(bi + 1) * m * k], gs, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                            }
                        }
                    }
                    if want_a {
                        acc(&mut grads, *a, ga);
                    }
                    if want_b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let t = val(*x);
                    let gx = g.iter().zip(&t.data).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let t = val(*x);
                    let gx = g.iter().zip(&t.data).map(|(v, &x)| v * gelu_grad(x)).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(&node.value.data).map(|(v, y)| v * y).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Softmax(x) => {
                    let d = *node.value.shape.last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(node.value.data.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                    floored,
                } => {
                    let gam = &val(*gamma).data;
                    let d = gam.len();
                    let mut gg = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            gbeta[j] += gr[j];
                            gg[j] += gr[j] * hr[j];
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        if floored[r] {
                            // the floored variance is a constant
                            mean_dh_h = 0.0;
                        }
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Reshape(x) => acc(&mut grads, *x, g),
                Op::Transpose(x) => {
                    let s = &node.value.shape;
                    let nd = s.len();
                    acc(&mut grads, *x, transpose_data(&g, s[nd - 2], s[nd - 1]));
                }
                Op::Slice { x, axis, start } => {
                    let src = &val(*x).shape;
                    let (outer, len, inner) = split_axis(src, *axis);
                    let w = node.value.shape[*axis];
                    let mut gx = vec![0.0; val(*x).numel()];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        gx[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                    let mut offset = 0;
                    for &x in xs {
                        let w = val(x).shape[*axis];
                        if nodes[x].requires_grad {
                            let mut gx = Vec::with_capacity(val(x).numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gx.extend_from_slice(&g[base..base + w * inner]);
                            }
                            acc(&mut grads, x, gx);
                        }
                        offset += w;
                    }
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let (outer, len, inner) = split_axis(&val(*x).shape, *axis);
                    let c = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = s * c;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) => acc(&mut grads, *x, vec![g[0]; val(*x).numel()]),
                Op::Expand(x) => acc(&mut grads, *x, reduce_to(&g, val(*x).numel())),
                Op::L1 { pred, coeff } => {
                    acc(&mut grads, *pred, coeff.iter().map(|c| c * g[0]).collect());
                }
                Op::Kl { mu, logvar } => {
                    let (m, l) = (val(*mu), val(*logvar));
                    let batch = (m.numel() / m.shape[m.ndim() - 1].max(1)) as f64;
                    acc(&mut grads, *mu, m.data.iter().map(|u| g[0] * u / batch).collect());
                    acc(
                        &mut grads,
                        *logvar,
                        l.data.iter().map(|v| g[0] * -0.5 * (1.0 - v.exp()) / batch).collect(),
                    );
                }
            }
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(nodes)
                .map(|(g, n)| {
                    g.map(|data| Tensor {
                        shape: n.value.shape.clone(),
                        data,
                    })
                })
                .collect(),
        })
    }
}

/// Transposes the trailing `m × n` matrices of a batch.
fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (s, d) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}
