use std::collections::BTreeMap;

use super::conv::{self, ConvGeom, Padding};
use super::param::{ParamKey, Parameter};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Square,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::LeakyRelu(slope) => {
                if x > S::zero() {
                    x
                } else {
                    x * S::c(slope)
                }
            }
            Unary::Scale(c) => x * S::c(c),
            Unary::AddScalar(c) => x + S::c(c),
            Unary::Clamp(lo, hi) => x.max(S::c(lo)).min(S::c(hi)),
        }
    }

    /// d(output)/d(input) given the input `x` and output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        let one = S::one();
        match self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Square => S::c(2.0) * x,
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => x.signum(),
            Unary::LeakyRelu(slope) => {
                if x > S::zero() {
                    one
                } else {
                    S::c(slope)
                }
            }
            Unary::Scale(c) => S::c(c),
            Unary::AddScalar(_) => one,
            Unary::Clamp(lo, hi) => {
                if x > S::c(lo) && x < S::c(hi) {
                    one
                } else {
                    S::zero()
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

enum Op<S> {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
    Concat(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    Tile { x: Var, h: usize, w: usize },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, rstd) per (batch, group).
        stats: Vec<(S, S)>,
    },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeom },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
    is_param: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can replay
/// them in reverse. Nodes that do not depend on any gradient-requiring leaf are
/// recorded as plain values and never visited by backward.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamKey, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Elements held by every non-parameter node: the activations a backward
    /// pass over this tape keeps alive.
    pub fn retained_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.is_param)
            .map(|n| n.value.numel())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<S>,
        requires_grad: bool,
        op: Op<S>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Bind a parameter; repeated bindings of the same key return the same var.
    pub fn param(&mut self, key: ParamKey, p: &Parameter<S>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(p.value.clone(), p.requires_grad, Op::Leaf);
        self.nodes[v.0].is_param = true;
        self.params.insert(key, v);
        v
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.requires_grad(x);
        self.push_checked(kind.name(), value, rg, Op::Unary(x, kind))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {i}"), x, y));
            }
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        self.same_shape(kind.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(kind.name(), value, rg, Op::Binary(a, b, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push_checked("sum", value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / S::c(t.numel() as f64));
        let rg = self.requires_grad(x);
        self.push_checked("mean", value, rg, Op::Mean(x))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total = va
            .iter()
            .zip(vb)
            .fold(S::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let value = Tensor::scalar(total / S::c(va.len() as f64));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("l1", value, rg, Op::L1(a, b))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total = va.iter().zip(vb).fold(S::zero(), |acc, (&x, &y)| {
            let d = x - y;
            acc + d * d
        });
        let value = Tensor::scalar(total / S::c(va.len() as f64));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("mse", value, rg, Op::Mse(a, b))
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid(OP, "nothing to concatenate"))?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(Error::invalid(OP, "cannot concatenate scalars"));
        }
        let outer: usize = lead[..lead.len() - 1].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() {
                return Err(Error::shape(OP, "rank", lead.len(), s.len()));
            }
            for i in 0..s.len() - 1 {
                if s[i] != lead[i] {
                    return Err(Error::shape(OP, format!("axis {i}"), lead[i], s[i]));
                }
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead;
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push_checked(OP, Tensor::new(shape, data)?, rg, Op::Concat(parts.to_vec()))
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_batch";
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid(OP, "nothing to concatenate"))?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(Error::invalid(OP, "cannot concatenate scalars"));
        }
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() {
                return Err(Error::shape(OP, "rank", lead.len(), s.len()));
            }
            for i in 1..s.len() {
                if s[i] != lead[i] {
                    return Err(Error::shape(OP, format!("axis {i}"), lead[i], s[i]));
                }
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * lead[1..].iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = lead;
        shape[0] = rows;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push_checked(OP, Tensor::new(shape, data)?, rg, Op::ConcatBatch(parts.to_vec()))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_batch";
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::invalid(OP, "cannot slice a scalar"));
        }
        if len == 0 || start + len > s[0] {
            return Err(Error::invalid(
                OP,
                format!("rows {start}..{} out of range for batch {}", start + len, s[0]),
            ));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.requires_grad(x);
        self.push_checked(OP, Tensor::new(shape, data)?, rg, Op::SliceBatch { x, start })
    }

    /// Broadcast `[b, c]` to `[b, h, w, c]`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "tile_spatial";
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(OP, "input rank", 2, s.len()));
        }
        let (b, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for _ in 0..h * w {
                data.extend_from_slice(&src[bi * c..(bi + 1) * c]);
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked(OP, Tensor::new(vec![b, h, w, c], data)?, rg, Op::Tile { x, h, w })
    }

    /// Group normalization over `[b, ..., c]` followed by a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "group_norm";
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(OP, "input needs a batch and a channel axis"));
        }
        let c = s[s.len() - 1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::invalid(
                OP,
                format!("groups ({groups}) must divide channels ({c})"),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let ps = self.shape(v);
            if ps.len() != 1 || ps[0] != c {
                return Err(Error::shape(
                    OP,
                    format!("{name} length"),
                    c,
                    ps.iter().product(),
                ));
            }
        }
        let b = s[0];
        let positions: usize = s[1..s.len() - 1].iter().product();
        let cg = c / groups;
        let n = S::c((positions * cg) as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![S::zero(); xd.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for bi in 0..b {
            let base = bi * positions * c;
            for g in 0..groups {
                let mut sum = S::zero();
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for &v in &xd[off..off + cg] {
                        sum = sum + v;
                    }
                }
                let mean = sum / n;
                let mut var = S::zero();
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for &v in &xd[off..off + cg] {
                        let d = v - mean;
                        var = var + d * d;
                    }
                }
                let rstd = S::one() / (var / n + S::c(eps)).sqrt();
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for j in 0..cg {
                        let ch = g * cg + j;
                        out[off + j] = (xd[off + j] - mean) * rstd * gd[ch] + bd[ch];
                    }
                }
                stats.push((mean, rstd));
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        if !rg {
            stats.clear();
        }
        self.push_checked(
            OP,
            Tensor::new(s, out)?,
            rg,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    fn check_bias(&self, op: &'static str, bias: Var, channels: usize) -> Result<()> {
        let s = self.shape(bias);
        if s.len() != 1 || s[0] != channels {
            return Err(Error::shape(op, "bias length", channels, s.iter().product()));
        }
        Ok(())
    }

    /// 2-D convolution of `[b, h, w, cin]` with `[kh, kw, cin, cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let geom = ConvGeom::new(OP, self.shape(x), self.shape(weight), stride, padding)?;
        self.check_bias(OP, bias, geom.cout)?;
        let data = conv::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geom.out_shape(), data)?;
        let rg = self.requires_grad(x) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push_checked(
            OP,
            value,
            rg,
            Op::Conv {
                x,
                w: weight,
                b: bias,
                geom,
            },
        )
    }

    /// Transposed convolution of `[b, h, w, cin]` with `[kh, kw, cout, cin]`,
    /// producing `[b, h*stride, w*stride, cout]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d_transpose";
        let geom = conv::transpose_geom(self.shape(x), self.shape(weight), stride)?;
        self.check_bias(OP, bias, geom.cin)?;
        let data = conv::conv_transpose_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geom.in_shape(), data)?;
        let rg = self.requires_grad(x) || self.requires_grad(weight) || self.requires_grad(bias);
        self.push_checked(
            OP,
            value,
            rg,
            Op::ConvTranspose {
                x,
                w: weight,
                b: bias,
                geom,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node that
    /// requires them; parameter gradients are looked up by key.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let (xd, yd) = (val(*x), node.value.data());
                self.accum(grads, *x, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + g[i] * kind.derivative(xd[i], yd[i]);
                    }
                });
            }
            Op::Binary(a, b, kind) => {
                let (ad, bd) = (val(*a), val(*b));
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i]
                            + match kind {
                                Binary::Add | Binary::Sub => g[i],
                                Binary::Mul => g[i] * bd[i],
                                Binary::Div => g[i] / bd[i],
                            };
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i]
                            + match kind {
                                Binary::Add => g[i],
                                Binary::Sub => -g[i],
                                Binary::Mul => g[i] * ad[i],
                                Binary::Div => -g[i] * ad[i] / (bd[i] * bd[i]),
                            };
                    }
                });
            }
            Op::Sum(x) => self.accum(grads, *x, |acc| {
                for a in acc.iter_mut() {
                    *a = *a + g[0];
                }
            }),
            Op::Mean(x) => self.accum(grads, *x, |acc| {
                let s = g[0] / S::c(acc.len() as f64);
                for a in acc.iter_mut() {
                    *a = *a + s;
                }
            }),
            Op::L1(a, b) | Op::Mse(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let n = S::c(ad.len() as f64);
                let is_l1 = matches!(node.op, Op::L1(..));
                let d = |i: usize| {
                    let diff = ad[i] - bd[i];
                    if is_l1 {
                        diff.signum() * g[0] / n
                    } else {
                        S::c(2.0) * diff * g[0] / n
                    }
                };
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + d(i);
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] - d(i);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let outer = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.accum(grads, p, |acc| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (a, &s) in acc[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *a = *a + s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accum(grads, p, |acc| {
                        for (a, &s) in acc.iter_mut().zip(&g[offset..offset + n]) {
                            *a = *a + s;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceBatch { x, start } => {
                let row = node.value.numel() / node.value.shape()[0];
                let off = start * row;
                self.accum(grads, *x, |acc| {
                    for (a, &s) in acc[off..off + g.len()].iter_mut().zip(g) {
                        *a = *a + s;
                    }
                });
            }
            Op::Tile { x, h, w } => {
                let c = self.shape(*x)[1];
                self.accum(grads, *x, |acc| {
                    for (bi, chunk) in g.chunks_exact(h * w * c).enumerate() {
                        for px in chunk.chunks_exact(c) {
                            for (a, &s) in acc[bi * c..(bi + 1) * c].iter_mut().zip(px) {
                                *a = *a + s;
                            }
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(node, g, grads, *x, *gamma, *beta, *groups, stats),
            Op::Conv { x, w, b, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                let mut gi = self.grad_buffer(grads, *x);
                let mut gw = self.grad_buffer(grads, *w);
                let mut gb = self.grad_buffer(grads, *b);
                conv::conv_backward(
                    geom,
                    xd,
                    wd,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(grads, *x, gi);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                let mut gi = self.grad_buffer(grads, *x);
                let mut gw = self.grad_buffer(grads, *w);
                let mut gb = self.grad_buffer(grads, *b);
                conv::conv_transpose_backward(
                    geom,
                    xd,
                    wd,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(grads, *x, gi);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        node: &Node<S>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(S, S)],
    ) {
        let s = node.value.shape();
        let c = s[s.len() - 1];
        let b = s[0];
        let positions: usize = s[1..s.len() - 1].iter().product();
        let cg = c / groups;
        let n = S::c((positions * cg) as f64);
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let xhat = |idx: usize, stat: (S, S)| (xd[idx] - stat.0) * stat.1;

        self.accum(grads, beta, |acc| {
            for px in g.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a = *a + v;
                }
            }
        });
        self.accum(grads, gamma, |acc| {
            for bi in 0..b {
                for p in 0..positions {
                    let off = (bi * positions + p) * c;
                    for ch in 0..c {
                        let stat = stats[bi * groups + ch / cg];
                        acc[ch] = acc[ch] + g[off + ch] * xhat(off + ch, stat);
                    }
                }
            }
        });
        self.accum(grads, x, |acc| {
            for bi in 0..b {
                for grp in 0..groups {
                    let stat = stats[bi * groups + grp];
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for p in 0..positions {
                        let off = (bi * positions + p) * c + grp * cg;
                        for j in 0..cg {
                            let dxh = g[off + j] * gd[grp * cg + j];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat(off + j, stat);
                        }
                    }
                    mean_dxhat = mean_dxhat / n;
                    mean_dxhat_xhat = mean_dxhat_xhat / n;
                    for p in 0..positions {
                        let off = (bi * positions + p) * c + grp * cg;
                        for j in 0..cg {
                            let dxh = g[off + j] * gd[grp * cg + j];
                            acc[off + j] = acc[off + j]
                                + stat.1
                                    * (dxh - mean_dxhat - xhat(off + j, stat) * mean_dxhat_xhat);
                        }
                    }
                }
            }
        });
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.numel()]);
        f(buf);
    }

    fn grad_buffer(&self, grads: &mut [Option<Vec<S>>], v: Var) -> Option<Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![S::zero(); node.value.numel()]),
        )
    }

    fn restore(&self, grads: &mut [Option<Vec<S>>], v: Var, buf: Option<Vec<S>>) {
        if let Some(buf) = buf {
            grads[v.0] = Some(buf);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: BTreeMap<ParamKey, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer of `v`, or `None` when `v` did not receive gradient.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&[S]> {
        self.params.get(&key).and_then(|&v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[-2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).item() + 0.4).abs() < 1e-15);
    }

    #[test]
    fn l1_of_identical_tensors_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[0.1, -2.0, 5.0]));
        let b = tape.constant(t(&[3], &[0.1, -2.0, 5.0]));
        let d = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn elementwise_shape_mismatch_names_axis() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 4]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn concat_requires_matching_leading_extents() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 2, 1]));
        let b = tape.constant(Tensor::zeros(vec![1, 3, 2, 1]));
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 6]));
        let g = tape.constant(Tensor::full(vec![6], 1.0));
        let b = tape.constant(Tensor::zeros(vec![6]));
        let err = tape.group_norm(x, g, b, 4, 1e-5).unwrap_err().to_string();
        assert!(err.contains("must divide"), "{err}");
    }

    #[test]
    fn gradients_accumulate_over_fan_out() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let c = tape.constant(t(&[1], &[2.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
