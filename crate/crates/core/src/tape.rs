//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]; the
//! node keeps its output value plus whatever the local gradient rule needs.
//! [`Tape::backward`] consumes the tape and sweeps it once in reverse.
//!
//! Every forward result is checked for finiteness; a NaN or infinity is an
//! error naming the op that produced it.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::tensor::{broadcast_index, broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Pow(f64),
    Clamp { lo: f64, hi: f64 },
    Relu,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleKind {
    Downsample2,
    UpsampleNearest2,
}

/// Vector-Jacobian product of a custom op: `(inputs, output, upstream)` to one
/// gradient per input.
pub type CustomVjp = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Constant,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        c: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        count: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Resample {
        kind: ResampleKind,
        a: usize,
    },
    GroupNorm {
        x: usize,
        gain: usize,
        bias: usize,
        groups: usize,
        stats: GroupStats,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Custom {
        name: &'static str,
        inputs: Vec<usize>,
        vjp: CustomVjp,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Binary { kind, .. } => binary_name(*kind),
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Unary { kind, .. } => unary_name(kind),
            Op::Reduce {
                kind: ReduceKind::Sum, ..
            } => "sum",
            Op::Reduce {
                kind: ReduceKind::Mean, ..
            } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Conv3d { .. } => "conv3d",
            Op::Resample {
                kind: ResampleKind::Downsample2,
                ..
            } => "downsample2",
            Op::Resample {
                kind: ResampleKind::UpsampleNearest2,
                ..
            } => "upsample_nn2",
            Op::GroupNorm { .. } => "group_norm",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Custom { name, .. } => name,
        }
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn unary_name(kind: &UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Pow(_) => "pow",
        UnaryKind::Clamp { .. } => "clamp",
        UnaryKind::Relu => "relu",
        UnaryKind::Abs => "abs",
    }
}

/// Names of every built-in differentiable operation.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "exp",
    "log",
    "pow",
    "clamp",
    "relu",
    "abs",
    "sum",
    "mean",
    "softmax",
    "conv3d",
    "downsample2",
    "upsample_nn2",
    "group_norm",
    "concat",
    "reshape",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or `None` when no path connects it to the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    /// Name of the op behind every computed node, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Constant))
            .map(|n| n.op.name())
            .collect()
    }

    /// A differentiable input; its gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input treated as fixed data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&shape, ta.shape());
            let ib = broadcast_index(&shape, tb.shape());
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient. Denominators are not checked; a zero shows up as
    /// a non-finite output error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar { a: a.0 }, &[a.0])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::MulScalar { a: a.0, c }, &[a.0])
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = match kind {
            UnaryKind::Exp => t.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("input {bad} is not strictly positive"),
                    });
                }
                t.map(f64::ln)
            }
            UnaryKind::Pow(c) => {
                if c.fract() != 0.0 {
                    if let Some(bad) = t.data().iter().find(|&&v| v < 0.0) {
                        return Err(Error::Domain {
                            op: "pow",
                            detail: format!("negative base {bad} with non-integer exponent {c}"),
                        });
                    }
                }
                t.map(|v| v.powf(c))
            }
            UnaryKind::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::Domain {
                        op: "clamp",
                        detail: format!("empty interval [{lo}, {hi}]"),
                    });
                }
                t.map(|v| v.clamp(lo, hi))
            }
            UnaryKind::Relu => t.map(|v| v.max(0.0)),
            UnaryKind::Abs => t.map(f64::abs),
        };
        self.push(value, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn powf(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp { lo, hi }, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    // ---- reductions ----------------------------------------------------

    /// Reduces over `axes`, keeping them as extent-1 axes so the result
    /// broadcasts back against the input.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::shape(format!(
                "axis {bad} out of range for shape {:?}",
                t.shape()
            )));
        }
        let mut out_shape = t.shape().to_vec();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let out_n: usize = out_shape.iter().product();
        let count = t.numel() / out_n.max(1);
        let idx = broadcast_index(t.shape(), &out_shape);
        let mut data = vec![0.0; out_n];
        for (&v, &i) in t.data().iter().zip(&idx) {
            data[i] += v;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Reduce { kind, a: a.0, count }, &[a.0])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.mean(a, &axes)
    }

    // ---- structured ops ------------------------------------------------

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        self.push(value, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    /// Cross-correlation of `x: [C_in, D, H, W]` with `w: [C_out, C_in, k, k, k]`
    /// plus an optional per-output-channel `bias: [C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (cin, d, h, wd) = self.value(x).volume_dims()?;
        let ws = self.value(w).shape();
        let [cout, wcin, k, k2, k3] = ws[..] else {
            return Err(Error::shape(format!(
                "kernel must be [C_out, C_in, k, k, k], got {ws:?}"
            )));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if k != k2 || k != k3 {
            return Err(Error::shape(format!("kernel must be cubic, got {ws:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!(
                    "bias must be [{cout}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom::new(cin, cout, k, stride, padding, [d, h, wd])
            .ok_or_else(|| Error::shape(format!("kernel {k} / stride {stride} does not fit input {d}x{h}x{wd}")))?;
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let value = Tensor::new(vec![cout, od, oh, ow], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            &inputs,
        )
    }

    pub fn resample(&mut self, kind: ResampleKind, a: Var) -> Result<Var> {
        let (c, d, h, w) = self.value(a).volume_dims()?;
        let x = self.value(a).data();
        let value = match kind {
            ResampleKind::Downsample2 => {
                if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(format!("downsample2 needs even extents, got {d}x{h}x{w}")));
                }
                Tensor::new(vec![c, d / 2, h / 2, w / 2], kernels::downsample2(x, c, [d, h, w]))?
            }
            ResampleKind::UpsampleNearest2 => {
                Tensor::new(vec![c, 2 * d, 2 * h, 2 * w], kernels::upsample2(x, c, [d, h, w]))?
            }
        };
        self.push(value, Op::Resample { kind, a: a.0 }, &[a.0])
    }

    pub fn downsample2(&mut self, a: Var) -> Result<Var> {
        self.resample(ResampleKind::Downsample2, a)
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        self.resample(ResampleKind::UpsampleNearest2, a)
    }

    /// Group normalization over `x: [C, ...]` with per-channel `gain` and
    /// `bias` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 1 {
            return Err(Error::shape("group_norm needs a channel axis"));
        }
        let c = t.shape()[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        for p in [gain, bias] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(format!(
                    "group_norm affine parameters must be [{c}], got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        let per_channel = t.numel() / c;
        let (out, stats) = kernels::group_norm_forward(
            t.data(),
            c,
            per_channel,
            groups,
            eps,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            value,
            Op::GroupNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                groups,
                stats,
            },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "cannot concat {s:?} with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            value,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Records an op whose forward value was computed by the caller and whose
    /// gradient rule is `vjp`.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Result<Var> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            value,
            Op::Custom {
                name,
                inputs: ids.clone(),
                vjp,
            },
            &ids,
        )
    }

    // ---- reverse sweep -------------------------------------------------

    /// Reverse sweep from the scalar `loss`, consuming the tape. Leaves that
    /// the loss does not depend on get no entry.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Contract(format!("loss node {} is not on this tape", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(node, &g) {
                accumulate(&mut grads[input], contribution);
            }
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Binary { kind, a, b } => {
                let (ta, tb) = (val(a), val(b));
                let shape = node.value.shape();
                let same = ta.shape() == shape && tb.shape() == shape;
                let (ia, ib) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_index(shape, ta.shape()), broadcast_index(shape, tb.shape()))
                };
                let xa = |k: usize| if same { ta.data()[k] } else { ta.data()[ia[k]] };
                let xb = |k: usize| if same { tb.data()[k] } else { tb.data()[ib[k]] };
                let gd = g.data();
                if self.wants(a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for k in 0..gd.len() {
                        let local = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => xb(k),
                            BinaryKind::Div => 1.0 / xb(k),
                        };
                        ga[if same { k } else { ia[k] }] += gd[k] * local;
                    }
                    out.push((a, Tensor::new(ta.shape().to_vec(), ga).expect("shape")));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for k in 0..gd.len() {
                        let local = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => xa(k),
                            BinaryKind::Div => -xa(k) / (xb(k) * xb(k)),
                        };
                        gb[if same { k } else { ib[k] }] += gd[k] * local;
                    }
                    out.push((b, Tensor::new(tb.shape().to_vec(), gb).expect("shape")));
                }
            }
            &Op::AddScalar { a } => {
                if self.wants(a) {
                    out.push((a, g.clone()));
                }
            }
            &Op::MulScalar { a, c } => {
                if self.wants(a) {
                    out.push((a, g.map(|v| v * c)));
                }
            }
            &Op::Unary { kind, a } => {
                if self.wants(a) {
                    let x = val(a).data();
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| {
                            gk * match kind {
                                UnaryKind::Exp => y[k],
                                UnaryKind::Log => 1.0 / x[k],
                                UnaryKind::Pow(c) => {
                                    if c == 0.0 {
                                        0.0
                                    } else {
                                        c * x[k].powf(c - 1.0)
                                    }
                                }
                                UnaryKind::Clamp { lo, hi } => {
                                    if x[k] > lo && x[k] < hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Relu => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Abs => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else if x[k] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                        })
                        .collect();
                    out.push((a, Tensor::new(val(a).shape().to_vec(), data).expect("shape")));
                }
            }
            &Op::Reduce { kind, a, count } => {
                if self.wants(a) {
                    let ta = val(a);
                    let idx = broadcast_index(ta.shape(), g.shape());
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / count as f64,
                    };
                    let data = idx.iter().map(|&i| g.data()[i] * scale).collect();
                    out.push((a, Tensor::new(ta.shape().to_vec(), data).expect("shape")));
                }
            }
            &Op::Softmax { a, axis } => {
                if self.wants(a) {
                    let y = node.value.data();
                    let gd = g.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), axis).expect("axis checked in forward");
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    out.push((a, Tensor::new(node.value.shape().to_vec(), dx).expect("shape")));
                }
            }
            &Op::Conv3d { x, w, bias, geom } => {
                let (want_x, want_w) = (self.wants(x), self.wants(w));
                let (dx, dw, db) =
                    kernels::conv3d_backward(val(x).data(), val(w).data(), g.data(), &geom, want_x, want_w);
                if let Some(dx) = dx {
                    out.push((x, Tensor::new(val(x).shape().to_vec(), dx).expect("shape")));
                }
                if let Some(dw) = dw {
                    out.push((w, Tensor::new(val(w).shape().to_vec(), dw).expect("shape")));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    out.push((b, Tensor::from_vec(db)));
                }
            }
            &Op::Resample { kind, a } => {
                if self.wants(a) {
                    let (c, d, h, w) = val(a).volume_dims().expect("checked in forward");
                    let dx = match kind {
                        ResampleKind::Downsample2 => kernels::downsample2_adjoint(g.data(), c, [d, h, w]),
                        ResampleKind::UpsampleNearest2 => kernels::upsample2_adjoint(g.data(), c, [d, h, w]),
                    };
                    out.push((a, Tensor::new(val(a).shape().to_vec(), dx).expect("shape")));
                }
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                stats,
            } => {
                let tx = val(*x);
                let c = tx.shape()[0];
                let (dx, dgain, dbias) = kernels::group_norm_backward(
                    tx.data(),
                    g.data(),
                    c,
                    tx.numel() / c,
                    *groups,
                    val(*gain).data(),
                    stats,
                );
                if self.wants(*x) {
                    out.push((*x, Tensor::new(tx.shape().to_vec(), dx).expect("shape")));
                }
                if self.wants(*gain) {
                    out.push((*gain, Tensor::from_vec(dgain)));
                }
                if self.wants(*bias) {
                    out.push((*bias, Tensor::from_vec(dbias)));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis).expect("checked in forward");
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let t = val(i);
                    let block = t.shape()[*axis] * inner;
                    if self.wants(i) {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g.data()[start..start + block]);
                        }
                        out.push((i, Tensor::new(t.shape().to_vec(), d).expect("shape")));
                    }
                    offset += block;
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    let shape = val(a).shape().to_vec();
                    out.push((a, g.clone().reshape(shape).expect("same element count")));
                }
            }
            Op::Custom { inputs, vjp, .. } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                for (&i, gi) in inputs.iter().zip(vjp(&ins, &node.value, g)) {
                    if self.wants(i) {
                        out.push((i, gi));
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// `(outer, extent, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}
