//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node whose inputs
//! all have smaller ids, so insertion order is a topological order and the
//! backward sweep simply walks the tape in reverse.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, axis_geometry, Broadcast};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Gelu,
    Exp,
    Log,
    Abs,
    Square,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Sum(usize),
    Mean(usize),
    Variance(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    TransposeLast2(usize),
    Reshape(usize),
    ShiftTime {
        x: usize,
        lag: usize,
    },
    LagMix {
        x: usize,
        w: usize,
    },
    KernelLag {
        x: usize,
        h: usize,
        lags: usize,
        weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Variance(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::TransposeLast2(x)
            | Op::Reshape(x)
            | Op::ShiftTime { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LagMix { x, w } => vec![*x, *w],
            Op::KernelLag { x, h, .. } => vec![*x, *h],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only gradient tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_ran: Cell<bool>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn get_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            backward_ran: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that takes its gradient flag from the tensor.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t.shape().to_vec(), t.into_data(), false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(vec![1], vec![v], false)
    }

    fn leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'_>> {
        let inputs = op.inputs();
        let (requires_grad, inputs_finite) = {
            let nodes = self.nodes.borrow();
            let rg = inputs.iter().any(|&i| nodes[i].requires_grad);
            let finite = !cfg!(debug_assertions)
                || inputs.iter().all(|&i| nodes[i].value.iter().all(|v| v.is_finite()));
            (rg, finite)
        };
        if cfg!(debug_assertions) {
            let bad = value.iter().any(|v| v.is_nan() || (inputs_finite && v.is_infinite()));
            if bad {
                return Err(TensorError::NonFinite { op: name });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(TensorError::ForeignNode(v.id))
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    pub fn shape_of(&self, v: Var<'_>) -> Vec<usize> {
        self.node(v.id).shape.clone()
    }

    pub fn value_of(&self, v: Var<'_>) -> Tensor {
        let n = self.node(v.id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    pub fn matmul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(a)?;
        self.check_owner(b)?;
        let (shape, value) = {
            let (na, nb) = (self.node(a.id), self.node(b.id));
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return dim_err("matmul", format!("{:?} x {:?}", na.shape, nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, &na.value, false, &nb.value, false, &mut out, 0.0);
            (vec![m, n], out)
        };
        self.push("matmul", shape, value, Op::MatMul(a.id, b.id))
    }

    /// Batched product of `[B×m×k]` and `[B×k×n]`.
    pub fn bmm<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(a)?;
        self.check_owner(b)?;
        let (shape, value) = {
            let (na, nb) = (self.node(a.id), self.node(b.id));
            if na.shape.len() != 3
                || nb.shape.len() != 3
                || na.shape[0] != nb.shape[0]
                || na.shape[2] != nb.shape[1]
            {
                return dim_err("bmm", format!("{:?} x {:?}", na.shape, nb.shape));
            }
            let (bs, m, k, n) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &na.value[i * m * k..(i + 1) * m * k],
                    false,
                    &nb.value[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            (vec![bs, m, n], out)
        };
        self.push("bmm", shape, value, Op::BatchMatMul(a.id, b.id))
    }

    // ------------------------------------------------------------------
    // Element-wise
    // ------------------------------------------------------------------

    fn binary<'g>(&'g self, kind: BinaryKind, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(a)?;
        self.check_owner(b)?;
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (shape, value, map) = {
            let (na, nb) = (self.node(a.id), self.node(b.id));
            let (shape, map) = Broadcast::plan(&na.shape, &nb.shape)?;
            let n: usize = shape.iter().product();
            let mut out = vec![0.0; n];
            let (va, vb) = (&na.value, &nb.value);
            if kind == BinaryKind::Div {
                let mut zero = false;
                map.for_each(n, |_, _, ib| zero |= vb[ib] == 0.0);
                if zero {
                    return Err(TensorError::NumericDomain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
            }
            match kind {
                BinaryKind::Add => map.for_each(n, |i, ia, ib| out[i] = va[ia] + vb[ib]),
                BinaryKind::Sub => map.for_each(n, |i, ia, ib| out[i] = va[ia] - vb[ib]),
                BinaryKind::Mul => map.for_each(n, |i, ia, ib| out[i] = va[ia] * vb[ib]),
                BinaryKind::Div => map.for_each(n, |i, ia, ib| out[i] = va[ia] / vb[ib]),
            }
            (shape, out, map)
        };
        self.push(
            name,
            shape,
            value,
            Op::Binary {
                kind,
                a: a.id,
                b: b.id,
                map,
            },
        )
    }

    pub fn add<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary<'g>(&'g self, kind: UnaryKind, x: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let name = match kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Abs => "abs",
            UnaryKind::Square => "square",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        };
        let (shape, value) = {
            let n = self.node(x.id);
            if kind == UnaryKind::Log && n.value.iter().any(|&v| v <= 0.0) {
                return Err(TensorError::NumericDomain {
                    op: "log",
                    detail: "log of a non-positive value".into(),
                });
            }
            let f: fn(f64, f64) -> f64 = match kind {
                UnaryKind::Neg => |v, _| -v,
                UnaryKind::Tanh => |v, _| v.tanh(),
                UnaryKind::Sigmoid => |v, _| kernels::sigmoid(v),
                UnaryKind::Relu => |v, _| v.max(0.0),
                UnaryKind::LeakyRelu(_) => |v, s| if v >= 0.0 { v } else { s * v },
                UnaryKind::Gelu => |v, _| kernels::gelu(v),
                UnaryKind::Exp => |v, _| v.exp(),
                UnaryKind::Log => |v, _| v.ln(),
                UnaryKind::Abs => |v, _| v.abs(),
                UnaryKind::Square => |v, _| v * v,
                UnaryKind::Scale(_) => |v, c| v * c,
                UnaryKind::AddScalar(_) => |v, c| v + c,
            };
            let p = match kind {
                UnaryKind::LeakyRelu(s) | UnaryKind::Scale(s) | UnaryKind::AddScalar(s) => s,
                _ => 0.0,
            };
            (n.shape.clone(), n.value.iter().map(|&v| f(v, p)).collect())
        };
        self.push(name, shape, value, Op::Unary { kind, x: x.id })
    }

    pub fn neg<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn tanh<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn relu<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn leaky_relu<'g>(&'g self, x: Var<'g>, slope: f64) -> Result<Var<'g>> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }
    pub fn gelu<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Gelu, x)
    }
    pub fn exp<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn abs<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.unary(UnaryKind::Square, x)
    }
    pub fn scale<'g>(&'g self, x: Var<'g>, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryKind::Scale(c), x)
    }
    pub fn add_scalar<'g>(&'g self, x: Var<'g>, c: f64) -> Result<Var<'g>> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let s = self.node(x.id).value.iter().sum::<f64>();
        self.push("sum", vec![1], vec![s], Op::Sum(x.id))
    }

    pub fn mean<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let m = {
            let n = self.node(x.id);
            n.value.iter().sum::<f64>() / n.value.len() as f64
        };
        self.push("mean", vec![1], vec![m], Op::Mean(x.id))
    }

    /// Population variance over all elements.
    pub fn variance<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let v = {
            let n = self.node(x.id);
            let len = n.value.len() as f64;
            let m = n.value.iter().sum::<f64>() / len;
            n.value.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len
        };
        self.push("variance", vec![1], vec![v], Op::Variance(x.id))
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis<'g>(&'g self, x: Var<'g>, axis: usize) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let (shape, value) = {
            let n = self.node(x.id);
            if axis >= n.shape.len() {
                return dim_err("sum_axis", format!("axis {axis} of {:?}", n.shape));
            }
            let (outer, len, inner) = axis_geometry(&n.shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += n.value[(o * len + j) * inner + i];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape[axis] = 1;
            (shape, out)
        };
        self.push("sum_axis", shape, value, Op::SumAxis { x: x.id, axis })
    }

    // ------------------------------------------------------------------
    // Structure
    // ------------------------------------------------------------------

    pub fn softmax<'g>(&'g self, x: Var<'g>, axis: usize) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let (shape, value) = {
            let n = self.node(x.id);
            if axis >= n.shape.len() || n.shape[axis] == 0 {
                return dim_err("softmax", format!("axis {axis} of {:?}", n.shape));
            }
            (n.shape.clone(), kernels::softmax_axis(&n.shape, &n.value, axis))
        };
        self.push("softmax", shape, value, Op::Softmax { x: x.id, axis })
    }

    pub fn concat<'g>(&'g self, xs: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if xs.is_empty() {
            return dim_err("concat", "no inputs");
        }
        for &x in xs {
            self.check_owner(x)?;
        }
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].id].shape;
            if axis >= first.len() {
                return dim_err("concat", format!("axis {axis} of {first:?}"));
            }
            let mut total = 0;
            for x in xs {
                let s = &nodes[x.id].shape;
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return dim_err("concat", format!("{s:?} vs {first:?} on axis {axis}"));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_geometry(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for x in xs {
                    let n = &nodes[x.id];
                    let chunk = n.shape[axis] * inner;
                    out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, out)
        };
        self.push(
            "concat",
            shape,
            value,
            Op::Concat {
                inputs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    pub fn slice<'g>(&'g self, x: Var<'g>, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let (shape, value) = {
            let n = self.node(x.id);
            if axis >= n.shape.len() || len == 0 || start + len > n.shape[axis] {
                return dim_err(
                    "slice",
                    format!("[{start}..{}] on axis {axis} of {:?}", start + len, n.shape),
                );
            }
            let (outer, full, inner) = axis_geometry(&n.shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&n.value[base..base + len * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, out)
        };
        self.push("slice", shape, value, Op::Slice { x: x.id, axis, start })
    }

    /// Swaps the last two axes (plain transpose for 2-D input).
    pub fn transpose<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let (shape, value) = {
            let n = self.node(x.id);
            let r = n.shape.len();
            if r < 2 {
                return dim_err("transpose", format!("rank {r}"));
            }
            let (rows, cols) = (n.shape[r - 2], n.shape[r - 1]);
            let batch = n.value.len() / (rows * cols);
            let mut out = vec![0.0; n.value.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[off + j * rows + i] = n.value[off + i * cols + j];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.swap(r - 2, r - 1);
            (shape, out)
        };
        self.push("transpose", shape, value, Op::TransposeLast2(x.id))
    }

    pub fn reshape<'g>(&'g self, x: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let value = {
            let n = self.node(x.id);
            if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
                return dim_err("reshape", format!("{:?} -> {shape:?}", n.shape));
            }
            n.value.clone()
        };
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x.id))
    }

    // ------------------------------------------------------------------
    // Sequence ops on [B×T×F]
    // ------------------------------------------------------------------

    fn seq_dims(&self, x: Var<'_>, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape_of(x);
        if s.len() != 3 {
            return dim_err(op, format!("expected [B×T×F], got {s:?}"));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Delays the sequence by `lag` steps along axis 1, filling with zeros.
    pub fn shift_time<'g>(&'g self, x: Var<'g>, lag: usize) -> Result<Var<'g>> {
        self.check_owner(x)?;
        let (b, t, f) = self.seq_dims(x, "shift_time")?;
        let value = {
            let n = self.node(x.id);
            let mut out = vec![0.0; n.value.len()];
            for bi in 0..b {
                for ti in lag..t {
                    let dst = (bi * t + ti) * f;
                    let src = (bi * t + ti - lag) * f;
                    out[dst..dst + f].copy_from_slice(&n.value[src..src + f]);
                }
            }
            out
        };
        self.push("shift_time", vec![b, t, f], value, Op::ShiftTime { x: x.id, lag })
    }

    /// Causal weighted lag sum: `out[b,t] = Σ_{i<L, i≤t} w[i]·x[b,t−i]`.
    pub fn lag_mix<'g>(&'g self, x: Var<'g>, w: Var<'g>) -> Result<Var<'g>> {
        self.check_owner(x)?;
        self.check_owner(w)?;
        let (b, t, f) = self.seq_dims(x, "lag_mix")?;
        let value = {
            let (nx, nw) = (self.node(x.id), self.node(w.id));
            let lags = nw.value.len();
            let mut out = vec![0.0; nx.value.len()];
            for bi in 0..b {
                for ti in 0..t {
                    let dst = (bi * t + ti) * f;
                    for i in 0..lags.min(ti + 1) {
                        let wi = nw.value[i];
                        let src = (bi * t + ti - i) * f;
                        for k in 0..f {
                            out[dst + k] += wi * nx.value[src + k];
                        }
                    }
                }
            }
            out
        };
        self.push("lag_mix", vec![b, t, f], value, Op::LagMix { x: x.id, w: w.id })
    }

    /// Kernel-weighted average of the previous `lags` rows:
    /// `a[b,t] = Σ_j w_j·x[b,t−j]`, `w = softmax_j(−‖x[b,t] − x[b,t−j]‖²/h)`
    /// over the lags available at `t`. Row 0 has no history and passes through.
    pub fn kernel_lag_average<'g>(&'g self, x: Var<'g>, h: Var<'g>, lags: usize) -> Result<Var<'g>> {
        self.check_owner(x)?;
        self.check_owner(h)?;
        let (b, t, f) = self.seq_dims(x, "kernel_lag_average")?;
        if lags == 0 {
            return dim_err("kernel_lag_average", "lags must be at least 1");
        }
        let (value, weights) = {
            let (nx, nh) = (self.node(x.id), self.node(h.id));
            if nh.value.len() != 1 {
                return dim_err("kernel_lag_average", "bandwidth must be a single value");
            }
            let hv = nh.value[0];
            if !(hv > 0.0) {
                return Err(TensorError::NumericDomain {
                    op: "kernel_lag_average",
                    detail: format!("bandwidth must be positive, got {hv}"),
                });
            }
            let xv = &nx.value;
            let mut out = vec![0.0; xv.len()];
            let mut weights = vec![0.0; b * t * lags];
            let mut scores = vec![0.0; lags];
            for bi in 0..b {
                for ti in 0..t {
                    let dst = (bi * t + ti) * f;
                    let avail = lags.min(ti);
                    if avail == 0 {
                        out[dst..dst + f].copy_from_slice(&xv[dst..dst + f]);
                        continue;
                    }
                    for j in 1..=avail {
                        let src = (bi * t + ti - j) * f;
                        let d2: f64 = (0..f).map(|k| (xv[dst + k] - xv[src + k]).powi(2)).sum();
                        scores[j - 1] = -d2 / hv;
                    }
                    let max = scores[..avail].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores[..avail].iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let wrow = &mut weights[(bi * t + ti) * lags..(bi * t + ti + 1) * lags];
                    for j in 1..=avail {
                        let wj = scores[j - 1] / z;
                        wrow[j - 1] = wj;
                        let src = (bi * t + ti - j) * f;
                        for k in 0..f {
                            out[dst + k] += wj * xv[src + k];
                        }
                    }
                }
            }
            (out, weights)
        };
        self.push(
            "kernel_lag_average",
            vec![b, t, f],
            value,
            Op::KernelLag {
                x: x.id,
                h: h.id,
                lags,
                weights,
            },
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Allows another backward sweep over the same tape.
    pub fn reset_backward(&self) {
        self.backward_ran.set(false);
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root)?;
        if self.backward_ran.get() {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(nodes[root.id].shape.clone()));
        }
        self.backward_ran.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input >= id {
                    return Err(TensorError::Dimension {
                        op: "backward",
                        detail: format!("node {id} reads later node {input}; tape is not topological"),
                    });
                }
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        // Keep only leaf gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC·Bᵀ
                kernels::gemm(m, n, k, g, false, &nb.value, true, ga, 1.0);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ·dC
                kernels::gemm(k, m, n, &na.value, true, g, false, gb, 1.0);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (bs, m, k, n) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..bs {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &nb.value[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..bs {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &na.value[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        1.0,
                    );
                }
            }
        }
        Op::Binary { kind, a, b, map } => {
            let n = node.value.len();
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => map.for_each(n, |i, ia, _| ga[ia] += g[i]),
                    BinaryKind::Mul => map.for_each(n, |i, _ia, ib| ga[_ia] += g[i] * vb[ib]),
                    BinaryKind::Div => map.for_each(n, |i, ia, ib| ga[ia] += g[i] / vb[ib]),
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                match kind {
                    BinaryKind::Add => map.for_each(n, |i, _, ib| gb[ib] += g[i]),
                    BinaryKind::Sub => map.for_each(n, |i, _, ib| gb[ib] -= g[i]),
                    BinaryKind::Mul => map.for_each(n, |i, ia, ib| gb[ib] += g[i] * va[ia]),
                    BinaryKind::Div => {
                        map.for_each(n, |i, ia, ib| gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib]))
                    }
                }
            }
        }
        Op::Unary { kind, x } => {
            let xv = &nodes[*x].value;
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..gx.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Relu => (xv[i] > 0.0) as u8 as f64,
                        UnaryKind::LeakyRelu(s) => {
                            if xv[i] >= 0.0 {
                                1.0
                            } else {
                                *s
                            }
                        }
                        UnaryKind::Gelu => kernels::gelu_grad(xv[i]),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => 1.0 / xv[i],
                        UnaryKind::Abs => xv[i].signum() * (xv[i] != 0.0) as u8 as f64,
                        UnaryKind::Square => 2.0 * xv[i],
                        UnaryKind::Scale(c) => *c,
                        UnaryKind::AddScalar(_) => 1.0,
                    };
                    gx[i] += g[i] * d;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Variance(x) => {
            let xv = &nodes[*x].value;
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = xv.len() as f64;
                let m = xv.iter().sum::<f64>() / n;
                for (gi, xi) in gx.iter_mut().zip(xv) {
                    *gi += g[0] * 2.0 * (xi - m) / n;
                }
            }
        }
        Op::SumAxis { x, axis } => {
            let shape = nodes[*x].shape.clone();
            if let Some(gx) = acc(grads, nodes, *x) {
                let (outer, len, inner) = axis_geometry(&shape, *axis);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = axis_geometry(&node.shape, *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_geometry(&node.shape, *axis);
            let total = node.shape[*axis];
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].shape[*axis];
                if let Some(gx) = acc(grads, nodes, input) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let full_shape = nodes[*x].shape.clone();
            let len = node.shape[*axis];
            if let Some(gx) = acc(grads, nodes, *x) {
                let (outer, full, inner) = axis_geometry(&full_shape, *axis);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        gx[dst + k] += g[src + k];
                    }
                }
            }
        }
        Op::TransposeLast2(x) => {
            let r = node.shape.len();
            // node shape is the transposed one: [.., cols, rows]
            let (cols, rows) = (node.shape[r - 2], node.shape[r - 1]);
            if let Some(gx) = acc(grads, nodes, *x) {
                let batch = gx.len() / (rows * cols);
                for b in 0..batch {
                    let off = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::ShiftTime { x, lag } => {
            let (b, t, f) = (node.shape[0], node.shape[1], node.shape[2]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for bi in 0..b {
                    for ti in *lag..t {
                        let src = (bi * t + ti) * f;
                        let dst = (bi * t + ti - lag) * f;
                        for k in 0..f {
                            gx[dst + k] += g[src + k];
                        }
                    }
                }
            }
        }
        Op::LagMix { x, w } => {
            let (b, t, f) = (node.shape[0], node.shape[1], node.shape[2]);
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let lags = wv.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for bi in 0..b {
                    for ti in 0..t {
                        let src = (bi * t + ti) * f;
                        for i in 0..lags.min(ti + 1) {
                            let dst = (bi * t + ti - i) * f;
                            for k in 0..f {
                                gx[dst + k] += wv[i] * g[src + k];
                            }
                        }
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for bi in 0..b {
                    for ti in 0..t {
                        let out = (bi * t + ti) * f;
                        for (i, gwi) in gw.iter_mut().enumerate().take(lags.min(ti + 1)) {
                            let src = (bi * t + ti - i) * f;
                            *gwi += (0..f).map(|k| g[out + k] * xv[src + k]).sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::KernelLag { x, h, lags, weights } => {
            let (b, t, f) = (node.shape[0], node.shape[1], node.shape[2]);
            let xv = &nodes[*x].value;
            let hv = nodes[*h].value[0];
            let lags = *lags;
            let mut gx_local = vec![0.0; xv.len()];
            let mut gh_local = 0.0;
            let mut dw = vec![0.0; lags];
            for bi in 0..b {
                for ti in 0..t {
                    let row = (bi * t + ti) * f;
                    let gout = &g[row..row + f];
                    let avail = lags.min(ti);
                    if avail == 0 {
                        for k in 0..f {
                            gx_local[row + k] += gout[k];
                        }
                        continue;
                    }
                    let w = &weights[(bi * t + ti) * lags..(bi * t + ti) * lags + avail];
                    // value path and dL/dw_j
                    for j in 1..=avail {
                        let src = (bi * t + ti - j) * f;
                        let mut d = 0.0;
                        for k in 0..f {
                            gx_local[src + k] += w[j - 1] * gout[k];
                            d += gout[k] * xv[src + k];
                        }
                        dw[j - 1] = d;
                    }
                    let wdot: f64 = (0..avail).map(|j| w[j] * dw[j]).sum();
                    // score path: s_j = −‖x_t − x_{t−j}‖²/h
                    for j in 1..=avail {
                        let ds = w[j - 1] * (dw[j - 1] - wdot);
                        if ds == 0.0 {
                            continue;
                        }
                        let src = (bi * t + ti - j) * f;
                        let mut d2 = 0.0;
                        for k in 0..f {
                            let diff = xv[row + k] - xv[src + k];
                            d2 += diff * diff;
                            let gd = ds * (-2.0 * diff / hv);
                            gx_local[row + k] += gd;
                            gx_local[src + k] -= gd;
                        }
                        gh_local += ds * d2 / (hv * hv);
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b);
            }
            if let Some(gh) = acc(grads, nodes, *h) {
                gh[0] += gh_local;
            }
        }
    }
}

macro_rules! forward_unary {
    ($($name:ident),*) => {
        $(
            pub fn $name(self) -> Result<Var<'g>> {
                self.graph.$name(self)
            }
        )*
    };
}

macro_rules! forward_binary {
    ($($name:ident),*) => {
        $(
            pub fn $name(self, other: Var<'g>) -> Result<Var<'g>> {
                self.graph.$name(self, other)
            }
        )*
    };
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.shape_of(self)
    }

    pub fn value(self) -> Tensor {
        self.graph.value_of(self)
    }

    /// Value of a single-element node.
    pub fn item(self) -> f64 {
        self.graph.node(self.id).value[0]
    }

    pub fn to_vec(self) -> Vec<f64> {
        self.graph.node(self.id).value.clone()
    }

    forward_unary!(neg, tanh, sigmoid, relu, gelu, exp, log, abs, square, sum, mean, variance, transpose);
    forward_binary!(matmul, bmm, add, sub, mul, div, lag_mix);

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        self.graph.leaky_relu(self, slope)
    }
    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.graph.scale(self, c)
    }
    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.graph.add_scalar(self, c)
    }
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        self.graph.softmax(self, axis)
    }
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.graph.sum_axis(self, axis)
    }
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        self.graph.slice(self, axis, start, len)
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        self.graph.reshape(self, shape)
    }
    pub fn shift_time(self, lag: usize) -> Result<Var<'g>> {
        self.graph.shift_time(self, lag)
    }
}
