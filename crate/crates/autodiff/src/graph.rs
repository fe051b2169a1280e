//! Define-by-run computation graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for the trainable parameters registered with
//! [`Graph::param`]. A graph may be differentiated exactly once; build a new
//! one for the next step.
//!
//! Broadcasting is limited to one-element tensors combined with arbitrary
//! tensors in `add`/`sub`/`mul`. Everything else demands matching shapes or
//! goes through the explicit [`Graph::broadcast_to`] and [`Graph::add_bias`].

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, BroadcastMap};
use crate::param::{GradientMap, ParamGroup, Parameter};
use crate::tensor::{numel, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// `(..., M, K) @ (K, N)`
    Shared,
    /// `(S, M, K) @ (S, K, N)`
    Batched,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize, MatMulKind),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    L2Norm(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    TransposeLast(usize),
    Reshape(usize),
    BroadcastTo(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
struct Registered {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    node: usize,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    params: Vec<Registered>,
    consumed: bool,
    flops: u64,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating point operations spent in matrix products so far.
    pub fn matmul_flops(&self) -> u64 {
        self.inner.borrow().flops
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.inner.borrow().nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: inner.nodes.len() - 1,
        })
    }

    fn requires(&self, idx: &[usize]) -> bool {
        let inner = self.inner.borrow();
        idx.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a parameter as a leaf. Frozen parameters become constants.
    pub fn param(&self, p: &Parameter) -> Result<Var> {
        if p.is_frozen() {
            return self.push("param", p.value.clone(), Op::Leaf, false);
        }
        let v = self.push("param", p.value.clone(), Op::Leaf, true)?;
        self.inner.borrow_mut().params.push(Registered {
            name: p.name().to_string(),
            group: p.group(),
            shape: p.value.shape().to_vec(),
            node: v.index,
        });
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.inner.borrow().nodes[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.inner.borrow().nodes[i].value.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let i = self.check(v)?;
        let inner = self.inner.borrow();
        let t = &inner.nodes[i].value;
        t.item().ok_or_else(|| AutodiffError::NotScalar(t.shape().to_vec()))
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[ia].value, &inner.nodes[ib].value);
            if ta.shape() == tb.shape() {
                Tensor::new(
                    ta.shape().to_vec(),
                    ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
                )?
            } else if tb.numel() == 1 {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            } else if ta.numel() == 1 {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op: op_name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        };
        let rg = self.requires(&[ia, ib]);
        self.push(op_name, value, make(ia, ib), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.check(x)?;
        if !factor.is_finite() {
            return Err(AutodiffError::NonFinite { op: "scale" });
        }
        let value = self.inner.borrow().nodes[ix].value.map(|v| v * factor);
        let rg = self.requires(&[ix]);
        self.push("scale", value, Op::Scale(ix, factor), rg)
    }

    /// `1 - x`, the complement used for blends and sigmoid mirrors.
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        let one = self.scalar(1.0)?;
        self.sub(one, x)
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let value = {
            let inner = self.inner.borrow();
            let (tx, tb) = (&inner.nodes[ix].value, &inner.nodes[ib].value);
            let width = tx.shape().last().copied().unwrap_or(0);
            if tb.rank() != 1 || tb.numel() != width {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_bias",
                    lhs: tx.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut out = tx.clone();
            for row in out.data_mut().chunks_mut(width) {
                for (o, b) in row.iter_mut().zip(tb.data()) {
                    *o += b;
                }
            }
            out
        };
        let rg = self.requires(&[ix, ib]);
        self.push("add_bias", value, Op::AddBias(ix, ib), rg)
    }

    // ---- matrix product -----------------------------------------------------

    /// Matrix product. Accepts `(..., M, K) @ (K, N)` with the right operand
    /// shared across leading dimensions, or `(S, M, K) @ (S, K, N)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, kind, flops) = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[ia].value, &inner.nodes[ib].value);
            let mismatch = || AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            };
            if ta.rank() < 2 {
                return Err(mismatch());
            }
            let sa = ta.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            match tb.shape() {
                &[kb, n] if kb == k => {
                    let rows = numel(&sa[..sa.len() - 1]);
                    let mut out = vec![0.0; rows * n];
                    kernels::gemm(rows, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
                    let mut shape = sa[..sa.len() - 1].to_vec();
                    shape.push(n);
                    (Tensor::new(shape, out)?, MatMulKind::Shared, 2 * rows * k * n)
                }
                [s, kb, n] if sa.len() == 3 && *s == sa[0] && *kb == k => {
                    let (s, n) = (*s, *n);
                    let mut out = vec![0.0; s * m * n];
                    for i in 0..s {
                        kernels::gemm(
                            m,
                            k,
                            n,
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            false,
                            &mut out[i * m * n..(i + 1) * m * n],
                            0.0,
                        );
                    }
                    (Tensor::new(vec![s, m, n], out)?, MatMulKind::Batched, 2 * s * m * k * n)
                }
                _ => return Err(mismatch()),
            }
        };
        self.inner.borrow_mut().flops += flops as u64;
        let rg = self.requires(&[ia, ib]);
        self.push("matmul", value, Op::MatMul(ia, ib, kind), rg)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&self, op_name: &'static str, x: Var, f: impl Fn(f64) -> f64, make: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.inner.borrow().nodes[ix].value.map(f);
        let rg = self.requires(&[ix]);
        self.push(op_name, value, make(ix), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs)
    }

    // ---- row-wise (last axis) -----------------------------------------------

    fn rowwise(&self, op_name: &'static str, x: Var, mut f: impl FnMut(&mut [f64])) -> Result<(usize, Tensor)> {
        let ix = self.check(x)?;
        let inner = self.inner.borrow();
        let t = &inner.nodes[ix].value;
        if t.rank() == 0 {
            return Err(AutodiffError::BadAxis {
                op: op_name,
                axis: 0,
                rank: 0,
            });
        }
        let width = *t.shape().last().unwrap();
        let mut out = t.clone();
        if width > 0 {
            out.data_mut().chunks_mut(width).for_each(&mut f);
        }
        Ok((ix, out))
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (ix, value) = self.rowwise("softmax", x, kernels::softmax_row)?;
        let rg = self.requires(&[ix]);
        self.push("softmax", value, Op::Softmax(ix), rg)
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let (ix, value) = self.rowwise("log_softmax", x, kernels::log_softmax_row)?;
        let rg = self.requires(&[ix]);
        self.push("log_softmax", value, Op::LogSoftmax(ix), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let mut inv_std = Vec::new();
        let (ix, value) = {
            let ix = self.check(x)?;
            let inner = self.inner.borrow();
            let t = &inner.nodes[ix].value;
            let width = t.shape().last().copied().unwrap_or(0);
            if width == 0 {
                return Err(AutodiffError::InvalidArgument {
                    op: "layer_norm",
                    reason: "empty last axis".into(),
                });
            }
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(width) {
                inv_std.push(kernels::layer_norm_row(row, eps));
            }
            (ix, out)
        };
        let rg = self.requires(&[ix]);
        self.push("layer_norm", value, Op::LayerNorm { x: ix, inv_std }, rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let mut norms = Vec::new();
        let (ix, value) = self.rowwise("normalize_rows", x, |row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        })?;
        let rg = self.requires(&[ix]);
        self.push("normalize_rows", value, Op::NormalizeRows { x: ix, norms }, rg)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.inner.borrow().nodes[ix].value.sum());
        let rg = self.requires(&[ix]);
        self.push("sum", value, Op::Sum(ix), rg)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[ix].value;
            Tensor::scalar(t.sum() / t.numel() as f64)
        };
        let rg = self.requires(&[ix]);
        self.push("mean", value, Op::Mean(ix), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[ix].value;
            if t.rank() == 0 {
                return Err(AutodiffError::BadAxis {
                    op: "sum_last",
                    axis: 0,
                    rank: 0,
                });
            }
            let width = *t.shape().last().unwrap();
            let data = if width == 0 {
                vec![0.0; numel(&t.shape()[..t.rank() - 1])]
            } else {
                t.data().chunks(width).map(|r| r.iter().sum()).collect()
            };
            Tensor::new(t.shape()[..t.rank() - 1].to_vec(), data)?
        };
        let rg = self.requires(&[ix]);
        self.push("sum_last", value, Op::SumLast(ix), rg)
    }

    /// Euclidean norm of the whole tensor. The gradient at zero is zero.
    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.inner.borrow().nodes[ix].value.l2_norm());
        let rg = self.requires(&[ix]);
        self.push("l2_norm", value, Op::L2Norm(ix), rg)
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let value = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor> = idx.iter().map(|&i| &inner.nodes[i].value).collect();
            kernels::concat(&tensors, axis)?
        };
        let rg = self.requires(&idx);
        self.push("concat", value, Op::Concat { parts: idx, axis }, rg)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = kernels::slice(&self.inner.borrow().nodes[ix].value, axis, start, len)?;
        let rg = self.requires(&[ix]);
        self.push("slice", value, Op::Slice { x: ix, axis, start }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = kernels::transpose_last(&self.inner.borrow().nodes[ix].value)?;
        let rg = self.requires(&[ix]);
        self.push("transpose", value, Op::TransposeLast(ix), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.inner.borrow().nodes[ix].value.clone().reshaped(shape)?;
        let rg = self.requires(&[ix]);
        self.push("reshape", value, Op::Reshape(ix), rg)
    }

    /// Explicit numpy-style expansion: leading axes may be added and
    /// size-one axes repeated.
    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[ix].value;
            let map = BroadcastMap::new(t.shape(), shape)?;
            let mut out = vec![0.0; numel(shape)];
            map.for_each(|dst, src| out[dst] = t.data()[src]);
            Tensor::new(shape.to_vec(), out)?
        };
        let rg = self.requires(&[ix]);
        self.push("broadcast_to", value, Op::BroadcastTo(ix), rg)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss.
    ///
    /// Every trainable parameter registered in this graph gets an entry,
    /// zero-filled when the loss does not depend on it. The graph is consumed.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let il = self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        if inner.nodes[il].value.numel() != 1 {
            return Err(AutodiffError::NotScalar(inner.nodes[il].value.shape().to_vec()));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(nodes[il].value.shape(), 1.0));

        for i in (0..=il).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            backprop(nodes, i, &gy, &mut grads)?;
        }

        let mut map = GradientMap::new();
        for reg in &inner.params {
            let g = grads[reg.node].clone().unwrap_or_else(|| Tensor::zeros(&reg.shape));
            match map.get_mut(&reg.name) {
                Some(acc) => acc.axpy(1.0, &g)?,
                None => map.insert(reg.name.clone(), reg.group, g),
            }
        }
        Ok(map)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], target: usize, contribution: Tensor) -> Result<()> {
    if !nodes[target].requires_grad {
        return Ok(());
    }
    let tshape = nodes[target].value.shape();
    // Scalar operands of broadcast binary ops receive the summed gradient.
    let contribution = if contribution.shape() != tshape && numel(tshape) == 1 {
        Tensor::new(tshape.to_vec(), vec![contribution.sum()])?
    } else {
        contribution
    };
    match &mut grads[target] {
        Some(acc) => acc.axpy(1.0, &contribution)?,
        slot @ None => *slot = Some(contribution),
    }
    Ok(())
}

/// `gy` expanded to the shape of the binary op output `out_shape` when the
/// operand was a broadcast scalar.
fn elementwise(gy: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.shape() == gy.shape() {
        Tensor::new(
            gy.shape().to_vec(),
            gy.data().iter().zip(other.data()).map(|(&g, &o)| f(g, o)).collect(),
        )
        .expect("same shape")
    } else {
        let o = other.data()[0];
        gy.map(|g| f(g, o))
    }
}

fn backprop(nodes: &[Node], i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let y = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    let rg = |j: usize| nodes[j].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, gy.clone())?;
            accumulate(grads, nodes, *b, gy.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, gy.clone())?;
            accumulate(grads, nodes, *b, gy.map(|g| -g))?;
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, elementwise(gy, val(*b), |g, o| g * o))?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, elementwise(gy, val(*a), |g, o| g * o))?;
            }
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, gy.map(|g| g * c))?,
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, gy.clone())?;
            if rg(*b) {
                let width = val(*b).numel();
                let mut gb = vec![0.0; width];
                for row in gy.data().chunks(width) {
                    gb.iter_mut().zip(row).for_each(|(acc, g)| *acc += g);
                }
                accumulate(grads, nodes, *b, Tensor::new(vec![width], gb)?)?;
            }
        }
        Op::MatMul(a, b, kind) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = ta.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = *tb.shape().last().unwrap();
            match kind {
                MatMulKind::Shared => {
                    let rows = numel(&sa[..sa.len() - 1]);
                    if rg(*a) {
                        let mut ga = vec![0.0; rows * k];
                        kernels::gemm(rows, n, k, gy.data(), false, tb.data(), true, &mut ga, 0.0);
                        accumulate(grads, nodes, *a, Tensor::new(sa.to_vec(), ga)?)?;
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, rows, n, ta.data(), true, gy.data(), false, &mut gb, 0.0);
                        accumulate(grads, nodes, *b, Tensor::new(vec![k, n], gb)?)?;
                    }
                }
                MatMulKind::Batched => {
                    let s = sa[0];
                    if rg(*a) {
                        let mut ga = vec![0.0; s * m * k];
                        for bi in 0..s {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gy.data()[bi * m * n..(bi + 1) * m * n],
                                false,
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                0.0,
                            );
                        }
                        accumulate(grads, nodes, *a, Tensor::new(sa.to_vec(), ga)?)?;
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; s * k * n];
                        for bi in 0..s {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                true,
                                &gy.data()[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                0.0,
                            );
                        }
                        accumulate(grads, nodes, *b, Tensor::new(vec![s, k, n], gb)?)?;
                    }
                }
            }
        }
        Op::Sigmoid(x) => accumulate(grads, nodes, *x, elementwise(gy, y, |g, s| g * s * (1.0 - s)))?,
        Op::Tanh(x) => accumulate(grads, nodes, *x, elementwise(gy, y, |g, t| g * (1.0 - t * t)))?,
        Op::Exp(x) => accumulate(grads, nodes, *x, elementwise(gy, y, |g, e| g * e))?,
        Op::Log(x) => accumulate(grads, nodes, *x, elementwise(gy, val(*x), |g, v| g / v))?,
        Op::Abs(x) => accumulate(
            grads,
            nodes,
            *x,
            elementwise(gy, val(*x), |g, v| {
                if v > 0.0 {
                    g
                } else if v < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
        )?,
        Op::Softmax(x) => {
            let width = *y.shape().last().unwrap();
            let mut gx = gy.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                grow.iter_mut().zip(yrow).for_each(|(g, p)| *g = p * (*g - dot));
            }
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::LogSoftmax(x) => {
            let width = *y.shape().last().unwrap();
            let mut gx = gy.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                let total: f64 = grow.iter().sum();
                grow.iter_mut().zip(yrow).for_each(|(g, ly)| *g -= ly.exp() * total);
            }
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::LayerNorm { x, inv_std } => {
            let width = *y.shape().last().unwrap();
            let mut gx = gy.clone();
            for ((grow, yrow), is) in gx.data_mut().chunks_mut(width).zip(y.data().chunks(width)).zip(inv_std) {
                let w = width as f64;
                let mean_g: f64 = grow.iter().sum::<f64>() / w;
                let mean_gy: f64 = grow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / w;
                grow.iter_mut().zip(yrow).for_each(|(g, v)| *g = is * (*g - mean_g - v * mean_gy));
            }
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Sum(x) => {
            let g = gy.data()[0];
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), g))?;
        }
        Op::Mean(x) => {
            let g = gy.data()[0] / val(*x).numel() as f64;
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), g))?;
        }
        Op::SumLast(x) => {
            let shape = val(*x).shape();
            let width = *shape.last().unwrap();
            let mut gx = Vec::with_capacity(numel(shape));
            for &g in gy.data() {
                gx.extend(std::iter::repeat_n(g, width));
            }
            accumulate(grads, nodes, *x, Tensor::new(shape.to_vec(), gx)?)?;
        }
        Op::L2Norm(x) => {
            let norm = y.data()[0];
            let g = gy.data()[0];
            let gx = if norm > 0.0 {
                val(*x).map(|v| g * v / norm)
            } else {
                Tensor::zeros(val(*x).shape())
            };
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::NormalizeRows { x, norms } => {
            let width = *y.shape().last().unwrap();
            let mut gx = gy.clone();
            for ((grow, yrow), n) in gx.data_mut().chunks_mut(width).zip(y.data().chunks(width)).zip(norms) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, v)| g * v).sum();
                grow.iter_mut().zip(yrow).for_each(|(g, v)| *g = (*g - v * dot) / n);
            }
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if rg(p) {
                    accumulate(grads, nodes, p, kernels::slice(gy, *axis, start, len)?)?;
                }
                start += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let gx = kernels::scatter_slice(val(*x).shape(), gy, *axis, *start)?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::TransposeLast(x) => accumulate(grads, nodes, *x, kernels::transpose_last(gy)?)?,
        Op::Reshape(x) => accumulate(grads, nodes, *x, gy.clone().reshaped(val(*x).shape())?)?,
        Op::BroadcastTo(x) => {
            let src_shape = val(*x).shape();
            let map = BroadcastMap::new(src_shape, gy.shape())?;
            let mut gx = vec![0.0; numel(src_shape)];
            map.for_each(|dst, src| gx[src] += gy.data()[dst]);
            accumulate(grads, nodes, *x, Tensor::new(src_shape.to_vec(), gx)?)?;
        }
    }
    Ok(())
}
