use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::resize::ResizePlan;
use super::{Primitive, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    LogSoftmax(usize),
    Reshape(usize),
    Slice(usize, usize),
    Concat(Vec<usize>),
    ResizeBilinear(usize, Rc<ResizePlan>),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::AddBias(..) => Primitive::AddBias,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Relu(_) => Primitive::Relu,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::LogSoftmax(_) => Primitive::LogSoftmax,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Slice(..) => Primitive::Slice,
            Op::Concat(_) => Primitive::Concat,
            Op::ResizeBilinear(..) => Primitive::ResizeBilinear,
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Records primitive operations in execution order for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Option<Primitive>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `primitive` is deliberately wrong
    /// (upstream gradient halved). Used to prove the gradient checker
    /// catches broken rules.
    pub fn with_fault(primitive: Primitive) -> Self {
        Tape {
            nodes: RefCell::default(),
            fault: Some(primitive),
        }
    }

    pub fn fault(&self) -> Option<Primitive> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => nodes[*a].requires_grad || nodes[*b].requires_grad,
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::Slice(a, _)
            | Op::ResizeBilinear(a, _) => nodes[*a].requires_grad,
            Op::Concat(parts) => parts.iter().any(|p| nodes[*p].requires_grad),
        };
        nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let var = self.push(Op::Leaf, shape, value);
        self.nodes.borrow_mut()[var.0].requires_grad = requires_grad;
        var
    }

    /// Records `tensor` as a leaf. It participates in differentiation iff
    /// the tensor is marked learnable.
    pub fn leaf(&self, tensor: &Tensor) -> Var {
        self.push_leaf(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// Records `tensor` as a constant regardless of its learnable flag.
    pub fn constant(&self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    /// Copies the current value of `v` into a new gradient-free leaf.
    pub fn detach(&self, v: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (nodes[v.0].shape.clone(), nodes[v.0].value.clone())
        };
        self.push_leaf(shape, value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |nodes| nodes[v.0].value.as_slice())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.borrow()[v.0].op, Op::Leaf)
    }

    /// Reads a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
            .expect("tape nodes always hold consistent shapes")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::shape("matmul", &na.shape, &nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                &na.value,
                Layout::Row,
                &nb.value,
                Layout::Row,
                &mut out,
            );
            (vec![m, n], out)
        };
        Ok(self.push(Op::MatMul(a.0, b.0), shape, value))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(Error::shape("transpose", &na.shape, &[]));
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            (vec![c, r], transposed(&na.value, r, c))
        };
        Ok(self.push(Op::Transpose(a.0), shape, value))
    }

    /// Elementwise sum. When `b`'s shape is a strict suffix of `a`'s
    /// shape it is broadcast over the leading dimensions (bias add);
    /// any other mismatch is an error.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (op, shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape == nb.shape {
                let value = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
                (Op::Add(a.0, b.0), na.shape.clone(), value)
            } else if !nb.shape.is_empty()
                && nb.shape.len() < na.shape.len()
                && na.shape.ends_with(&nb.shape)
            {
                let width = nb.value.len();
                let value = na
                    .value
                    .chunks(width)
                    .flat_map(|row| row.iter().zip(&nb.value).map(|(x, y)| x + y))
                    .collect();
                (Op::AddBias(a.0, b.0), na.shape.clone(), value)
            } else {
                return Err(Error::shape("add", &na.shape, &nb.shape));
            }
        };
        Ok(self.push(op, shape, value))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), shape, value))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), shape, value))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((na.shape.clone(), value))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        (na.shape.clone(), na.value.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let (shape, value) = self.map(a, |x| x * factor);
        self.push(Op::Scale(a.0, factor), shape, value)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let (shape, value) = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a.0), shape, value)
    }

    pub fn exp(&self, a: Var) -> Var {
        let (shape, value) = self.map(a, f64::exp);
        self.push(Op::Exp(a.0), shape, value)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let (shape, value) = self.map(a, f64::ln);
        Ok(self.push(Op::Log(a.0), shape, value))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a.0), Vec::new(), vec![total])
    }

    pub fn mean(&self, a: Var) -> Var {
        let mean = {
            let value = self.value(a);
            value.iter().sum::<f64>() / value.len() as f64
        };
        self.push(Op::Mean(a.0), Vec::new(), vec![mean])
    }

    /// Log-softmax over the last dimension, computed with max subtraction.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let classes = na.shape.last().copied().unwrap_or(1);
            if classes < 2 {
                return Err(Error::Contract(format!(
                    "log_softmax needs at least two classes, got shape {:?}",
                    na.shape
                )));
            }
            let mut out = Vec::with_capacity(na.value.len());
            for row in na.value.chunks(classes) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            (na.shape.clone(), out)
        };
        Ok(self.push(Op::LogSoftmax(a.0), shape, value))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let numel: usize = shape.iter().product();
            if numel != na.value.len() || shape.contains(&0) {
                return Err(Error::shape("reshape", &na.shape, shape));
            }
            na.value.clone()
        };
        Ok(self.push(Op::Reshape(a.0), shape.to_vec(), value))
    }

    /// Contiguous window `[start, start + len)` of the flattened data.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if len == 0 || start + len > na.value.len() {
                return Err(Error::shape("slice", &na.shape, &[start, len]));
            }
            na.value[start..start + len].to_vec()
        };
        Ok(self.push(Op::Slice(a.0, start), vec![len], value))
    }

    /// Flattens each part and concatenates them into one vector.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let value: Vec<f64> = {
            let nodes = self.nodes.borrow();
            parts
                .iter()
                .flat_map(|p| nodes[p.0].value.iter().copied())
                .collect()
        };
        let len = value.len();
        Ok(self.push(
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            vec![len],
            value,
        ))
    }

    /// Bilinear resize of the two trailing dimensions to `height × width`.
    pub fn resize_bilinear(&self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (shape, value, plan) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let nd = na.shape.len();
            if nd < 2 || height == 0 || width == 0 {
                return Err(Error::shape("resize_bilinear", &na.shape, &[height, width]));
            }
            let (in_h, in_w) = (na.shape[nd - 2], na.shape[nd - 1]);
            let planes = na.value.len() / (in_h * in_w);
            let plan = ResizePlan::new(planes, in_h, in_w, height, width);
            let mut shape = na.shape[..nd - 2].to_vec();
            shape.extend([height, width]);
            (shape, plan.forward(&na.value), plan)
        };
        Ok(self.push(Op::ResizeBilinear(a.0, Rc::new(plan)), shape, value))
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient of every
    /// node that depends on a learnable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault.is_some() && node.op.primitive() == self.fault {
                g.iter_mut().for_each(|v| *v *= 0.5);
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| matches!(n.op, Op::Leaf) && n.requires_grad && grads[*i].is_some())
            .map(|(i, _)| Var(i))
            .collect();
        Ok(Gradients { grads, leaves })
    }
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Learnable leaves that received a gradient, in recording order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s accumulator.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
) -> Option<&'a mut [f64]> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(
        grads[idx]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice(),
    )
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if let Some(da) = slot(grads, nodes, *a) {
                // dA += G · Bᵀ
                gemm_acc(m, n, k, g, Layout::Row, &nodes[*b].value, Layout::Col, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // dB += Aᵀ · G
                gemm_acc(k, m, n, &nodes[*a].value, Layout::Col, g, Layout::Row, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for idx in [*a, *b] {
                if let Some(d) = slot(grads, nodes, idx) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::AddBias(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let width = db.len();
                for row in g.chunks(width) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let other = &nodes[*b].value;
                for ((d, g), o) in da.iter_mut().zip(g).zip(other) {
                    *d += g * o;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let other = &nodes[*a].value;
                for ((d, g), o) in db.iter_mut().zip(g).zip(other) {
                    *d += g * o;
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
            }
        }
        Op::Relu(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let input = &nodes[*a].value;
                for ((d, g), x) in da.iter_mut().zip(g).zip(input) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, g), y) in da.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y;
                }
            }
        }
        Op::Log(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let input = &nodes[*a].value;
                for ((d, g), x) in da.iter_mut().zip(g).zip(input) {
                    *d += g / x;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let share = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += share);
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let classes = *node.shape.last().unwrap();
                for ((d, g), y) in da
                    .chunks_mut(classes)
                    .zip(g.chunks(classes))
                    .zip(node.value.chunks(classes))
                {
                    let total: f64 = g.iter().sum();
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g - y.exp() * total;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Slice(a, start) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(dp) = slot(grads, nodes, p) {
                    dp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::ResizeBilinear(a, plan) => {
            if let Some(da) = slot(grads, nodes, *a) {
                plan.backward(g, da);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    /// Stored as given.
    Row,
    /// Stored transposed: the logical `r × c` operand is a `c × r` buffer.
    Col,
}

fn strides(layout: Layout, rows: usize, cols: usize) -> (isize, isize) {
    match layout {
        Layout::Row => (cols as isize, 1),
        Layout::Col => (1, rows as isize),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = strides(la, m, k);
    let (rsb, csb) = strides(lb, k, n);
    // SAFETY: bounds asserted above; strides describe dense buffers of
    // exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_impl(m, k, n, a, la, b, lb, c, 0.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
) {
    gemm_impl(m, k, n, a, la, b, lb, c, 1.0);
}

fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::new();
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(&*tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let col = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(row, col).unwrap();
        assert_eq!(&*tape.value(p), &[11.0]);
        assert_eq!(tape.shape(p), vec![1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn relu_and_mean_values() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(&*tape.value(tape.relu(x)), &[0.0, 0.0, 2.0]);
        let y = tape.leaf(&Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        assert_eq!(tape.scalar(tape.mean(y)).unwrap(), 4.0);
    }

    #[test]
    fn mean_relu_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 1.0]).learnable());
        let loss = tape.mean(tape.relu(x));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn log_softmax_examples() {
        let tape = Tape::new();
        let z = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let ls = tape.log_softmax(z).unwrap();
        for v in tape.value(ls).iter() {
            assert!((v - 0.5f64.ln()).abs() < 1e-12);
        }
        let big = tape.leaf(&t(&[1, 2], &[1000.0, 1000.0]));
        let ls = tape.log_softmax(big).unwrap();
        for v in tape.value(ls).iter() {
            assert!((v + 0.693_147_180_559_945_3).abs() < 1e-12);
        }
        // direct summation oracle
        let row = [1.0f64, 2.0, 3.0];
        let denom: f64 = row.iter().map(|x| x.exp()).sum();
        let z = tape.leaf(&t(&[1, 3], &row));
        let ls = tape.log_softmax(z).unwrap();
        let out = tape.value(ls).to_vec();
        for (o, x) in out.iter().zip(row) {
            assert!((o - (x.exp() / denom).ln()).abs() < 1e-12);
        }
        let mass: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_needs_two_classes() {
        let tape = Tape::new();
        let z = tape.leaf(&t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert!(tape.log_softmax(z).is_err());
    }

    #[test]
    fn sum_gives_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3]).learnable());
        let g = tape.backward(tape.sum(x)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).learnable());
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(tape.sum(sq)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.5, -2.0]).learnable());
        let a = tape.scale(x, 3.0);
        let b = tape.exp(x);
        let loss = tape.sum(tape.add(a, b).unwrap());
        let g = tape.backward(loss).unwrap();
        let got = g.get(x).unwrap();
        assert!((got[0] - (3.0 + 1.5f64.exp())).abs() < 1e-12);
        assert!((got[1] - (3.0 + (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).learnable());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut param = Tensor::from_vec(vec![1.0, 2.0]).learnable();
        let tape = Tape::new();
        let x = tape.leaf(&param);
        let loss = tape.sum(tape.mul(x, x).unwrap());
        for _ in 0..2 {
            tape.backward(loss)
                .unwrap()
                .accumulate_into(x, &mut param)
                .unwrap();
        }
        assert_eq!(param.grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn broadcasting_is_limited_to_bias_add() {
        let tape = Tape::new();
        let m = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&Tensor::from_vec(vec![10.0, 20.0, 30.0]));
        let s = tape.add(m, b).unwrap();
        assert_eq!(&*tape.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let wrong = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.add(m, wrong).is_err());
        assert!(tape.mul(m, b).is_err());
        assert!(tape.add(b, m).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let w = Tensor::from_vec(vec![1.0, 2.0]).learnable();
        let c = tape.constant(&w);
        let x = tape.leaf(&w);
        let loss = tape.sum(tape.mul(c, x).unwrap());
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.leaves(), &[x]);
    }
}
