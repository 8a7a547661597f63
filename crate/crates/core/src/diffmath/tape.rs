//! Tensor-valued reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Node ids
//! increase in creation order, so the tape is a DAG in topological order and
//! the backward pass is a single reverse sweep. Trainable tensors live in a
//! [`ParamStore`] and enter a tape as leaves via [`Tape::param`]; everything
//! else enters as a constant via [`Tape::constant`] and receives no gradient.

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::linalg;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.map.insert(id, g);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    /// Adds zero gradients for every parameter of `store` not reached by the loss.
    pub fn densify(&mut self, store: &ParamStore) {
        for (id, _, value) in store.iter() {
            self.map
                .entry(id)
                .or_insert_with(|| Tensor::zeros(value.shape()));
        }
    }

    /// Elementwise `self += other`; parameters missing on either side are unioned.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Elu,
    Cos,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Elu => "elu",
            Unary::Cos => "cos",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// d out / d x given input and output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Cos => -x.sin(),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis { a: usize, outer: usize, mid: usize, inner: usize },
    Concat { inputs: Vec<usize>, outer: usize, widths: Vec<usize> },
    Slice { a: usize, outer: usize, full: usize, start: usize, width: usize },
    GatherRows { a: usize, idx: Rc<[usize]> },
    ScatterAddRows { a: usize, idx: Rc<[usize]> },
    Cholesky(usize),
    TriSolve { l: usize, b: usize, transpose: bool },
    Diag(usize),
    SeKernel { x: usize, z: usize, log_ls: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(u, _) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Cholesky(..) => "cholesky",
            Op::TriSolve { .. } => "tri_solve",
            Op::Diag(..) => "diag",
            Op::SeKernel { .. } => "se_kernel",
        }
    }
}

struct Node {
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

/// Records operations for a single reverse sweep. Not shared across threads;
/// concurrent Monte-Carlo samples each build their own tape.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
    audit: bool,
    first_non_finite: Cell<Option<usize>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn suffix_compatible(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that flags the first op producing a non-finite value; the flag
    /// surfaces as an error from [`Tape::check_finite`] and [`Tape::grad`].
    pub fn audited() -> Self {
        Tape { audit: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        if self.audit && self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        inner.nodes.push(Node { op, requires_grad, param });
        inner.values.push(value);
        Var { tape: self, id }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(Op::Leaf, store.get(id).clone(), true, Some(id))
    }

    /// Fresh differentiable leaf that is not tied to a stored parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true, None)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(node) = self.first_non_finite.get() {
            return Err(Error::NonFinite { op: self.inner.borrow().nodes[node].op.name(), node });
        }
        if !self.audit {
            let inner = self.inner.borrow();
            if let Some(node) = inner.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: inner.nodes[node].op.name(), node });
            }
        }
        Ok(())
    }

    fn binary<'t>(&'t self, kind: Binary, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.values[a.id], &inner.values[b.id]);
            let out_shape = if suffix_compatible(x.shape(), y.shape()) {
                x.shape().to_vec()
            } else if suffix_compatible(y.shape(), x.shape()) {
                y.shape().to_vec()
            } else {
                return Err(Error::dim(
                    "elementwise",
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            };
            let n: usize = out_shape.iter().product();
            let (xd, yd) = (x.data(), y.data());
            let (nx, ny) = (xd.len(), yd.len());
            let f = |u: f64, v: f64| match kind {
                Binary::Add => u + v,
                Binary::Sub => u - v,
                Binary::Mul => u * v,
                Binary::Div => u / v,
            };
            let mut data: Vec<f64> = Vec::with_capacity(n);
            if nx == n && ny == n {
                data.extend(xd.iter().zip(yd).map(|(&u, &v)| f(u, v)));
            } else if nx == n {
                for xc in xd.chunks(ny) {
                    data.extend(xc.iter().zip(yd).map(|(&u, &v)| f(u, v)));
                }
            } else {
                for yc in yd.chunks(nx) {
                    data.extend(xd.iter().zip(yc).map(|(&u, &v)| f(u, v)));
                }
            }
            Tensor::from_parts(out_shape, data)
        };
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(Op::Binary(kind, a.id, b.id), value, rg, None))
    }

    fn unary<'t>(&'t self, kind: Unary, a: Var<'t>) -> Var<'t> {
        let value = self.inner.borrow().values[a.id].map(|x| kind.apply(x));
        let rg = self.requires(&[a.id]);
        self.push(Op::Unary(kind, a.id), value, rg, None)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let value = {
            let inner = self.inner.borrow();
            let first = inner.values[parts[0].id].shape().to_vec();
            if axis >= first.len() {
                return Err(Error::dim("concat", format!("axis {axis} for rank {}", first.len())));
            }
            let (outer, _, inner_sz) = split_axis(&first, axis);
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = inner.values[p.id].shape();
                if s.len() != first.len()
                    || s[..axis] != first[..axis]
                    || s[axis + 1..] != first[axis + 1..]
                {
                    return Err(Error::dim("concat", format!("{:?} vs {:?}", first, s)));
                }
                widths.push(s[axis] * inner_sz);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&inner.values[p.id].data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = parts.iter().map(|p| inner.values[p.id].shape()[axis]).sum();
            (Tensor::from_parts(shape, data), outer, widths)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        let (v, outer, widths) = value;
        Ok(self.push(Op::Concat { inputs: ids, outer, widths }, v, rg, None))
    }

    /// Unnormalized squared-exponential correlation
    /// `K[i,j] = exp(-½ Σ_k (x_ik - z_jk)² / ℓ_k²)` with `ℓ = exp(log_ls)`.
    pub fn se_kernel<'t>(&'t self, x: Var<'t>, z: Var<'t>, log_ls: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.inner.borrow();
            let (xv, zv, lv) = (&inner.values[x.id], &inner.values[z.id], &inner.values[log_ls.id]);
            if xv.rank() != 2 || zv.rank() != 2 || xv.cols() != zv.cols() || lv.len() != xv.cols() {
                return Err(Error::dim(
                    "se_kernel",
                    format!("x {:?}, z {:?}, lengthscales {:?}", xv.shape(), zv.shape(), lv.shape()),
                ));
            }
            se_kernel_forward(xv, zv, lv)
        };
        let rg = self.requires(&[x.id, z.id, log_ls.id]);
        Ok(self.push(Op::SeKernel { x: x.id, z: z.id, log_ls: log_ls.id }, value, rg, None))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every stored
    /// parameter that the loss depends on.
    pub fn grad(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite_if_audited()?;
        let node_grads = self.backward(loss)?;
        let inner = self.inner.borrow();
        let mut out = Gradients::default();
        for (id, g) in node_grads.into_iter().enumerate() {
            if let (Some(g), Some(p)) = (g, inner.nodes[id].param) {
                match out.map.get_mut(&p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.map.insert(p, g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to an arbitrary node (zeros if unreachable).
    pub fn grad_of(&self, loss: Var<'_>, wrt: Var<'_>) -> Result<Tensor> {
        self.check_finite_if_audited()?;
        let mut grads = self.backward(loss)?;
        let shape = self.inner.borrow().values[wrt.id].shape().to_vec();
        Ok(grads[wrt.id].take().unwrap_or_else(|| Tensor::zeros(&shape)))
    }

    fn check_finite_if_audited(&self) -> Result<()> {
        if self.audit {
            self.check_finite()
        } else {
            Ok(())
        }
    }

    fn backward(&self, loss: Var<'_>) -> Result<Vec<Option<Tensor>>> {
        let inner = self.inner.borrow();
        let lv = &inner.values[loss.id];
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let contributions = backprop_node(&inner, id, &g)?;
            for (input, cg) in contributions {
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(grads)
    }
}

fn se_kernel_forward(x: &Tensor, z: &Tensor, log_ls: &Tensor) -> Tensor {
    let (n, m, d) = (x.rows(), z.rows(), x.cols());
    let inv: Vec<f64> = log_ls.data().iter().map(|l| (-l).exp()).collect();
    let xs: Vec<f64> = x.data().chunks(d.max(1)).flat_map(|r| r.iter().zip(&inv).map(|(v, s)| v * s)).collect();
    let zs: Vec<f64> = z.data().chunks(d.max(1)).flat_map(|r| r.iter().zip(&inv).map(|(v, s)| v * s)).collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &xs[i * d..(i + 1) * d];
        let row = &mut out[i * m..(i + 1) * m];
        for (j, o) in row.iter_mut().enumerate() {
            let zj = &zs[j * d..(j + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                let diff = xi[k] - zj[k];
                s += diff * diff;
            }
            *o = (-0.5 * s).exp();
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Lower triangle of `x` with the diagonal halved.
fn phi_lower(x: &mut Tensor) {
    let n = x.rows();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                x.set(i, j, 0.0);
            } else if j == i {
                x.set(i, j, 0.5 * x.at(i, j));
            }
        }
    }
}

fn tril(x: &mut Tensor) {
    let n = x.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            x.set(i, j, 0.0);
        }
    }
}

fn backprop_node(inner: &Inner, id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let vals = &inner.values;
    let out = &vals[id];
    let req = |i: usize| inner.nodes[i].requires_grad;
    let mut res = Vec::with_capacity(2);
    match &inner.nodes[id].op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (x, y) = (&vals[*a], &vals[*b]);
            let (xd, yd, gd) = (x.data(), y.data(), g.data());
            let (nx, ny) = (xd.len(), yd.len());
            let n = gd.len();
            // one operand is full-size, the other repeats with period `s`
            let s = nx.min(ny).max(1);
            let (xs, ys) = (if nx == n { s } else { 0 }, if ny == n { s } else { 0 });
            if req(*a) {
                let mut ga = vec![0.0; nx];
                for c in 0..n / s {
                    let (gc, yc) = (&gd[c * s..(c + 1) * s], &yd[c * ys..c * ys + s]);
                    let gac = &mut ga[c * xs..c * xs + s];
                    match kind {
                        Binary::Add | Binary::Sub => gac.iter_mut().zip(gc).for_each(|(o, g)| *o += g),
                        Binary::Mul => gac.iter_mut().zip(gc).zip(yc).for_each(|((o, g), v)| *o += g * v),
                        Binary::Div => gac.iter_mut().zip(gc).zip(yc).for_each(|((o, g), v)| *o += g / v),
                    }
                }
                res.push((*a, Tensor::from_parts(x.shape().to_vec(), ga)));
            }
            if req(*b) {
                let mut gb = vec![0.0; ny];
                for c in 0..n / s {
                    let (gc, xc, yc) = (&gd[c * s..(c + 1) * s], &xd[c * xs..c * xs + s], &yd[c * ys..c * ys + s]);
                    let gbc = &mut gb[c * ys..c * ys + s];
                    match kind {
                        Binary::Add => gbc.iter_mut().zip(gc).for_each(|(o, g)| *o += g),
                        Binary::Sub => gbc.iter_mut().zip(gc).for_each(|(o, g)| *o -= g),
                        Binary::Mul => gbc.iter_mut().zip(gc).zip(xc).for_each(|((o, g), u)| *o += g * u),
                        Binary::Div => gbc
                            .iter_mut()
                            .zip(gc)
                            .zip(xc.iter().zip(yc))
                            .for_each(|((o, g), (u, v))| *o -= g * u / (v * v)),
                    }
                }
                res.push((*b, Tensor::from_parts(y.shape().to_vec(), gb)));
            }
        }
        Op::Scale(a, c) => res.push((*a, g.map(|v| v * c))),
        Op::AddScalar(a) => res.push((*a, g.clone())),
        Op::Unary(kind, a) => {
            let x = &vals[*a];
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                .collect();
            res.push((*a, Tensor::from_parts(x.shape().to_vec(), data)));
        }
        Op::MatMul(a, b) => {
            let (x, y) = (&vals[*a], &vals[*b]);
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            if req(*a) {
                let mut ga = vec![0.0; m * k];
                linalg::gemm(g.data(), m, n, false, y.data(), k, n, true, &mut ga, 1.0, 0.0);
                res.push((*a, Tensor::from_parts(vec![m, k], ga)));
            }
            if req(*b) {
                let mut gb = vec![0.0; k * n];
                linalg::gemm(x.data(), m, k, true, g.data(), m, n, false, &mut gb, 1.0, 0.0);
                res.push((*b, Tensor::from_parts(vec![k, n], gb)));
            }
        }
        Op::Transpose(a) => res.push((*a, g.transpose()?)),
        Op::Reshape(a) => res.push((*a, g.clone().reshape(vals[*a].shape())?)),
        Op::SumAll(a) => res.push((*a, Tensor::full(vals[*a].shape(), g.item()))),
        Op::SumAxis { a, outer, mid, inner: isz } => {
            let gd = g.data();
            let mut ga = vec![0.0; outer * mid * isz];
            for o in 0..*outer {
                for m in 0..*mid {
                    let dst = &mut ga[(o * mid + m) * isz..(o * mid + m + 1) * isz];
                    dst.copy_from_slice(&gd[o * isz..(o + 1) * isz]);
                }
            }
            res.push((*a, Tensor::from_parts(vals[*a].shape().to_vec(), ga)));
        }
        Op::Concat { inputs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let gd = g.data();
            let mut offset = 0;
            for (&inp, &w) in inputs.iter().zip(widths) {
                if req(inp) {
                    let mut gi = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        gi.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                    }
                    res.push((inp, Tensor::from_parts(vals[inp].shape().to_vec(), gi)));
                }
                offset += w;
            }
        }
        Op::Slice { a, outer, full, start, width } => {
            let gd = g.data();
            let mut ga = vec![0.0; outer * full];
            for o in 0..*outer {
                ga[o * full + start..o * full + start + width]
                    .copy_from_slice(&gd[o * width..(o + 1) * width]);
            }
            res.push((*a, Tensor::from_parts(vals[*a].shape().to_vec(), ga)));
        }
        Op::GatherRows { a, idx } => {
            let src = &vals[*a];
            let c = src.cols();
            let mut ga = vec![0.0; src.len()];
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in ga[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *d += s;
                }
            }
            res.push((*a, Tensor::from_parts(src.shape().to_vec(), ga)));
        }
        Op::ScatterAddRows { a, idx } => {
            let src = &vals[*a];
            let c = src.cols();
            let mut ga = Vec::with_capacity(src.len());
            for &i in idx.iter() {
                ga.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
            }
            res.push((*a, Tensor::from_parts(src.shape().to_vec(), ga)));
        }
        Op::Cholesky(a) => {
            let l = out;
            let mut lbar = g.clone();
            tril(&mut lbar);
            let mut p = linalg::matmul(&l.transpose()?, &lbar)?;
            phi_lower(&mut p);
            // S = L^{-T} P L^{-1}
            let w = linalg::tri_solve(l, &p.transpose()?, true)?;
            let s = linalg::tri_solve(l, &w.transpose()?, true)?;
            let st = s.transpose()?;
            let data = s.data().iter().zip(st.data()).map(|(u, v)| 0.5 * (u + v)).collect();
            res.push((*a, Tensor::from_parts(s.shape().to_vec(), data)));
        }
        Op::TriSolve { l, b, transpose } => {
            let lv = &vals[*l];
            let x = out;
            // B̄ = L^{-T} X̄ (or L^{-1} X̄ for the transposed solve)
            let bbar = linalg::tri_solve(lv, g, !transpose)?;
            if req(*l) {
                let mut lbar = if *transpose {
                    linalg::matmul(x, &bbar.transpose()?)?
                } else {
                    linalg::matmul(&bbar, &x.transpose()?)?
                };
                tril(&mut lbar);
                for v in lbar.data_mut() {
                    *v = -*v;
                }
                res.push((*l, lbar));
            }
            if req(*b) {
                res.push((*b, bbar));
            }
        }
        Op::Diag(a) => {
            let n = vals[*a].rows();
            let mut ga = Tensor::zeros(&[n, n]);
            for i in 0..n {
                ga.set(i, i, g.data()[i]);
            }
            res.push((*a, ga));
        }
        Op::SeKernel { x, z, log_ls } => {
            let (xv, zv, lv) = (&vals[*x], &vals[*z], &vals[*log_ls]);
            let (n, m, d) = (xv.rows(), zv.rows(), xv.cols());
            let inv2: Vec<f64> = lv.data().iter().map(|l| (-2.0 * l).exp()).collect();
            let (xd, zd, kd, gd) = (xv.data(), zv.data(), out.data(), g.data());
            let mut gx = vec![0.0; n * d];
            let mut gz = vec![0.0; m * d];
            let mut gl = vec![0.0; d];
            for i in 0..n {
                for j in 0..m {
                    let w = gd[i * m + j] * kd[i * m + j];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = xd[i * d + k] - zd[j * d + k];
                        let t = w * diff * inv2[k];
                        gx[i * d + k] -= t;
                        gz[j * d + k] += t;
                        gl[k] += t * diff;
                    }
                }
            }
            if req(*x) {
                res.push((*x, Tensor::from_parts(vec![n, d], gx)));
            }
            if req(*z) {
                res.push((*z, Tensor::from_parts(vec![m, d], gz)));
            }
            if req(*log_ls) {
                res.push((*log_ls, Tensor::from_parts(lv.shape().to_vec(), gl)));
            }
        }
    }
    Ok(res)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.inner.borrow(), |i| &i.values[self.id])
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Add, self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Mul, self, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Div, self, other)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v * c);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(Op::Scale(self.id, c), value, rg, None)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(Op::AddScalar(self.id), value, rg, None)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(Unary::Exp, self)
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(Unary::Log, self)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(Unary::Tanh, self)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(Unary::Sigmoid, self)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(Unary::Softplus, self)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(Unary::Relu, self)
    }

    pub fn elu(self) -> Var<'t> {
        self.tape.unary(Unary::Elu, self)
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(Unary::Cos, self)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(Unary::Square, self)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(Unary::Sqrt, self)
    }

    pub fn activate(self, kind: Unary) -> Var<'t> {
        self.tape.unary(kind, self)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            linalg::matmul(&inner.values[self.id], &inner.values[other.id])?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(Op::MatMul(self.id, other.id), value, rg, None))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::Transpose(self.id), value, rg, None))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshape(shape)?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::Reshape(self.id), value, rg, None))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(Op::SumAll(self.id), value, rg, None)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, outer, mid, inner_sz) = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::dim("sum_axis", format!("axis {axis} of {:?}", v.shape())));
            }
            let (outer, mid, inner_sz) = split_axis(v.shape(), axis);
            let mut data = vec![0.0; outer * inner_sz];
            for o in 0..outer {
                for m in 0..mid {
                    let src = &v.data()[(o * mid + m) * inner_sz..(o * mid + m + 1) * inner_sz];
                    for (d, s) in data[o * inner_sz..(o + 1) * inner_sz].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            (Tensor::from_parts(shape, data), outer, mid, inner_sz)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::SumAxis { a: self.id, outer, mid, inner: inner_sz }, value, rg, None))
    }

    /// `width` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, width: usize) -> Result<Var<'t>> {
        let (value, outer, full) = {
            let v = self.value();
            if axis >= v.rank() || start + width > v.shape()[axis] {
                return Err(Error::dim(
                    "slice",
                    format!("[{start}, {}) on axis {axis} of {:?}", start + width, v.shape()),
                ));
            }
            let (outer, mid, inner_sz) = split_axis(v.shape(), axis);
            let (full, s, w) = (mid * inner_sz, start * inner_sz, width * inner_sz);
            let mut data = Vec::with_capacity(outer * w);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[o * full + s..o * full + s + w]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = width;
            (Tensor::from_parts(shape, data), outer, (full, s, w))
        };
        let (full_sz, s, w) = full;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            Op::Slice { a: self.id, outer, full: full_sz, start: s, width: w },
            value,
            rg,
            None,
        ))
    }

    /// Rows of a matrix selected (with repetition) by `idx`.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if v.rank() != 2 || idx.iter().any(|&i| i >= v.rows()) {
                return Err(Error::dim("gather_rows", format!("index out of range for {:?}", v.shape())));
            }
            let c = v.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(v.row(i));
            }
            Tensor::from_parts(vec![idx.len(), c], data)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::GatherRows { a: self.id, idx }, value, rg, None))
    }

    /// Row `p` of the input is added into row `idx[p]` of an `rows × C` zero matrix.
    pub fn scatter_add_rows(self, idx: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if v.rank() != 2 || idx.len() != v.rows() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::dim("scatter_add_rows", format!("{:?} into {rows} rows", v.shape())));
            }
            let c = v.cols();
            let mut data = vec![0.0; rows * c];
            for (p, &i) in idx.iter().enumerate() {
                for (d, s) in data[i * c..(i + 1) * c].iter_mut().zip(v.row(p)) {
                    *d += s;
                }
            }
            Tensor::from_parts(vec![rows, c], data)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::ScatterAddRows { a: self.id, idx }, value, rg, None))
    }

    /// Lower Cholesky factor of `self + jitter·I` (jitter escalates on failure).
    /// The input must be symmetric; its gradient is returned symmetrized.
    pub fn cholesky(self, jitter: f64) -> Result<Var<'t>> {
        let (l, _) = linalg::cholesky(&self.value(), jitter)?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::Cholesky(self.id), l, rg, None))
    }

    /// Solves `self · X = b` (or `selfᵀ · X = b`) with `self` lower triangular.
    pub fn tri_solve(self, b: Var<'t>, transpose: bool) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            linalg::tri_solve(&inner.values[self.id], &inner.values[b.id], transpose)?
        };
        let rg = self.tape.requires(&[self.id, b.id]);
        Ok(self.tape.push(Op::TriSolve { l: self.id, b: b.id, transpose }, value, rg, None))
    }

    pub fn diag(self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if v.rank() != 2 || v.rows() != v.cols() {
                return Err(Error::dim("diag", format!("{:?}", v.shape())));
            }
            Tensor::vector((0..v.rows()).map(|i| v.at(i, i)).collect())
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(Op::Diag(self.id), value, rg, None))
    }
}
