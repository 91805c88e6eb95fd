//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates adjoints additively, so a value consumed `k` times receives the
//! sum of `k` contributions. The tape is rebuilt for every forward pass.

use std::collections::{BTreeMap, HashMap};

use crate::error::{DiffError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity under which a parameter's gradient is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Softplus,
    Log,
    Square,
    Abs,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Softplus => "softplus",
            Self::Log => "log",
            Self::Square => "square",
            Self::Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Affine { x: Var, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    TileRows { x: Var },
    Reduce { x: Var, op: Reduce, axis: Option<usize> },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(DiffError::UnknownVar {
            index: v.0,
            len: self.nodes.len(),
        })
    }

    /// Records an input value. Leaves receive gradients but are not
    /// reported as parameters.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Applies an elementwise operation. Binary operations accept equal
    /// shapes or a one-element operand on either side.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != op.arity() {
            return Err(DiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: args.len(),
            });
        }
        if op.arity() == 2 {
            self.binary(op, args[0], args[1])
        } else {
            self.unary(op, args[0])
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            _ => unreachable!("unary op routed to binary"),
        };
        if op == Elementwise::Div && tb.data().iter().any(|&v| v == 0.0) {
            return Err(DiffError::DivisionByZero);
        }
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(DiffError::Broadcast {
                op: op.name(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    fn unary(&mut self, op: Elementwise, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let out = match op {
            Elementwise::Sigmoid => t.map(sigmoid),
            Elementwise::Tanh => t.map(f64::tanh),
            Elementwise::Softplus => t.map(softplus),
            Elementwise::Log => {
                if let Some(&value) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(DiffError::LogDomain { value });
                }
                t.map(f64::ln)
            }
            Elementwise::Square => t.map(|v| v * v),
            Elementwise::Abs => t.map(f64::abs),
            _ => unreachable!("binary op routed to unary"),
        };
        Ok(self.push(out, Op::Unary(op, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Softplus, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Abs, x)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| scale * v + shift);
        Ok(self.push(out, Op::Affine { x, scale }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut shapes = Vec::with_capacity(parts.len());
        let mut datas = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.check(p)?;
            shapes.push(t.shape());
            datas.push(t.data());
        }
        let shape = tensor::concat_shape(&shapes, axis)?;
        let data = tensor::concat_data(&shapes, &datas, axis);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.check(x)?.slice_axis(axis, start, len)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Row lookup into a 2-D table; backward scatter-adds into the rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.check(table)?;
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(DiffError::GatherIndex { id, rows });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Repeats a `[n]` or `[1, n]` row `times` times into a `[times, n]` matrix.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.check(x)?;
        let n = match t.shape() {
            [n] | [1, n] => *n,
            other => {
                return Err(DiffError::Broadcast {
                    op: "tile_rows",
                    left: other.to_vec(),
                    right: vec![times, 0],
                })
            }
        };
        let mut data = Vec::with_capacity(times * n);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![times, n], data)?;
        Ok(self.push(out, Op::TileRows { x }))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (producing a scalar).
    pub fn reduce(&mut self, op: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.check(x)?;
        let out = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = match op {
                    Reduce::Sum => s,
                    Reduce::Mean => s / t.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                if axis >= t.rank() {
                    return Err(DiffError::Axis { axis, rank: t.rank() });
                }
                let (outer, extent, inner) = tensor::axis_split(t.shape(), axis);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let src = &t.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if op == Reduce::Mean {
                    let inv = 1.0 / extent as f64;
                    data.iter_mut().for_each(|d| *d *= inv);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, data)?
            }
        };
        Ok(self.push(out, Op::Reduce { x, op, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, x, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(x)?.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left untouched, so repeated calls give bitwise-identical
    /// results. Every parameter on the tape gets an entry, zero when the loss
    /// does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut leaves: HashMap<usize, Tensor> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => {
                    let g = adj[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let g = Tensor::new(node.value.shape().to_vec(), g)?;
                    match node.op {
                        Op::Param(id) => match params.get_mut(&id) {
                            Some(acc) => add_into(acc.data_mut(), g.data()),
                            None => {
                                params.insert(id, g);
                            }
                        },
                        _ => {
                            leaves.insert(idx, g);
                        }
                    }
                    continue;
                }
                _ => match adj[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }

        // Parameters recorded after the loss cannot influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(id) = node.op {
                params.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("matmul operand is 2-D");
                let n = tb.shape()[1];
                {
                    let da = slot(adj, *a, ta.len());
                    tensor::gemm(m, n, k, g, false, tb.data(), true, da, true);
                }
                let db = slot(adj, *b, tb.len());
                tensor::gemm(k, m, n, ta.data(), true, g, false, db, true);
            }
            Op::Binary(kind, a, b) => self.propagate_binary(*kind, *a, *b, g, adj),
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                let dx = slot(adj, *x, xv.len());
                match kind {
                    Elementwise::Sigmoid => {
                        for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                            *d += gi * y * (1.0 - y);
                        }
                    }
                    Elementwise::Tanh => {
                        for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                            *d += gi * (1.0 - y * y);
                        }
                    }
                    Elementwise::Softplus => {
                        for ((d, &gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                            *d += gi * sigmoid(x);
                        }
                    }
                    Elementwise::Log => {
                        for ((d, &gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                            *d += gi / x;
                        }
                    }
                    Elementwise::Square => {
                        for ((d, &gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                            *d += 2.0 * gi * x;
                        }
                    }
                    Elementwise::Abs => {
                        for ((d, &gi), &x) in dx.iter_mut().zip(g).zip(xv) {
                            // subgradient 0 at the kink
                            let s = if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += gi * s;
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Affine { x, scale } => {
                let dx = slot(adj, *x, g.len());
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += scale * gi;
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, _) = tensor::axis_split(out.shape(), *axis);
                let chunks: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        let (_, e, inner) = tensor::axis_split(self.value(*p).shape(), *axis);
                        e * inner
                    })
                    .collect();
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (p, &chunk) in parts.iter().zip(&chunks) {
                    let dp = slot(adj, *p, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        add_into(&mut dp[o * chunk..(o + 1) * chunk], src);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, extent, inner) = tensor::axis_split(xs, *axis);
                let len = out.shape()[*axis];
                let dx = slot(adj, *x, outer * extent * inner);
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    add_into(
                        &mut dx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let dt = slot(adj, *table, tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::TileRows { x } => {
                let n = self.value(*x).len();
                let dx = slot(adj, *x, n);
                for row in g.chunks(n) {
                    add_into(dx, row);
                }
            }
            Op::Reduce { x, op, axis } => {
                let xs = self.value(*x).shape();
                let total: usize = xs.iter().product();
                let dx = slot(adj, *x, total);
                match axis {
                    None => {
                        let scale = match op {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / total as f64,
                        };
                        let gi = g[0] * scale;
                        dx.iter_mut().for_each(|d| *d += gi);
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = tensor::axis_split(xs, *axis);
                        let scale = match op {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / extent as f64,
                        };
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for e in 0..extent {
                                let dst = &mut dx[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = slot(adj, *x, g.len());
                add_into(dx, g);
            }
        }
    }

    fn propagate_binary(&self, kind: Elementwise, a: Var, b: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, nb) = (ta.len(), tb.len());
        let n = g.len();
        // Index into an operand that may be a broadcast scalar.
        let ia = |i: usize| if na == n { i } else { 0 };
        let ib = |i: usize| if nb == n { i } else { 0 };
        let (av, bv) = (ta.data(), tb.data());

        let mut ga = vec![0.0; na];
        let mut gb = vec![0.0; nb];
        for i in 0..n {
            let (x, y) = (av[ia(i)], bv[ib(i)]);
            let (dx, dy) = match kind {
                Elementwise::Add => (g[i], g[i]),
                Elementwise::Sub => (g[i], -g[i]),
                Elementwise::Mul => (g[i] * y, g[i] * x),
                Elementwise::Div => (g[i] / y, -g[i] * x / (y * y)),
                _ => unreachable!(),
            };
            ga[ia(i)] += dx;
            gb[ib(i)] += dy;
        }
        add_into(slot(adj, a, na), &ga);
        add_into(slot(adj, b, nb), &gb);
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to a leaf or parameter variable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}
