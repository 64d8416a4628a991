//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation; [`Var`] is a cheap handle into it.
//! Binary elementwise ops broadcast NumPy-style and reduce gradients back to
//! each operand's shape.

use std::cell::RefCell;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::losses::sign0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    /// Softmax over the flattened trailing `n` axes.
    Softmax(usize, usize),
    Sum(usize),
    AbsSum(usize),
    SquareSum(usize),
    /// Expected grid coordinate over the trailing `n` axes.
    Expectation(usize, usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Operation record. Nodes are appended in creation order, which is a valid
/// topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<ArrayD<f64>>>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are available for every variable after
    /// [`Tape::backward`], inputs included.
    pub fn var(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> ArrayD<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Backpropagates from a single-element sink. Previous gradients are
    /// cleared first, so repeated calls give the same result.
    pub fn backward(&self, sink: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let mut grads = self.grads.borrow_mut();
        grads.iter_mut().for_each(|g| *g = None);
        let sink_value = &nodes[sink.id].value;
        if sink_value.len() != 1 {
            return Err(Error::Rank {
                shape: sink_value.shape().to_vec(),
            });
        }
        grads[sink.id] = Some(ArrayD::ones(sink_value.raw_dim()));

        for id in (0..=sink.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, contrib: ArrayD<f64>| match &mut grads[target] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, nodes[*a].value.shape()));
                    acc(*b, reduce_to(&g, nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, nodes[*a].value.shape()));
                    acc(*b, -reduce_to(&g, nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, reduce_to(&(&g * vb), va.shape()));
                    acc(*b, reduce_to(&(&g * va), vb.shape()));
                }
                Op::MatMul(a, b) => {
                    let va = to_2d(&nodes[*a].value);
                    let vb = to_2d(&nodes[*b].value);
                    let g2 = to_2d(&g);
                    acc(*a, g2.dot(&vb.t()).into_dyn());
                    acc(*b, va.t().dot(&g2).into_dyn());
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(va, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Scale(a, c) => acc(*a, g.mapv(|v| v * c)),
                Op::Softmax(a, n) => {
                    let y = &node.value;
                    let (outer, inner) = split(y.shape(), *n);
                    let y2 = flat(y, outer, inner);
                    let g2 = flat(&g, outer, inner);
                    let mut d = &y2 * &g2;
                    for (mut row, yrow) in d.outer_iter_mut().zip(y2.outer_iter()) {
                        let s = row.sum();
                        row.zip_mut_with(&yrow, |d, &y| *d -= y * s);
                    }
                    acc(*a, reshape(d.into_dyn(), y.shape()));
                }
                Op::Sum(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, ArrayD::from_elem(nodes[*a].value.raw_dim(), s));
                }
                Op::AbsSum(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, nodes[*a].value.mapv(|x| s * sign0(x)));
                }
                Op::SquareSum(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, nodes[*a].value.mapv(|x| 2.0 * s * x));
                }
                Op::Expectation(a, n) => {
                    let shape = nodes[*a].value.shape();
                    let (outer, _) = split(shape, *n);
                    let coords = grid_coords(&shape[shape.len() - n..]);
                    let g2 = flat(&g, outer, *n);
                    acc(*a, reshape(g2.dot(&coords.t()).into_dyn(), shape));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        acc(p, piece);
                        start += len;
                    }
                }
                Op::Reshape(a) => acc(*a, reshape(g.clone(), nodes[*a].value.shape())),
            }
            grads[id] = Some(g);
        }
        Ok(())
    }
}

/// Shape after NumPy-style broadcasting, if compatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && r.shape()[i] != 1 {
            r = r.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    r
}

fn split(shape: &[usize], n: usize) -> (usize, usize) {
    let k = shape.len() - n;
    (shape[..k].iter().product(), shape[k..].iter().product())
}

fn flat(a: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    reshape(a.clone(), &[rows, cols]).into_dimensionality().expect("rank 2")
}

fn reshape(a: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count matches")
}

fn to_2d(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("rank 2")
}

/// Grid coordinates as an `inner × n` matrix; column 0 is the last axis.
fn grid_coords(extents: &[usize]) -> Array2<f64> {
    let n = extents.len();
    let inner: usize = extents.iter().product();
    let mut c = Array2::zeros((inner, n));
    for v in 0..inner {
        let mut rem = v;
        for a in 0..n {
            let axis = n - 1 - a;
            c[[v, a]] = (rem % extents[axis]) as f64;
            rem /= extents[axis];
        }
    }
    c
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id]
            .value
            .iter()
            .next()
            .copied()
            .unwrap_or(f64::NAN)
    }

    /// Gradient from the last backward pass, or `None` if this variable did
    /// not influence the sink.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.tape.grads.borrow()[self.id].clone()
    }

    fn binary(self, other: Var<'t>, f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>, op: Op) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if broadcast_shape(a.shape(), b.shape()).is_none() {
                return Err(Error::dimension(a.shape(), b.shape()));
            }
            f(a, b)
        };
        Ok(self.tape.push(value, op))
    }

    fn unary(self, f: impl FnOnce(&ArrayD<f64>) -> ArrayD<f64>, op: Op) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dimension(a.shape(), b.shape()));
            }
            to_2d(a).dot(&to_2d(b)).into_dyn()
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x * c), Op::Scale(self.id, c))
    }

    /// Softmax over the flattened trailing `n` axes, with max subtraction.
    pub fn softmax_over_last_axes(self, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if n == 0 || n > shape.len() || shape[shape.len() - n..].iter().product::<usize>() == 0 {
            return Err(Error::dimension(&[n], &shape));
        }
        Ok(self.unary(
            |a| {
                let (outer, inner) = split(a.shape(), n);
                let mut m = flat(a, outer, inner);
                for mut row in m.outer_iter_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                reshape(m.into_dyn(), a.shape())
            },
            Op::Softmax(self.id, n),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|a| ArrayD::from_elem(IxDyn(&[]), a.sum()), Op::Sum(self.id))
    }

    pub fn abs_sum(self) -> Var<'t> {
        self.unary(
            |a| ArrayD::from_elem(IxDyn(&[]), a.iter().map(|x| x.abs()).sum()),
            Op::AbsSum(self.id),
        )
    }

    pub fn square_sum(self) -> Var<'t> {
        self.unary(
            |a| ArrayD::from_elem(IxDyn(&[]), a.iter().map(|x| x * x).sum()),
            Op::SquareSum(self.id),
        )
    }

    /// Expected voxel-index coordinate over the trailing `n` axes, which must
    /// hold probabilities. Output shape is the leading shape plus `[n]`, with
    /// coordinates ordered x (last axis) first.
    pub fn expectation_over_grid(self, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if n == 0 || n > shape.len() {
            return Err(Error::dimension(&[n], &shape));
        }
        Ok(self.unary(
            |a| {
                let (outer, inner) = split(a.shape(), n);
                let coords = grid_coords(&a.shape()[a.ndim() - n..]);
                let out = flat(a, outer, inner).dot(&coords);
                let mut out_shape = a.shape()[..a.ndim() - n].to_vec();
                out_shape.push(n);
                reshape(out.into_dyn(), &out_shape)
            },
            Op::Expectation(self.id, n),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let current = self.shape();
        if current.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::dimension(shape, &current));
        }
        Ok(self.unary(|a| reshape(a.clone(), shape), Op::Reshape(self.id)))
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dimension(&[1], &[0]))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let base = views[0].shape();
            for v in &views {
                let ok = v.ndim() == base.len()
                    && axis < base.len()
                    && v.shape()
                        .iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::dimension(base, v.shape()));
                }
            }
            ndarray::concatenate(Axis(axis), &views).map_err(|_| Error::dimension(base, &[]))?
        };
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }
}
