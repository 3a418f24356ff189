//! Reverse-mode tape over batched 2-D values.
//!
//! Every value on the tape is an `Array2<f64>` whose rows index batch items.
//! Scalars are `1 x 1`. Binary element-wise operations broadcast along any
//! axis of length one, and the backward pass sums adjoints back over the
//! broadcast axes.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{BlockId, ParamSet};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Floor applied to `|x|` inside the derivative of the signed fractional power.
pub const SIGNED_POW_DERIV_FLOOR: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(BlockId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    MatMulT { x: usize, w: usize },
    MatMul { x: usize, w: usize },
    Transpose(usize),
    Tanh(usize),
    Abs(usize),
    SignedPow { x: usize, p: f64 },
    Sin(usize),
    Cos(usize),
    Square(usize),
    Recip(usize),
    Exp(usize),
    Sqrt(usize),
    Slice { x: usize, rows: Range<usize>, cols: Range<usize> },
    HCat(Vec<usize>),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMulT { x, w } | Op::MatMul { x, w } => vec![*x, *w],
            Op::Affine { x, .. } | Op::SignedPow { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Abs(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Square(x)
            | Op::Recip(x)
            | Op::Exp(x)
            | Op::Sqrt(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::HCat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Position on a tape that can later be restored with [`Tape::truncate`].
#[derive(Clone, Copy, Debug)]
pub struct Mark(usize);

/// A single-threaded record of operations.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    param_cache: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes for broadcasting: {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// `tanh` through `exp`, with a series near zero where `1 − e^{−2|x|}` cancels.
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a < 0.01 {
        let a2 = a * a;
        a * (1.0 - a2 * (1.0 / 3.0 - a2 * (2.0 / 15.0 - a2 * (17.0 / 315.0))))
    } else if a > 20.0 {
        1.0
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    t.copysign(x)
}

fn broadcast_to(x: &Array2<f64>, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    x.broadcast(shape).expect("broadcast shape checked")
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_cache: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drops every node recorded after `mark`.
    pub fn truncate(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
        for slot in &mut self.param_cache {
            if matches!(slot, Some(v) if v.index() >= mark.0) {
                *slot = None;
            }
        }
    }

    /// Removes all nodes and cached parameter leaves.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_cache.clear();
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        assert!(v.index() < self.nodes.len(), "variable was truncated from the tape");
        v.index()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, value });
        Var { tape: self.id, idx }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let i = self.check(v);
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Row vector constant (`1 x n`).
    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    /// Leaf bound to a parameter block; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, block: BlockId) -> Var {
        let b = block.index();
        if self.param_cache.len() <= b {
            self.param_cache.resize(b + 1, None);
        }
        if let Some(v) = self.param_cache[b] {
            return v;
        }
        let v = self.push(Op::Param(block), params.block(block).to_owned());
        self.param_cache[b] = Some(v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let shape = broadcast_shape(va.dim(), vb.dim());
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and(broadcast_to(va, shape))
            .and(broadcast_to(vb, shape))
            .for_each(|o, &x, &y| *o = f(x, y));
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Add(a.index(), b.index());
        self.binary(a, b, |x, y| x + y, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Sub(a.index(), b.index());
        self.binary(a, b, |x, y| x - y, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Mul(a.index(), b.index());
        self.binary(a, b, |x, y| x * y, op)
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let i = self.check(x);
        let out = self.nodes[i].value.mapv(|v| scale * v + shift);
        self.push(Op::Affine { x: i, scale }, out)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `x · wᵀ`, with `x: (b, k)` and `w: (m, k)`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (ix, iw) = (self.check(x), self.check(w));
        let out = self.nodes[ix].value.dot(&self.nodes[iw].value.t());
        self.push(Op::MatMulT { x: ix, w: iw }, out)
    }

    /// `x · w`, with `x: (b, m)` and `w: (m, k)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (ix, iw) = (self.check(x), self.check(w));
        let out = self.nodes[ix].value.dot(&self.nodes[iw].value);
        self.push(Op::MatMul { x: ix, w: iw }, out)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let i = self.check(x);
        let out = self.nodes[i].value.t().to_owned();
        self.push(Op::Transpose(i), out)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let i = self.check(x);
        let out = self.nodes[i].value.mapv(f);
        self.push(op(i), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, tanh, Op::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs)
    }

    /// `sgn(x)·|x|^p`. The forward value is exact; the derivative floors `|x|`.
    pub fn signed_pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.signum() * v.abs().powf(p), |i| Op::SignedPow { x: i, p })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn cube(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.mul(sq, x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, f64::recip, Op::Recip)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Var {
        let i = self.check(x);
        let out = self
            .nodes[i]
            .value
            .slice(s![rows.clone(), cols.clone()])
            .to_owned();
        self.push(Op::Slice { x: i, rows, cols }, out)
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Var {
        let rows = 0..self.shape(x).0;
        self.slice(x, rows, cols)
    }

    pub fn col(&mut self, x: Var, j: usize) -> Var {
        self.slice_cols(x, j..j + 1)
    }

    /// Concatenates along columns; all parts share the row count.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hcat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let views: Vec<ArrayView2<f64>> = idx.iter().map(|&i| self.nodes[i].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("hcat row counts must agree");
        self.push(Op::HCat(idx), out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let i = self.check(x);
        let out = Array2::from_elem((1, 1), self.nodes[i].value.sum());
        self.push(Op::Sum(i), out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let i = self.check(x);
        let v = &self.nodes[i].value;
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(Op::Mean(i), out)
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Adjoints, AutodiffError> {
        if root.tape != self.id || root.index() >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.index()));
        }
        let r = root.index();
        let shape = self.nodes[r].value.dim();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows: shape.0, cols: shape.1 });
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; r + 1];
        adj[r] = Some(Array2::ones((1, 1)));

        for i in (0..=r).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input >= i {
                    return Err(AutodiffError::OutOfOrder { node: i, input });
                }
            }
            let emit = |target: usize, contrib: Array2<f64>, adj: &mut Vec<Option<Array2<f64>>>| {
                match &mut adj[target] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    emit(*a, reduce_to(g.clone(), val(*a).dim()), &mut adj);
                    emit(*b, reduce_to(g, val(*b).dim()), &mut adj);
                }
                Op::Sub(a, b) => {
                    emit(*a, reduce_to(g.clone(), val(*a).dim()), &mut adj);
                    emit(*b, reduce_to(-g, val(*b).dim()), &mut adj);
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let ga = &g * &broadcast_to(val(*b), shape);
                    let gb = &g * &broadcast_to(val(*a), shape);
                    emit(*a, reduce_to(ga, val(*a).dim()), &mut adj);
                    emit(*b, reduce_to(gb, val(*b).dim()), &mut adj);
                }
                Op::Affine { x, scale } => emit(*x, g * *scale, &mut adj),
                Op::MatMulT { x, w } => {
                    // y = x wᵀ
                    emit(*x, g.dot(val(*w)), &mut adj);
                    emit(*w, g.t().dot(val(*x)), &mut adj);
                }
                Op::MatMul { x, w } => {
                    // y = x w
                    emit(*x, g.dot(&val(*w).t()), &mut adj);
                    emit(*w, val(*x).t().dot(&g), &mut adj);
                }
                Op::Transpose(x) => emit(*x, g.t().to_owned(), &mut adj),
                Op::Tanh(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    emit(*x, d, &mut adj);
                }
                Op::Abs(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                        *d *= if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    emit(*x, d, &mut adj);
                }
                Op::SignedPow { x, p } => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                        let a = v.abs().max(SIGNED_POW_DERIV_FLOOR);
                        *d *= p * a.powf(p - 1.0);
                    });
                    emit(*x, d, &mut adj);
                }
                Op::Sin(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| *d *= v.cos());
                    emit(*x, d, &mut adj);
                }
                Op::Cos(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| *d *= -v.sin());
                    emit(*x, d, &mut adj);
                }
                Op::Square(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| *d *= 2.0 * v);
                    emit(*x, d, &mut adj);
                }
                Op::Recip(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= -y * y);
                    emit(*x, d, &mut adj);
                }
                Op::Exp(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y);
                    emit(*x, d, &mut adj);
                }
                Op::Sqrt(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 0.5 / y);
                    emit(*x, d, &mut adj);
                }
                Op::Slice { x, rows, cols } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    d.slice_mut(s![rows.clone(), cols.clone()]).assign(&g);
                    emit(*x, d, &mut adj);
                }
                Op::HCat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        emit(p, g.slice(s![.., c0..c0 + w]).to_owned(), &mut adj);
                        c0 += w;
                    }
                }
                Op::Sum(x) => {
                    let d = Array2::from_elem(val(*x).dim(), g[[0, 0]]);
                    emit(*x, d, &mut adj);
                }
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    let d = Array2::from_elem(val(*x).dim(), g[[0, 0]] / n);
                    emit(*x, d, &mut adj);
                }
            }
        }
        Ok(Adjoints { tape: self.id, grads: adj })
    }

    /// Gathers adjoints of parameter leaves into a flat gradient aligned with
    /// `params`. Blocks that never entered the tape get zero gradient.
    pub fn param_gradient(&self, adjoints: &Adjoints, params: &ParamSet) -> Vec<f64> {
        assert_eq!(adjoints.tape, self.id, "adjoints from a different tape");
        let mut out = vec![0.0; params.len()];
        for (i, node) in self.nodes.iter().enumerate().take(adjoints.grads.len()) {
            if let (Op::Param(block), Some(g)) = (&node.op, &adjoints.grads[i]) {
                let range = params.range(*block);
                for (o, v) in out[range].iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
        }
        out
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Adjoints {
    tape: u32,
    grads: Vec<Option<Array2<f64>>>,
}

impl Adjoints {
    /// Adjoint of `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, with zeros substituted when it does not reach the root.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v)))
    }
}
