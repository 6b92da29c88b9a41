//! Define-by-run tape with differentiable backward rules.
//!
//! Every backward rule is itself expressed as tape operations, so the
//! gradient nodes produced by [`Tape::grad`] can be differentiated again.
//! Hessian-vector products fall out of that as the gradient of `∇f · v`.

use std::cell::RefCell;
use std::fmt;
use std::ops;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Tanh,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Sum,
    Broadcast,
    MatMul {
        ta: bool,
        tb: bool,
    },
    /// `[m, n] -> [n]`
    SumRows,
    /// `[n] -> [m, n]`
    BroadcastRows(usize),
    /// `[m, n] -> [m]`
    SumCols,
    /// `[m] -> [m, n]`
    BroadcastCols(usize),
    Row(usize),
    ScatterRow {
        row: usize,
        rows: usize,
    },
    /// Identity forward, negated gradient backward.
    GradReverse,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Broadcast => "broadcast",
            Op::MatMul { .. } => "matmul",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Row(_) => "row",
            Op::ScatterRow { .. } => "scatter_row",
            Op::GradReverse => "grad_reverse",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Inputs {
    None,
    One(usize),
    Two(usize, usize),
}

impl Inputs {
    fn iter(self) -> impl Iterator<Item = usize> {
        let (a, b) = match self {
            Inputs::None => (None, None),
            Inputs::One(a) => (Some(a), None),
            Inputs::Two(a, b) => (Some(a), Some(b)),
        };
        a.into_iter().chain(b)
    }
}

struct Node {
    op: Op,
    inputs: Inputs,
    value: Tensor,
}

/// Ordered record of operations. Node inputs always refer to earlier nodes.
///
/// Construction never fails eagerly: the first shape or finiteness error is
/// latched and reported by [`Tape::check`], [`Tape::grad`] and the
/// `autodiff` entry points. Later nodes after a fault carry placeholder values.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<Error>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
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

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Inputs::None, Ok(value))
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Const, Inputs::None, Ok(value))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Re-wraps a node id obtained from [`Var::id`] on this tape.
    pub fn var(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    pub fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            None => Ok(()),
            Some(e) => Err(clone_error(e)),
        }
    }

    /// Recomputes every node from the recorded leaf and constant values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                op => {
                    let a = node.inputs.iter().map(|i| &values[i]).collect::<Vec<_>>();
                    forward(op, &a).map_err(|(lhs, rhs)| Error::ShapeMismatch {
                        op: op.name(),
                        lhs,
                        rhs,
                    })?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    fn push(&self, op: Op, inputs: Inputs, value: std::result::Result<Tensor, (Vec<usize>, Vec<usize>)>) -> Var<'_> {
        let id = self.len();
        let value = match value {
            Ok(v) => {
                if !v.is_finite() {
                    self.latch(Error::NonFinite {
                        node: id,
                        op: op.name(),
                    });
                }
                v
            }
            Err((lhs, rhs)) => {
                let placeholder = Tensor::zeros(&lhs);
                self.latch(Error::ShapeMismatch {
                    op: op.name(),
                    lhs,
                    rhs,
                });
                placeholder
            }
        };
        self.nodes.borrow_mut().push(Node { op, inputs, value });
        Var { tape: self, id }
    }

    /// Latches an external error (e.g. invalid input found while building).
    pub fn fail(&self, e: Error) {
        self.latch(e);
    }

    fn latch(&self, e: Error) {
        let mut fault = self.fault.borrow_mut();
        if fault.is_none() {
            *fault = Some(e);
        }
    }

    fn unary(&self, op: Op, a: usize) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            forward(op, &[&nodes[a].value])
        };
        self.push(op, Inputs::One(a), value)
    }

    fn binary(&self, op: Op, a: usize, b: usize) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            forward(op, &[&nodes[a].value, &nodes[b].value])
        };
        self.push(op, Inputs::Two(a, b), value)
    }

    /// Reverse-mode gradient of the scalar `y` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this tape and are themselves
    /// differentiable. A `wrt` node that `y` does not depend on receives a
    /// constant zero gradient of its own shape rather than an error.
    pub fn grad<'t>(&'t self, y: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check()?;
        let y_shape = self.nodes.borrow()[y.id].value.shape().to_vec();
        if !y_shape.is_empty() {
            return Err(Error::NotScalar(y_shape));
        }

        let n = y.id + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] {
                    needs[i] = nodes[i].inputs.iter().any(|j| needs[j]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; n];
        if needs[y.id] {
            adjoint[y.id] = Some(self.scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            let (op, inputs) = {
                let node = &self.nodes.borrow()[i];
                (node.op, node.inputs)
            };
            let out = Var { tape: self, id: i };
            let (a, b) = match inputs {
                Inputs::None => continue,
                Inputs::One(a) => (a, None),
                Inputs::Two(a, b) => (a, Some(b)),
            };
            let av = Var { tape: self, id: a };
            let bv = b.map(|b| Var { tape: self, id: b });
            let want_a = needs[a];
            let want_b = b.is_some_and(|b| needs[b]);
            let (ga, gb) = backward(op, g, out, av, bv, want_a, want_b);
            if let (true, Some(ga)) = (want_a, ga) {
                accumulate(&mut adjoint[a], ga);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                if want_b {
                    accumulate(&mut adjoint[b], gb);
                }
            }
        }
        self.check()?;

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.nodes.borrow()[w.id].value.shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }
}

fn accumulate<'t>(slot: &mut Option<Var<'t>>, g: Var<'t>) {
    *slot = Some(match *slot {
        None => g,
        Some(prev) => prev + g,
    });
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::ShapeMismatch { op, lhs, rhs } => Error::ShapeMismatch {
            op,
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        },
        Error::NonFinite { node, op } => Error::NonFinite { node: *node, op },
        Error::InvalidExample(msg) => Error::InvalidExample(msg.clone()),
        other => Error::InvalidSpec(other.to_string()),
    }
}

type Forward = std::result::Result<Tensor, (Vec<usize>, Vec<usize>)>;

fn forward(op: Op, inputs: &[&Tensor]) -> Forward {
    let a = inputs[0];
    let mismatch = |b: &Tensor| Err((a.shape().to_vec(), b.shape().to_vec()));
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own values"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let b = inputs[1];
            if a.shape() != b.shape() {
                return mismatch(b);
            }
            Ok(match op {
                Op::Add => a.zip(b, |x, y| x + y),
                Op::Sub => a.zip(b, |x, y| x - y),
                Op::Mul => a.zip(b, |x, y| x * y),
                _ => a.zip(b, |x, y| x / y),
            })
        }
        Op::Neg => Ok(a.map(|x| -x)),
        Op::Scale(c) => Ok(a.map(|x| c * x)),
        Op::Tanh => Ok(a.map(f64::tanh)),
        Op::Sin => Ok(a.map(f64::sin)),
        Op::Cos => Ok(a.map(f64::cos)),
        Op::Exp => Ok(a.map(f64::exp)),
        Op::Log => Ok(a.map(f64::ln)),
        Op::Sqrt => Ok(a.map(f64::sqrt)),
        Op::GradReverse => Ok(a.clone()),
        Op::Sum => Ok(Tensor::scalar(a.data().iter().sum())),
        Op::Broadcast => {
            let target = inputs[1];
            if a.len() != 1 {
                return Err((a.shape().to_vec(), vec![]));
            }
            Ok(Tensor::filled(target.shape(), a.item()))
        }
        Op::MatMul { ta, tb } => {
            let b = inputs[1];
            tensor::matmul(a, b, ta, tb).ok_or_else(|| (a.shape().to_vec(), b.shape().to_vec()))
        }
        Op::SumRows => {
            if a.rank() != 2 {
                return Err((a.shape().to_vec(), vec![0, 0]));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, &x) in out.iter_mut().zip(a.row(r)) {
                    *o += x;
                }
            }
            Ok(Tensor::vector(out))
        }
        Op::BroadcastRows(m) => {
            if a.rank() != 1 {
                return Err((a.shape().to_vec(), vec![0]));
            }
            let n = a.len();
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(a.data());
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::SumCols => {
            if a.rank() != 2 {
                return Err((a.shape().to_vec(), vec![0, 0]));
            }
            let m = a.shape()[0];
            Ok(Tensor::vector((0..m).map(|r| a.row(r).iter().sum()).collect()))
        }
        Op::BroadcastCols(n) => {
            if a.rank() != 1 {
                return Err((a.shape().to_vec(), vec![0]));
            }
            let m = a.len();
            let mut out = Vec::with_capacity(m * n);
            for &x in a.data() {
                out.extend(std::iter::repeat_n(x, n));
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Row(r) => {
            if a.rank() != 2 || r >= a.shape()[0] {
                return Err((a.shape().to_vec(), vec![r]));
            }
            Ok(Tensor::vector(a.row(r).to_vec()))
        }
        Op::ScatterRow { row, rows } => {
            if a.rank() != 1 || row >= rows {
                return Err((a.shape().to_vec(), vec![row, rows]));
            }
            let mut out = Tensor::zeros(&[rows, a.len()]);
            out.row_mut(row).copy_from_slice(a.data());
            Ok(out)
        }
    }
}

/// Input adjoints for one node, built from differentiable tape ops.
fn backward<'t>(
    op: Op,
    g: Var<'t>,
    out: Var<'t>,
    a: Var<'t>,
    b: Option<Var<'t>>,
    want_a: bool,
    want_b: bool,
) -> (Option<Var<'t>>, Option<Var<'t>>) {
    let only_a = |v: Var<'t>| (Some(v), None);
    match op {
        Op::Leaf | Op::Const => (None, None),
        Op::Add => (Some(g), Some(g)),
        Op::Sub => (Some(g), want_b.then(|| -g)),
        Op::Mul => {
            let b = b.unwrap();
            (want_a.then(|| g * b), want_b.then(|| g * a))
        }
        Op::Div => {
            let b = b.unwrap();
            (want_a.then(|| g / b), want_b.then(|| -((g * out) / b)))
        }
        Op::Neg | Op::GradReverse => only_a(-g),
        Op::Scale(c) => only_a(g.scale(c)),
        Op::Tanh => only_a(g - g * out * out),
        Op::Sin => only_a(g * a.cos()),
        Op::Cos => only_a(-(g * a.sin())),
        Op::Exp => only_a(g * out),
        Op::Log => only_a(g / a),
        Op::Sqrt => only_a((g / out).scale(0.5)),
        Op::Sum => only_a(g.broadcast_like(a)),
        Op::Broadcast => only_a(g.sum()),
        Op::MatMul { ta, tb } => {
            let b = b.unwrap();
            let ga = want_a.then(|| {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                }
            });
            let gb = want_b.then(|| {
                if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            });
            (ga, gb)
        }
        Op::SumRows => only_a(g.broadcast_rows(a.shape()[0])),
        Op::BroadcastRows(_) => only_a(g.sum_rows()),
        Op::SumCols => only_a(g.broadcast_cols(a.shape()[1])),
        Op::BroadcastCols(_) => only_a(g.sum_cols()),
        Op::Row(r) => only_a(g.scatter_row(r, a.shape()[0])),
        Op::ScatterRow { row, .. } => only_a(g.row(row)),
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(Op::Scale(c), self.id)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(Op::Tanh, self.id)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(Op::Sin, self.id)
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(Op::Cos, self.id)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(Op::Exp, self.id)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(Op::Log, self.id)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(Op::Sqrt, self.id)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        self.tape.unary(Op::Sum, self.id)
    }

    /// Broadcasts a one-element node to the shape of `like`.
    pub fn broadcast_like(self, like: Var<'t>) -> Var<'t> {
        self.tape.binary(Op::Broadcast, self.id, like.id)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)`, transposing the operands whose flag is set.
    pub fn matmul_t(self, rhs: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        self.tape.binary(Op::MatMul { ta, tb }, self.id, rhs.id)
    }

    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(Op::SumRows, self.id)
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.tape.unary(Op::BroadcastRows(rows), self.id)
    }

    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(Op::SumCols, self.id)
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.tape.unary(Op::BroadcastCols(cols), self.id)
    }

    pub fn row(self, r: usize) -> Var<'t> {
        self.tape.unary(Op::Row(r), self.id)
    }

    pub fn scatter_row(self, row: usize, rows: usize) -> Var<'t> {
        self.tape.unary(Op::ScatterRow { row, rows }, self.id)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by -1.
    pub fn grad_reverse(self) -> Var<'t> {
        self.tape.unary(Op::GradReverse, self.id)
    }

    pub fn dot(self, rhs: Var<'t>) -> Var<'t> {
        (self * rhs).sum()
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                self.tape.binary($op, self.id, rhs.id)
            }
        }
    };
}

binop!(Add, add, Op::Add);
binop!(Sub, sub, Op::Sub);
binop!(Mul, mul, Op::Mul);
binop!(Div, div, Op::Div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(Op::Neg, self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v<'t>(tape: &'t Tape, xs: &[f64]) -> Var<'t> {
        tape.leaf(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn sum_of_squares_and_its_gradient() {
        let tape = Tape::new();
        let x = v(&tape, &[3.0]);
        let y = (x * x).sum();
        assert_eq!(y.item(), 9.0);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(g[0].value().data(), &[6.0]);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0]);
        let y = tape.scalar(4.0);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_derivative_through_tanh() {
        // f = tanh(x), f'' = -2 tanh(x) (1 - tanh^2 x)
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.7));
        let y = x.tanh();
        let g = tape.grad(y, &[x]).unwrap()[0];
        let h = tape.grad(g, &[x]).unwrap()[0];
        let t = 0.7f64.tanh();
        assert!((g.item() - (1.0 - t * t)).abs() < 1e-15);
        assert!((h.item() + 2.0 * t * (1.0 - t * t)).abs() < 1e-15);
    }

    #[test]
    fn grad_requires_scalar() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0]);
        let y = x * x;
        assert!(matches!(tape.grad(y, &[x]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_latched() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0]);
        let y = v(&tape, &[1.0, 2.0, 3.0]);
        let z = (x + y).sum();
        assert!(matches!(tape.check(), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(tape.grad(z, &[x]).is_err());
    }

    #[test]
    fn non_finite_reports_node() {
        let tape = Tape::new();
        let x = v(&tape, &[0.0]);
        let _ = x.ln();
        match tape.check() {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grad_reverse_flips_sign_only_backward() {
        let tape = Tape::new();
        let x = v(&tape, &[2.0]);
        let y = (x.grad_reverse() * x.grad_reverse()).sum();
        assert_eq!(y.item(), 4.0);
        assert_eq!(tape.grad(y, &[x]).unwrap()[0].value().data(), &[-4.0]);
    }

    #[test]
    fn matmul_gradients_match_manual() {
        // y = sum(A B), dA = 1 B^T, dB = A^T 1
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::new(vec![3, 2], vec![1., -1., 2., 0., 0.5, 3.]).unwrap());
        let y = a.matmul(b).sum();
        let g = tape.grad(y, &[a, b]).unwrap();
        assert_eq!(g[0].value().data(), &[0., 2., 3.5, 0., 2., 3.5]);
        assert_eq!(g[1].value().data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.5, 0.7]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let h = x.matmul_t(a, false, true).tanh();
        let y = (h * h).sum().sqrt().ln();
        let g = tape.grad(y, &[a]).unwrap()[0];
        let replayed = tape.replay().unwrap();
        assert_eq!(replayed[y.id()], y.value());
        assert_eq!(replayed[g.id()], g.value());
        assert_eq!(replayed.len(), tape.len());
    }
}
