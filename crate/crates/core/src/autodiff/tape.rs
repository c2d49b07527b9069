use std::cell::RefCell;
use std::fmt;

use super::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, silu, silu_grad, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    SquaredL2(usize),
    ConcatCols(usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, which is a topological order of
/// the graph; `backward` walks them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of a scalar root with respect to the leaves of a tape.
///
/// Intermediate gradients are released during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input (parameter or data we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AutodiffError> {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward called with a variable from another tape"
        );
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(root_value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            let mut accumulate = |target: usize, g: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[a].requires_grad {
                        let ga = matmul_nt_kernel(grad.data(), bv.data(), m, n, k);
                        accumulate(a, Tensor::from_parts(vec![m, k], ga));
                    }
                    if nodes[b].requires_grad {
                        let gb = matmul_tn_kernel(av.data(), grad.data(), m, k, n);
                        accumulate(b, Tensor::from_parts(vec![k, n], gb));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if nodes[b].requires_grad {
                        let bshape = nodes[b].value.shape().to_vec();
                        let gb = reduce_to(&grad, &bshape).map(|v| sign * v);
                        accumulate(b, gb);
                    }
                    accumulate(a, grad);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    if nodes[a].requires_grad {
                        let ga = broadcast_binary(grad.data(), bv.data(), |g, y| g * y);
                        accumulate(a, Tensor::from_parts(av.shape().to_vec(), ga));
                    }
                    if nodes[b].requires_grad {
                        let prod = broadcast_binary(grad.data(), av.data(), |g, x| g * x);
                        let prod = Tensor::from_parts(grad.shape().to_vec(), prod);
                        accumulate(b, reduce_to(&prod, bv.shape()));
                    }
                }
                Op::Scale(a, c) => accumulate(a, grad.map(|g| g * c)),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let g = grad
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(a, Tensor::from_parts(y.shape().to_vec(), g));
                }
                Op::Silu(a) => {
                    let x = &nodes[a].value;
                    let g = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * silu_grad(x))
                        .collect();
                    accumulate(a, Tensor::from_parts(x.shape().to_vec(), g));
                }
                Op::Sum(a) => {
                    let shape = nodes[a].value.shape().to_vec();
                    accumulate(a, Tensor::full(&shape, grad.item()));
                }
                Op::Mean(a) => {
                    let x = &nodes[a].value;
                    let g = grad.item() / x.len() as f64;
                    accumulate(a, Tensor::full(x.shape(), g));
                }
                Op::SquaredL2(a) => {
                    let g = 2.0 * grad.item();
                    accumulate(a, nodes[a].value.map(|x| g * x));
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a].value.cols();
                    let cb = nodes[b].value.cols();
                    let rows = grad.rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = grad.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(a, Tensor::from_parts(vec![rows, ca], ga));
                    accumulate(b, Tensor::from_parts(vec![rows, cb], gb));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Applies `f(a_i, b_{i mod len(b)})`; `b` is either same-length or one row.
fn broadcast_binary(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.chunks(b.len())
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect()
    }
}

/// Sums a gradient over the leading batch dimension when the operand was broadcast.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if n == grad.len() {
        return Tensor::from_parts(shape.to_vec(), grad.data().to_vec());
    }
    let mut out = vec![0.0; n];
    for row in grad.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Shapes are compatible if equal, or if `rhs` matches `lhs` without its leading dimension.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    if lhs == rhs {
        return true;
    }
    if lhs.len() < 2 {
        return false;
    }
    let tail = &lhs[1..];
    rhs == tail || (rhs.len() == lhs.len() && rhs[0] == 1 && &rhs[1..] == tail)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)
        };
        let rg = self.tape.requires_grad(self.id);
        self.tape.push(op, value, rg)
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, AutodiffError> {
        self.check_same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if !broadcast_ok(a.shape(), b.shape()) {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::from_parts(a.shape().to_vec(), broadcast_binary(a.data(), b.data(), f))
        };
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        Ok(self.tape.push(op, value, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.check_same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n))
        };
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        Ok(self.tape.push(Op::MatMul(self.id, other.id), value, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x.map(|v| c * v))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |x| x.map(f64::tanh))
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x.map(silu))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        })
    }

    /// Sum of squared entries.
    pub fn squared_l2(&self) -> Var<'t> {
        self.unary(Op::SquaredL2(self.id), |x| Tensor::scalar(x.sum_squares()))
    }

    /// Column-wise concatenation of two `[rows, _]` operands.
    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.check_same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let rows = a.rows();
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..rows {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::from_parts(vec![rows, a.cols() + b.cols()], data)
        };
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        Ok(self.tape.push(Op::ConcatCols(self.id, other.id), value, rg))
    }
}
