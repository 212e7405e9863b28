//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order, which is also a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates vector-Jacobian products into the parents of each node.

pub mod kernels;
mod ops;

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::{ConvGeom, ConvTGeom};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies the primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Sqrt,
    Gelu,
    MatMul,
    BatchMatMul,
    Softmax,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Reshape,
    Permute,
    Slice,
    Pad,
    Concat,
    Roll,
    BroadcastTo,
    SumAxis,
    SumAll,
    Gather,
    DisperseIntegrate,
    ShiftBack,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sqrt,
        OpKind::Gelu,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Softmax,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Slice,
        OpKind::Pad,
        OpKind::Concat,
        OpKind::Roll,
        OpKind::BroadcastTo,
        OpKind::SumAxis,
        OpKind::SumAll,
        OpKind::Gather,
        OpKind::DisperseIntegrate,
        OpKind::ShiftBack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sqrt => "sqrt",
            OpKind::Gelu => "gelu",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Softmax => "softmax",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::LayerNorm => "layernorm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Slice => "slice",
            OpKind::Pad => "pad",
            OpKind::Concat => "concat",
            OpKind::Roll => "roll",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum",
            OpKind::Gather => "gather",
            OpKind::DisperseIntegrate => "disperse_integrate",
            OpKind::ShiftBack => "shift_back",
        }
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Flips the sign of the vector-Jacobian product of `kind` on the current
/// thread. Used to prove that the gradient checks catch broken backward rules.
#[doc(hidden)]
pub fn inject_vjp_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

fn injected_fault() -> Option<OpKind> {
    FAULT.with(|f| f.get())
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    Softmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        geom: ConvTGeom,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        dims: (usize, usize, usize),
        stats: kernels::NormStats<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        offset: Vec<usize>,
    },
    Pad {
        x: Var,
        before: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Roll {
        x: Var,
        shifts: Vec<isize>,
    },
    BroadcastTo {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    DisperseIntegrate {
        x: Var,
        step: usize,
    },
    ShiftBack {
        y: Var,
        step: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Gelu(..) => OpKind::Gelu,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Slice { .. } => OpKind::Slice,
            Op::Pad { .. } => OpKind::Pad,
            Op::Concat { .. } => OpKind::Concat,
            Op::Roll { .. } => OpKind::Roll,
            Op::BroadcastTo { .. } => OpKind::BroadcastTo,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Gather { .. } => OpKind::Gather,
            Op::DisperseIntegrate { .. } => OpKind::DisperseIntegrate,
            Op::ShiftBack { .. } => OpKind::ShiftBack,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations on tensors and differentiates them in reverse mode.
///
/// A graph is confined to one thread while it is built and differentiated;
/// separate graphs are independent.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    /// Every node produced by `kind`, in execution order.
    pub fn vars_of_kind(&self, kind: OpKind) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op.kind() == kind).map(Var).collect()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("gradient shape matches value")
        })
    }

    /// Clears all gradients so that backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Leaves carry external data; only op outputs are guarded.
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite() || !self.op_inputs_finite(&op),
            "{} produced a non-finite value from finite inputs",
            op.kind().name()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs_finite(&self, op: &Op<T>) -> bool {
        let mut ok = true;
        for_each_parent(op, |p| ok &= self.nodes[p.0].value.all_finite());
        ok
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_with(loss, &Tensor::ones(self.shape(loss)))
    }

    /// Back-propagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: &Tensor<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward", seed.shape(), self.shape(out)));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed.data().to_vec());
        let fault = injected_fault();
        for idx in (0..=out.0).rev() {
            let Some(mut g) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                self.grads[idx] = Some(g);
                continue;
            }
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            ops::vjp(&NodesView { nodes: &self.nodes }, idx, &g, &mut self.grads);
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }
}

/// Read-only access to node values for the backward rules.
pub(crate) struct NodesView<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Real> NodesView<'_, T> {
    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn op(&self, idx: usize) -> &Op<T> {
        &self.nodes[idx].op
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn for_each_parent<T>(op: &Op<T>, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Sqrt(x)
        | Op::Gelu(x)
        | Op::Reshape(x)
        | Op::SumAll(x) => f(*x),
        Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => {
            f(*a);
            f(*b);
        }
        Op::Conv2d { x, kernel, .. } | Op::ConvTranspose2d { x, kernel, .. } => {
            f(*x);
            f(*kernel);
        }
        Op::LayerNorm { x, gain, bias, .. } => {
            f(*x);
            f(*gain);
            f(*bias);
        }
        Op::Softmax { x, .. }
        | Op::Permute { x, .. }
        | Op::Slice { x, .. }
        | Op::Pad { x, .. }
        | Op::Roll { x, .. }
        | Op::BroadcastTo { x }
        | Op::SumAxis { x, .. }
        | Op::Gather { x, .. }
        | Op::DisperseIntegrate { x, .. } => f(*x),
        Op::ShiftBack { y, .. } => f(*y),
        Op::Concat { inputs, .. } => inputs.iter().copied().for_each(f),
    }
}
