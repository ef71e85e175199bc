//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable value is a [`Var`]: a handle to a node on a [`Tape`].
//! Nodes are appended in creation order, so the tape is already a
//! topological order of the computation and the backward sweep is a single
//! reverse pass over it.
//!
//! The tape is real-valued. Complex tensors are pairs of `Var`s whose
//! arithmetic is expanded into real operations (see [`crate::complex`]), so
//! gradients with respect to real and imaginary parts come out of the same
//! sweep.
//!
//! A tape lives for one forward/backward pass. Parameters are bound onto it
//! as leaves (see [`crate::params::Ctx`]) and their gradients are read back
//! after [`Var::backward`].

mod backward;
mod gru;
mod kernels;
mod ops;
mod spectral;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub(crate) use gru::GruCache;
pub use gru::gru_recurrence;
pub use ops::broadcast_shape;
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

/// Marker for a gathered position that reads as zero (used for padding).
pub const PAD_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Square,
    Sqrt,
    Recip,
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    /// `tanh(sqrt(s)) / sqrt(s)`, continuous at `s = 0` where it equals 1.
    TanhRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Unary {
        x: usize,
        kind: Unary,
    },
    Binary {
        a: usize,
        b: usize,
        kind: Binary,
        amap: Option<Rc<[usize]>>,
        bmap: Option<Rc<[usize]>>,
    },
    Sum {
        x: usize,
    },
    SumAxis {
        x: usize,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Gather {
        x: usize,
        idx: Rc<[usize]>,
    },
    ScatterAdd {
        x: usize,
        idx: Rc<[usize]>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Softmax {
        x: usize,
        width: usize,
    },
    Rfft {
        x: usize,
        n: usize,
    },
    Irfft {
        x: usize,
        n: usize,
    },
    Gru {
        gi: usize,
        whh: usize,
        bhh: usize,
        cache: Box<GruCache>,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub leaf_grads: HashMap<usize, Vec<f64>>,
}

/// An append-only record of tensor operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().leaf_grads.clear();
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A tensor living on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v[0])
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        inner
            .leaf_grads
            .get(&self.id)
            .map(|g| Tensor::new(inner.nodes[self.id].shape.clone(), g.clone()).expect("grad shape"))
    }

    /// Backpropagates from this scalar into every reachable leaf, adding to
    /// any gradient already accumulated there.
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.requires_grad() {
            return Err(Error::Detached);
        }
        backward::run(&self.tape, self.id);
        Ok(())
    }

    pub(crate) fn check_same_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "operands live on different tapes".into(),
            ))
        }
    }

    /// Fails with [`Error::NonFinite`] if any entry is NaN or infinite.
    pub fn ensure_finite(&self, location: &str) -> Result<()> {
        match self.with_value(|v| v.iter().position(|x| !x.is_finite())) {
            Some(index) => Err(Error::NonFinite {
                location: location.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }
}
