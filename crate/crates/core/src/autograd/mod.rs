//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every forward operation in creation order, which is a
//! topological order of the graph by construction. [`Tape::backward`] walks
//! it in reverse. Tapes are built fresh for every forward pass.

mod conv;
mod gradcheck;
mod ops;
mod param;

use std::cell::RefCell;
use std::rc::Rc;

pub use conv::ConvGeom;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::linalg::SymmetricEigen;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Sqrt,
    Square,
    Recip,
    Exp,
    Log,
    Powi(i32),
    Clamp(f64, f64),
    Sigmoid,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Prelu(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    /// Full min or max reduction; stores the selected flat index.
    Extremum(usize, usize),
    Reshape(usize),
    BatchItem(usize, usize),
    Channel(usize, usize),
    GatherPatches {
        x: usize,
        size: usize,
        stride: usize,
    },
    Covariance(usize),
    SymEig(usize, Rc<SymmetricEigen>),
    IndexSelect(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Dynamic computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that gradients are tracked for.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a parameter's current value as a tracked leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.get(id).value.clone(), Op::Leaf, true, Some(id))
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            let contributions = ops::backward_op(&nodes, id, &g)?;
            for (src, contrib) in contributions {
                if src >= id {
                    return Err(Error::InvalidShape {
                        op: "backward",
                        reason: "graph cycle".into(),
                    });
                }
                if !nodes[src].needs_grad {
                    continue;
                }
                match &mut grads[src] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        let params = nodes.iter().map(|n| n.param).collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was reachable.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients of every leaf bound to a parameter, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_ref()?)))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }
}
