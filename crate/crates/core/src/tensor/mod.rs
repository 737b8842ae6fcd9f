//! Dense rank-≤3 tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by an operation on gradient-requiring inputs
//! keeps a link to its inputs together with a vector-Jacobian rule. Calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order. Intermediate gradients live only for the duration of
//! the traversal; leaves accumulate theirs into the grad slot until they are
//! explicitly zeroed.

mod linalg;
mod nn;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use linalg::{lu_factor, LuFactors};

pub const MAX_RANK: usize = 3;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to a vector-Jacobian rule.
pub(crate) struct VjpArgs<'a> {
    pub inputs: &'a [Tensor],
    pub out: &'a [f64],
    pub grad: &'a [f64],
}

type VjpFn = dyn Fn(&VjpArgs<'_>) -> Vec<Option<Vec<f64>>>;

struct Node {
    inputs: Vec<Tensor>,
    vjp: Box<VjpFn>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("expected 1..={MAX_RANK} positive dimensions"),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("holds {n} elements but {} were given", data.len()),
            });
        }
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    /// A leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::raw(t.0.data.clone(), t.0.shape.clone(), true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(vec![0.0; n], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(vec![v; n], shape)
    }

    pub fn eye(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Self::raw(data, vec![d, d], false, None)
    }

    fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = RefCell::new(requires_grad.then(|| vec![0.0; data.len()]));
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad,
            node,
        }))
    }

    /// Builds the result of an operation, recording `vjp` when any input
    /// requires a gradient and recording is enabled.
    pub(crate) fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, inputs: &[&Tensor], vjp: F) -> Self
    where
        F: Fn(&VjpArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::raw(data, shape, false, None);
        }
        let node = Node {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            vjp: Box::new(vjp),
        };
        // Interior nodes keep no grad slot; only leaves accumulate.
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            node: Some(node),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// A copy of the data cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Accumulated gradient of a leaf created with [`Tensor::parameter`].
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a scalar, accumulating into every reachable
    /// parameter leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    if let Some(slot) = t.0.grad.borrow_mut().as_mut() {
                        for (s, v) in slot.iter_mut().zip(&g) {
                            *s += v;
                        }
                    }
                }
                Some(node) => {
                    let args = VjpArgs {
                        inputs: &node.inputs,
                        out: &t.0.data,
                        grad: &g,
                    };
                    let input_grads = (node.vjp)(&args);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel());
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require a gradient, inputs first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for inp in node.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
