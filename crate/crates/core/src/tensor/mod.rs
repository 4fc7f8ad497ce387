//! Dense f64 tensors with a reverse-mode tape.
//!
//! Every differentiable operation appends one node to the tape shared by its
//! tracked inputs. [`backward`] walks the tape in reverse and evaluates each
//! node's vector-Jacobian product with the same tensor operations used in the
//! forward pass. With `create_graph = true` those operations are recorded as
//! new nodes, so the returned gradients can themselves be differentiated; this
//! is what the gradient penalty of the critics needs.
//!
//! Tapes use `Rc` and are confined to one thread. [`Array`] is the plain,
//! `Send + Sync` value type used for parameters and data moving between
//! threads.

pub mod gradcheck;
mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

pub use ops::Op;

/// Shape plus row-major data, without any autodiff bookkeeping.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "array",
                format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(shape_err("array", format!("zero extent in {shape:?}")));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access to the elements.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, "{:?}", self.data())?;
        }
        Ok(())
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Disables recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    GradModeGuard::set(false)
}

#[derive(Clone)]
struct Input {
    value: Array,
    id: Option<usize>,
}

#[derive(Clone)]
struct Node {
    op: Op,
    inputs: Vec<Input>,
    output: Array,
}

/// Append-only record of operations. Cloning yields another handle to the
/// same tape.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Array) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            output: value.clone(),
        });
        Tensor {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn node(&self, id: usize) -> Node {
        self.nodes.borrow()[id].clone()
    }

    fn ptr_eq(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Op kinds in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A value that may be tracked on a tape.
#[derive(Clone)]
pub struct Tensor {
    value: Array,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(")?;
        self.value.fmt(f)?;
        if let Some(n) = &self.node {
            write!(f, " @{}", n.id)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Ok(Self::constant(Array::new(shape, data)?))
    }

    pub fn constant(value: Array) -> Self {
        Self { value, node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(Array::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(Array::full(shape, 1.0))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Tensor {
        Self::constant(self.value.clone())
    }

    pub fn into_array(self) -> Array {
        self.value
    }

    fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }
}

/// Builds the output tensor of `op`, appending a node when recording is on
/// and any input is tracked.
fn record(op: Op, inputs: &[&Tensor], output: Array) -> Result<Tensor> {
    if !grad_enabled() {
        return Ok(Tensor::constant(output));
    }
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(tp) = t.tape() {
            match tape {
                None => tape = Some(tp),
                Some(prev) if !prev.ptr_eq(tp) => {
                    return Err(Error::TapeMismatch { op: op.name() })
                }
                _ => {}
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(Tensor::constant(output));
    };
    let id = tape.push(Node {
        op,
        inputs: inputs
            .iter()
            .map(|t| Input {
                value: t.value.clone(),
                id: t.node.as_ref().map(|n| n.id),
            })
            .collect(),
        output: output.clone(),
    });
    Ok(Tensor {
        value: output,
        node: Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
    })
}

/// Gradients of the single-element `output` with respect to each of `wrt`.
///
/// Tensors that `output` does not depend on get a zero gradient. With
/// `create_graph` the gradient computation is itself recorded on the tape.
pub fn backward(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::Backward(format!(
            "output must have exactly one element, got shape {:?}",
            output.shape()
        )));
    }
    let zeros = |t: &Tensor| Tensor::zeros(t.shape());
    let Some(root) = &output.node else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };
    let tape = root.tape.clone();
    for t in wrt {
        if let Some(tp) = t.tape() {
            if !tp.ptr_eq(&tape) {
                return Err(Error::Backward(
                    "wrt tensor lives on a different tape".into(),
                ));
            }
        }
    }
    let wanted: HashSet<usize> = wrt
        .iter()
        .filter_map(|t| t.node.as_ref().map(|n| n.id))
        .collect();

    let _mode = GradModeGuard::set(create_graph);
    let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
    grads[root.id] = Some(Tensor::ones(output.shape()));

    for id in (0..=root.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = tape.node(id);
        if wanted.contains(&id) {
            grads[id] = Some(g.clone());
        }
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let needs: Vec<bool> = node.inputs.iter().map(|i| i.id.is_some()).collect();
        let inputs: Vec<Tensor> = node
            .inputs
            .into_iter()
            .map(|i| Tensor {
                value: i.value,
                node: i.id.map(|id| NodeRef {
                    tape: tape.clone(),
                    id,
                }),
            })
            .collect();
        let out = Tensor {
            value: node.output,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        };
        let vjps = node.op.vjp(&inputs, &out, &g, &needs)?;
        for (input, vjp) in inputs.iter().zip(vjps) {
            let (Some(n), Some(v)) = (&input.node, vjp) else {
                continue;
            };
            debug_assert_eq!(v.shape(), input.shape(), "vjp shape for {}", node.op.name());
            grads[n.id] = Some(match grads[n.id].take() {
                None => v,
                Some(acc) => acc.add(&v)?,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|t| {
            t.node
                .as_ref()
                .and_then(|n| grads.get(n.id).cloned().flatten())
                .unwrap_or_else(|| zeros(t))
        })
        .collect())
}
