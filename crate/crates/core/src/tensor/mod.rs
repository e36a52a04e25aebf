//! Dense f64 tensors with a record-on-execute tape for reverse-mode AD.
//!
//! Every tensor produced by an op whose inputs require gradients keeps a
//! record of the op, its inputs and a backward closure. Node ids grow
//! monotonically per thread, so sorting reachable nodes by id gives a valid
//! topological order without a separate graph object.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::{apply_primitive, Op};
pub(crate) use ops::dot;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("function is not deterministic: two evaluations at the same point differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape { op, msg: msg.into() })
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Computes input gradients from the output gradient.
///
/// Receives `(grad_out, inputs, output_data)` and returns one entry per
/// input; `None` for inputs that do not require gradients.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Record {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    record: Option<Record>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            );
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// A leaf that accumulates gradients during `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(
                "param",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            );
        }
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        record: Option<Record>,
    ) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            record,
        }))
    }

    /// Builds the result of a primitive, attaching a tape record when any
    /// input requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Self::from_parts(shape, data, requires_grad, record)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the primitive that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.record.as_ref().map(|r| r.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.0.shape.last().unwrap_or(&1);
        &self.0.data[i * cols..(i + 1) * cols]
    }

    /// Reverse pass from a scalar loss. Gradients are added into any grad
    /// buffer already present on a node.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Rank(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Collect reachable recorded nodes.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.0.id, ()).is_some() {
                continue;
            }
            if let Some(rec) = &t.0.record {
                for inp in &rec.inputs {
                    if inp.requires_grad() && !seen.contains_key(&inp.0.id) {
                        stack.push(inp.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in &nodes {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(rec) = &node.0.record {
                let input_grads = (rec.backward)(&g, &rec.inputs, &node.0.data);
                debug_assert_eq!(input_grads.len(), rec.inputs.len());
                for (inp, ig) in rec.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), inp.numel(), "grad size for {}", rec.op);
                    match pending.get_mut(&inp.0.id) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(inp.0.id, ig);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::new(&[2, 2], vec![1.0; 4]).unwrap().numel(), 4);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rank_error() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.exp();
        assert!(matches!(y.backward(), Err(TensorError::Rank(_))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // loss = sum(exp(x)) + sum(x*x); grad = exp(x) + 2x
        let x = Tensor::param(&[3], vec![0.1, -0.4, 0.7]).unwrap();
        let f = x.exp().sum_all();
        let g = x.mul(&x).unwrap().sum_all();
        f.add(&g).unwrap().backward().unwrap();
        let grad = x.grad().unwrap();
        for (i, v) in [0.1f64, -0.4, 0.7].iter().enumerate() {
            assert!((grad[i] - (v.exp() + 2.0 * v)).abs() < 1e-14);
        }
    }

    #[test]
    fn every_reachable_tensor_gets_a_grad() {
        let x = Tensor::param(&[2], vec![0.3, 0.2]).unwrap();
        let h = x.exp();
        let loss = h.sum_all();
        loss.backward().unwrap();
        assert!(h.grad().is_some());
        assert!(x.grad().is_some());
    }

    #[test]
    fn no_record_without_grad() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.exp();
        assert!(y.op_name().is_none());
        assert!(!y.requires_grad());
    }
}
