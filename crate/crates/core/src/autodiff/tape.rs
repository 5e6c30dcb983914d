use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

/// Gradient rule of one recorded operation.
///
/// `inputs` and `output` are the forward values; the rule returns one optional
/// gradient per input, shaped like that input.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Box<dyn Backward>,
    inputs: Vec<Var>,
    output: Var,
}

#[derive(Default)]
struct Inner {
    values: Vec<Rc<Tensor>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node>,
}

/// Define-by-run record of one forward pass.
///
/// Values are appended in evaluation order, so node order is a topological
/// order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(Rc::new(value));
        inner.requires_grad.push(requires_grad);
        Var(inner.values.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().values[var.0])
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.inner.borrow().values[var.0].shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.inner.borrow().requires_grad[var.0]
    }

    pub fn num_values(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Stores `output` and, when any input is differentiable, the rule that
    /// maps its gradient back onto `inputs`.
    pub fn record<B: Backward + 'static>(
        &self,
        op: B,
        inputs: &[Var],
        output: Tensor,
    ) -> Result<Var> {
        if !output.is_finite() {
            return Err(DpaError::NonFiniteValue {
                op: op.name().to_string(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let tracked = inputs.iter().any(|v| inner.requires_grad[v.0]);
        inner.values.push(Rc::new(output));
        inner.requires_grad.push(tracked);
        let out = Var(inner.values.len() - 1);
        if tracked {
            inner.nodes.push(Node {
                op: Box::new(op),
                inputs: inputs.to_vec(),
                output: out,
            });
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let loss_value = &inner.values[loss.0];
        if loss_value.numel() != 1 {
            return Err(DpaError::NotScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.values.len()];
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));
        for node in inner.nodes.iter().rev() {
            if node.output.0 > loss.0 {
                continue;
            }
            let Some(grad) = grads[node.output.0].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &*inner.values[v.0]).collect();
            let input_grads = node
                .op
                .backward(&inputs, &inner.values[node.output.0], &grad)?;
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !inner.requires_grad[var.0] {
                    continue;
                }
                if !g.is_finite() {
                    return Err(DpaError::NonFiniteValue {
                        op: format!("{} (backward)", node.op.name()),
                    });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, indexed by [`Var`]. Only values that were
/// not produced by a recorded operation (leaves) keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}
