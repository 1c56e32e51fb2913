use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees when it is replayed.
pub struct GradCtx<'a, T: Element> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad_output: &'a [T],
    /// `needs_grad[i]` is false when input `i` does not require a gradient;
    /// rules may return `None` for such inputs and skip the work.
    pub needs_grad: Vec<bool>,
}

/// Backward rule: maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&GradCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended in creation order, so every operation's inputs precede
/// its output and replaying the rules in reverse is a valid topological walk.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    replayed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            replayed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it takes part in backward iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, requires_grad, Vec::new(), None)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, false, Vec::new(), None)
    }

    /// Records the output of an operation together with its backward rule.
    ///
    /// The rule is dropped when none of the inputs requires a gradient.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push(value, requires_grad, inputs.to_vec(), backward)
    }

    fn push(
        &mut self,
        mut value: Tensor<T>,
        requires_grad: bool,
        inputs: Vec<Var>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            inputs,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].grad.as_deref()
    }

    /// Value with its accumulated gradient attached, if any.
    pub fn tensor_with_grad(&self, var: Var) -> Tensor<T> {
        let node = &self.nodes[var.0];
        let mut t = node.value.clone();
        if let Some(g) = &node.grad {
            t.set_grad(g.clone())
                .expect("grad length tracks value length");
        }
        t
    }

    /// Clears all gradients so the tape can be replayed again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.replayed = false;
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Gradients accumulate additively, so a tensor consumed by several
    /// operations ends up with the sum of every contribution.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.replayed {
            return Err(Error::Autodiff(
                "tape already replayed; call reset_grads() first".into(),
            ));
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got {numel} elements"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        self.replayed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            let Some(grad_out) = self.nodes[i].grad.take() else {
                continue;
            };
            let input_grads = {
                let node = &self.nodes[i];
                let ctx = GradCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad_output: &grad_out,
                    needs_grad: node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect(),
                };
                (node.backward.as_ref().expect("checked above"))(&ctx)
            };
            self.nodes[i].grad = Some(grad_out);

            let inputs = self.nodes[i].inputs.clone();
            debug_assert_eq!(inputs.len(), input_grads.len());
            for (var, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), node.value.numel());
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
