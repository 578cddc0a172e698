//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding the forward value plus a boxed
//! backward closure. `backward()` walks the tape in reverse, consuming
//! intermediate gradients and accumulating into leaves. Gradients of leaves
//! persist across passes, so two backward calls sum their contributions.

use super::error::{DiffError, DiffResult};
use super::real::Real;
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient sink handed to backward closures.
///
/// Lets a closure read forward values of any node and accumulate into the
/// gradient of its parents.
pub struct Grads<'a, R: Real> {
    vals: &'a [Tensor<R>],
    grads: &'a mut [Option<Tensor<R>>],
}

impl<'a, R: Real> Grads<'a, R> {
    /// Forward value of any node. The returned borrow is tied to the tape,
    /// not to `self`, so values can be held across `grad_mut` calls.
    pub fn val(&self, v: Var) -> &'a Tensor<R> {
        &self.vals[v.0]
    }

    /// Mutable gradient accumulator for `v`, zero-initialized on first touch.
    pub fn grad_mut(&mut self, v: Var) -> &mut Tensor<R> {
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.vals[v.0].shape()));
        }
        slot.as_mut().unwrap()
    }

    /// Adds `contribution` elementwise into the gradient of `v`.
    pub fn add(&mut self, v: Var, contribution: &[R]) {
        let g = self.grad_mut(v).data_mut();
        debug_assert_eq!(g.len(), contribution.len());
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += *ci;
        }
    }
}

/// Backward closure: (own node, own adjoint, gradient sink).
type BackFn<R> = Box<dyn Fn(Var, &Tensor<R>, &mut Grads<'_, R>) + Send>;

struct Node<R: Real> {
    back: Option<BackFn<R>>,
    requires_grad: bool,
    retain: bool,
}

/// Recording tape. One tape owns one computation graph.
pub struct Tape<R: Real> {
    vals: Vec<Tensor<R>>,
    grads: Vec<Option<Tensor<R>>>,
    nodes: Vec<Node<R>>,
    grad_enabled: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), grads: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    /// Disables recording of backward closures (inference mode).
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding `value`. Gradients accumulate here if
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Adds a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keeps the gradient of a non-leaf node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Copy of `v`'s value as a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.vals[v.0].clone();
        self.leaf(value, false)
    }

    /// Current tape length, for later truncation.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops all nodes appended after `mark`. Only sound when no retained
    /// handle past the mark is used again (window-by-window inference).
    pub fn truncate(&mut self, mark: usize) {
        self.vals.truncate(mark);
        self.grads.truncate(mark);
        self.nodes.truncate(mark);
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<R>,
        requires_grad: bool,
        back: Option<BackFn<R>>,
    ) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.vals.push(value);
        self.grads.push(None);
        self.nodes.push(Node { back: if rg { back } else { None }, requires_grad: rg, retain: false });
        Var(self.nodes.len() - 1)
    }

    /// Records an op node: output `value` computed from `parents`, with
    /// `back` propagating the output adjoint. The closure is only kept when
    /// some parent requires grad and recording is on.
    pub(crate) fn push_op<F>(&mut self, value: Tensor<R>, parents: &[Var], back: F) -> Var
    where
        F: Fn(Var, &Tensor<R>, &mut Grads<'_, R>) + Send + 'static,
    {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, rg, Some(Box::new(back)))
    }

    /// Reverse pass seeding `d root = 1`. Requires a scalar root.
    pub fn backward(&mut self, root: Var) -> DiffResult<()> {
        if self.vals[root.0].numel() != 1 {
            return Err(DiffError::InvalidConfig {
                op: "backward",
                message: format!("root must be scalar, got shape {:?}", self.vals[root.0].shape()),
            });
        }
        self.backward_with(root, Tensor::scalar(R::ONE))
    }

    /// Reverse pass with an explicit seed adjoint for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<R>) -> DiffResult<()> {
        if seed.shape() != self.vals[root.0].shape() {
            return Err(DiffError::ShapeMismatch {
                op: "backward_with",
                lhs: seed.shape().to_vec(),
                rhs: self.vals[root.0].shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        {
            let slot = &mut self.grads[root.0];
            match slot {
                Some(g) => {
                    for (gi, si) in g.data_mut().iter_mut().zip(seed.data()) {
                        *gi += *si;
                    }
                }
                None => *slot = Some(seed),
            }
        }
        let Tape { vals, grads, nodes, .. } = self;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || node.back.is_none() || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            {
                let mut sink = Grads { vals, grads };
                (node.back.as_ref().unwrap())(Var(i), &g, &mut sink);
            }
            if node.retain {
                grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grads_accumulate_across_backward_passes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        // d(x^2)/dx = 6 per pass, summed over two passes.
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let build = |seperate: bool| -> (f64, f64) {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::scalar(1.5), true);
            let a = tape.mul(x, x).unwrap();
            let b = tape.sigmoid(x).unwrap();
            if seperate {
                tape.backward(a).unwrap();
                tape.backward(b).unwrap();
            } else {
                let s = tape.add(a, b).unwrap();
                tape.backward(s).unwrap();
            }
            (tape.value(a).item(), tape.grad(x).unwrap().item())
        };
        let (_, g_sum) = build(false);
        let (_, g_sep) = build(true);
        assert!((g_sum - g_sep).abs() < 1e-14, "{g_sum} vs {g_sep}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.detach(y);
        let w = tape.mul(z, z).unwrap();
        tape.backward(w).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(DiffError::InvalidConfig { .. })));
    }
}
