//! Dense f32 tensors with define-by-run reverse-mode differentiation.
//!
//! Every forward operation on a tensor that requires a gradient records itself
//! on the result, so the graph hanging off a loss is the tape for that pass.
//! [`Tensor::backward`] walks it in reverse topological order and accumulates
//! gradients into the leaves. Nothing is retained between passes except the
//! leaves themselves, which is what the GAN schedule needs: each update rebuilds
//! its own graph, and [`Tensor::detach`] cuts it where a discriminator must not
//! push gradients back into the generator.

pub(crate) mod conv;
mod ops;
mod optim;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub use optim::{sgd_step, Param, SgdConfig};

pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|op| op.name()))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a leaf tensor. Fails when `data` does not fill `shape` exactly or
    /// a dimension is zero.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} must have positive dimensions"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    /// Marks a leaf as trainable. Returns a new handle; intended for freshly
    /// constructed leaves only.
    pub fn requires_grad(self) -> Tensor {
        let data = self.to_vec();
        Tensor::leaf(data, self.0.shape.clone(), true)
    }

    pub(crate) fn leaf(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op: None,
        }))
    }

    /// Result of a forward op. The op is only kept when some input needs a
    /// gradient.
    pub(crate) fn from_op(data: Vec<f32>, shape: Vec<usize>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|t| t.0.requires_grad);
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op: requires_grad.then_some(op),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    /// Overwrites leaf storage in place.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        debug_assert!(self.is_leaf());
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut data);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of the value with no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Back-propagates from a scalar loss, accumulating d(loss)/d(leaf) into
    /// every leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.0.requires_grad {
            return Err(Error::Untaped);
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => node.accumulate_grad(&grad),
                Some(op) => {
                    for (input, g) in op.backward(node, &grad) {
                        if !input.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{} backward", op.name());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through recorded ops, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for input in op.inputs() {
                    if input.0.requires_grad && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
        assert_eq!(Tensor::from_vec(vec![1.0; 6], &[2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn backward_rejects_non_scalar_and_untaped() {
        let w = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let sq = w.mul(&w).unwrap();
        assert!(matches!(sq.backward(), Err(Error::NonScalarLoss(_))));
        let plain = Tensor::scalar(3.0);
        assert!(matches!(plain.backward(), Err(Error::Untaped)));
    }

    #[test]
    fn square_sum_gradient() {
        let w = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
        // second pass accumulates
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn l1_of_equal_inputs_has_zero_subgradient() {
        let a = Tensor::from_vec(vec![0.3, -0.2, 0.9], &[3]).unwrap().requires_grad();
        let b = Tensor::from_vec(vec![0.3, -0.2, 0.9], &[3]).unwrap();
        let loss = a.sub(&b).unwrap().l1_mean();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn disconnected_leaf_gets_no_grad() {
        let used = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let unused = Tensor::from_vec(vec![5.0], &[1]).unwrap().requires_grad();
        used.sum().backward().unwrap();
        assert!(unused.grad().unwrap_or_else(|| vec![0.0]).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn detach_stops_gradient() {
        let w = Tensor::from_vec(vec![3.0], &[1]).unwrap().requires_grad();
        let y = w.mul(&w).unwrap();
        let z = y.detach().mul(&w).unwrap().sum();
        z.backward().unwrap();
        // d(const * w)/dw = const = 9
        assert_eq!(w.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let w = Tensor::from_vec(vec![2.0], &[1]).unwrap().requires_grad();
        let y = w.scale(3.0);
        let loss = y.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }
}
