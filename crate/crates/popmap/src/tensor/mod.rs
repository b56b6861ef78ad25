//! Minimal reverse-mode autodiff engine.
//!
//! Tensors are row-major `f64` buffers wrapped in shared nodes of a
//! define-by-run tape. Each op that touches a gradient-requiring input
//! records a [`GradFn`] capturing whatever forward data its backward pass
//! needs; `backward()` walks the tape in reverse topological order, then
//! frees it. Single-threaded by construction: training with a fixed seed is
//! bit-reproducible.

mod adam;
mod checkpoint;
mod conv;
mod loss;
mod lstm;
mod norm;
mod ops;

pub use adam::{Adam, AdamConfig, ParamGroup};
pub use checkpoint::{load_checkpoint, restore_into, save_checkpoint, NamedParam};
pub use conv::conv2d;
pub use loss::mse_loss;
pub use lstm::{lstm_cell, LstmParams};
pub use norm::{batchnorm2d, BnMode, RunningStats};
pub use ops::{add, concat_last, linear, mul, relu, scale, sigmoid, sub, tanh_t};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Backward rule for one op. `out_grad` is the gradient flowing into the op
/// output; the implementation returns one gradient buffer per parent (None
/// where `needs[i]` is false).
pub(crate) trait GradFn {
    fn backward(&self, out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// An n-dimensional numeric array participating in reverse-mode autodiff.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

impl Tensor {
    /// Leaf tensor that does not require gradients.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(RefCell::new(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            grad_fn: None,
        }))))
    }

    /// Leaf parameter tensor (tracked by the tape).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).expect("scalar")
    }

    /// Parameter initialized from a centered normal with the given std.
    pub fn randn_param(shape: &[usize], std: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::param(shape, data).expect("randn shape")
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: Box<dyn GradFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            parents,
            grad_fn: Some(grad_fn),
        })))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// True when gradients must flow to or through this tensor.
    pub(crate) fn needs_grad(&self) -> bool {
        let n = self.0.borrow();
        n.requires_grad || n.grad_fn.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrites the data buffer (optimizer updates). Length must match.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), data.len());
        n.data = data;
    }

    /// In-place mutation of the data buffer.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.borrow_mut().data);
    }

    /// Copy of the values as a fresh gradient-free leaf.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::from_vec(&n.shape, n.data.clone()).expect("detach")
    }

    fn ptr(&self) -> *const RefCell<Node> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable through the tape, then frees the tape.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::state("backward() requires a scalar tensor"));
        }

        // Iterative post-order DFS for a topological order.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const RefCell<Node>> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, processed)) = stack.pop() {
            if processed {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            let parents = t.0.borrow().parents.clone();
            for p in parents {
                if p.needs_grad() && !visited.contains(&p.ptr()) {
                    stack.push((p, false));
                }
            }
        }

        self.0.borrow_mut().grad = Some(vec![1.0]);

        for t in topo.iter().rev() {
            let (grad_fn, parents, out_grad) = {
                let mut n = t.0.borrow_mut();
                let gf = n.grad_fn.take();
                let parents = std::mem::take(&mut n.parents);
                let og = if gf.is_some() { n.grad.clone() } else { None };
                (gf, parents, og)
            };
            let (Some(gf), Some(out_grad)) = (grad_fn, out_grad) else {
                continue;
            };
            let needs: Vec<bool> = parents.iter().map(|p| p.needs_grad()).collect();
            let grads = gf.backward(&out_grad, &needs);
            debug_assert_eq!(grads.len(), parents.len());
            for (p, g) in parents.iter().zip(grads) {
                if let Some(g) = g {
                    let mut pn = p.0.borrow_mut();
                    debug_assert_eq!(g.len(), pn.data.len());
                    match &mut pn.grad {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => pn.grad = Some(g),
                    }
                }
            }
            // Intermediate grads are not needed once consumed.
            if !t.0.borrow().requires_grad {
                t.0.borrow_mut().grad = None;
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.backward().is_err());
    }

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        // loss = (x + x) * x = 2x^2, dloss/dx = 4x
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let s = add(&x, &x).unwrap();
        let loss = mul(&s, &x).unwrap();
        loss.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn grads_accumulate_across_backwards_until_zeroed() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        for _ in 0..2 {
            let loss = mul(&x, &x).unwrap();
            loss.backward().unwrap();
        }
        assert!((x.grad().unwrap()[0] - 8.0).abs() < 1e-12);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
