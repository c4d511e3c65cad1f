//! Minimal reverse-mode automatic differentiation over `ArrayD<f64>`.
//!
//! The model here is a dynamically built DAG of [`Tensor`] nodes. Every op
//! computes its value eagerly and records a backward closure; calling
//! [`Tensor::backward`] on a scalar output walks the graph in reverse
//! topological order and accumulates gradients. Trainable values are
//! [`Param`]s: leaves that collect their gradient across backward passes
//! until [`Param::zero_grad`].
//!
//! Everything is `f64` and single-threaded by design: training runs are
//! expected to be bit-reproducible for a fixed seed, and the gradient
//! checks in the test suite compare against central finite differences at
//! double precision.

pub mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor]) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    data: Rc<ArrayD<f64>>,
    needs_grad: bool,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    sink: Option<Param>,
}

/// One value in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("needs_grad", &self.node.needs_grad)
            .finish()
    }
}

impl Tensor {
    /// Wraps data that requires no gradient.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                data: Rc::new(data),
                needs_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                sink: None,
            }),
        }
    }

    /// 0-dimensional constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        Tensor::from_op_rc(Rc::new(data), parents, backward)
    }

    pub(crate) fn from_op_rc(
        data: Rc<ArrayD<f64>>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        if !needs_grad {
            // Dead subtree for the backward pass; drop the graph edges.
            return Tensor {
                node: Rc::new(Node {
                    data,
                    needs_grad: false,
                    grad: RefCell::new(None),
                    parents: Vec::new(),
                    backward: None,
                    sink: None,
                }),
            };
        }
        Tensor {
            node: Rc::new(Node {
                data,
                needs_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                sink: None,
            }),
        }
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.node.data
    }

    pub(crate) fn data_rc(&self) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.node.data)
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    /// Value of a zero-dimensional (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.node.data.len(), 1, "item() on non-scalar tensor");
        *self.node.data.iter().next().expect("non-empty tensor")
    }

    /// Same value, disconnected from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                data: Rc::clone(&self.node.data),
                needs_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                sink: None,
            }),
        }
    }

    /// Gradient accumulated on this node during the last backward pass.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Gradients of intermediate tensors stay on their nodes (readable via
    /// [`Tensor::grad`]); parameter leaves additionally accumulate into their
    /// [`Param`] storage.
    pub fn backward(&self) {
        assert_eq!(
            self.node.data.len(),
            1,
            "backward() requires a scalar output"
        );
        let order = self.topo_order();
        *self.node.grad.borrow_mut() = Some(ArrayD::from_elem(self.node.data.raw_dim(), 1.0));
        for t in order.iter().rev() {
            let node = &t.node;
            let Some(grad) = node.grad.borrow().clone() else {
                continue;
            };
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad, &node.parents);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    if !parent.node.needs_grad {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                        accumulate(&parent.node.grad, pg);
                    }
                }
            }
            if let Some(param) = &node.sink {
                param.accumulate_grad(&grad);
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains(&key) || !t.node.needs_grad {
                continue;
            }
            visited.insert(key);
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                stack.push((p.clone(), false));
            }
        }
        order
    }
}

fn accumulate(slot: &RefCell<Option<ArrayD<f64>>>, g: ArrayD<f64>) {
    let mut borrow = slot.borrow_mut();
    match borrow.as_mut() {
        Some(acc) => *acc += &g,
        None => *borrow = Some(g),
    }
}

struct ParamInner {
    name: String,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<ArrayD<f64>>,
}

/// A named trainable array.
///
/// `leaf()` snapshots the current value into the graph; after `backward()`
/// the gradient lands here, where the optimizer reads it.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.data.borrow().shape())
            .finish()
    }
}

impl Param {
    pub fn new(name: impl Into<String>, data: ArrayD<f64>) -> Param {
        let shape = data.raw_dim();
        Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                data: RefCell::new(data),
                grad: RefCell::new(ArrayD::zeros(shape)),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Graph leaf carrying the parameter's current value.
    pub fn leaf(&self) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                data: Rc::new(self.inner.data.borrow().clone()),
                needs_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                sink: Some(self.clone()),
            }),
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.data.borrow()
    }

    pub fn set_value(&self, data: ArrayD<f64>) {
        assert_eq!(
            data.shape(),
            self.inner.data.borrow().shape(),
            "param {}: shape change",
            self.inner.name
        );
        *self.inner.data.borrow_mut() = data;
    }

    /// In-place update, used by the optimizer.
    pub fn update_with(&self, f: impl FnOnce(&mut ArrayD<f64>, &ArrayD<f64>)) {
        let grad = self.inner.grad.borrow();
        let mut data = self.inner.data.borrow_mut();
        f(&mut data, &grad);
    }

    pub fn grad(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.grad.borrow()
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.inner.grad.borrow().iter().map(|g| g * g).sum()
    }

    pub fn scale_grad(&self, s: f64) {
        self.inner.grad.borrow_mut().mapv_inplace(|g| g * s);
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accumulate_grad(&self, g: &ArrayD<f64>) {
        let mut grad = self.inner.grad.borrow_mut();
        debug_assert_eq!(grad.shape(), g.shape());
        *grad += g;
    }
}

/// Finite-difference reference gradients, used by the test suites as the
/// independent oracle for the analytic backward passes.
pub mod fdcheck {
    use ndarray::ArrayD;

    /// Central-difference gradient of `f` at `x`.
    pub fn numeric_gradient(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        step: f64,
    ) -> ArrayD<f64> {
        let mut grad = ArrayD::zeros(x.raw_dim());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.as_slice().unwrap()[i];
            probe.as_slice_mut().unwrap()[i] = orig + step;
            let hi = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig - step;
            let lo = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig;
            grad.as_slice_mut().unwrap()[i] = (hi - lo) / (2.0 * step);
        }
        grad
    }

    /// Max relative error between analytic and numeric gradients, with an
    /// absolute floor for entries near zero.
    pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / (n.abs().max(a.abs()).max(floor)))
            .fold(0.0, f64::max)
    }
}
