use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::rng::SeededRng;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operation for differentiation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Everything an adjoint rule gets to see when the tape is replayed.
pub(crate) struct GradCtx<'a> {
    /// Upstream gradient, same length as `out`.
    pub grad: &'a [f32],
    pub out: &'a [f32],
    pub parents: &'a [Tensor],
    pub needs: &'a [bool],
}

pub(crate) type GradFn = Box<dyn Fn(&GradCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Recorded {
    parents: Vec<Tensor>,
    grad_fn: GradFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    recorded: Option<Recorded>,
}

/// A dense row-major `f32` tensor taking part in reverse-mode differentiation.
///
/// Cloning is cheap and shares the underlying node. Node ids grow
/// monotonically, so creation order is a valid topological order of the
/// computation tape and `backward` replays it by descending id.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f32> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        recorded: Option<Recorded>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            recorded,
        }))
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::dim(
                "from_vec",
                format!("dimension sizes must be positive, got {shape:?}"),
            ));
        }
        if numel_of(shape) != data.len() {
            return Err(TensorError::dim(
                "from_vec",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(t.into_param())
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::make(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::make(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut SeededRng) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.normal() * std).collect();
        Tensor::make(data, shape.to_vec(), false, None)
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut SeededRng) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::make(data, shape.to_vec(), false, None)
    }

    /// Copies the values into a fresh leaf that requires grad.
    pub fn into_param(self) -> Tensor {
        let data = self.0.data.borrow().clone();
        Tensor::make(data, self.0.shape.clone(), true, None)
    }

    /// Copies the values into a fresh leaf with no history.
    pub fn detach(&self) -> Tensor {
        Tensor::make(
            self.0.data.borrow().clone(),
            self.0.shape.clone(),
            false,
            None,
        )
    }

    /// Creates the result of an operation, recording the adjoint rule only
    /// when some parent participates in differentiation.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let track = is_grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Tensor::make(data, shape, true, Some(Recorded { parents, grad_fn }))
        } else {
            Tensor::make(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.recorded.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful on leaves (parameters,
    /// buffers); mutating a tensor that a live graph depends on invalidates
    /// that graph's adjoints.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let data = self.0.data.borrow();
        assert_eq!(
            data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.0.shape
        );
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f32>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Backpropagates from a scalar loss, accumulating into the `grad` of
    /// every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Err(TensorError::Contract(
                "loss is not connected to any tensor that requires grad".into(),
            ));
        }

        let order = self.reverse_topological();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.recorded {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad),
                    }
                }
                Some(rec) => {
                    let needs: Vec<bool> = rec.parents.iter().map(|p| p.0.requires_grad).collect();
                    let out = node.0.data.borrow();
                    let parent_grads = (rec.grad_fn)(&GradCtx {
                        grad: &grad,
                        out: &out,
                        parents: &rec.parents,
                        needs: &needs,
                    });
                    for ((parent, pg), need) in rec.parents.iter().zip(parent_grads).zip(&needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.entry(parent.id()) {
                            Entry::Occupied(mut e) => {
                                e.get_mut().iter_mut().zip(&pg).for_each(|(a, g)| *a += g)
                            }
                            Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn reverse_topological(&self) -> Vec<Tensor> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(rec) = &t.0.recorded {
                stack.extend(rec.parents.iter().filter(|p| p.0.requires_grad).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));
        nodes
    }
}
