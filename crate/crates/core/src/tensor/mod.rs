//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a contiguous row-major buffer behind an `Arc`, an
//! explicit shape, and an optional autograd node. Leaves created with
//! [`Tensor::param`] accumulate gradients across [`Tensor::backward`] calls
//! until explicitly zeroed; everything else is freed as soon as the last
//! consumer drops.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

pub mod autograd;
pub mod gradcheck;
pub mod ops;

pub use autograd::no_grad;

use autograd::{next_node_id, record_enabled, Node, NodeKind};

/// Element type of a tensor: `f32` for training, `f64` for tight oracles.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    /// Fused multiply-add; `self * a + b`.
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Name used in serialized manifests.
    fn dtype_name() -> &'static str;
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn dtype_name() -> &'static str {
                $name
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("element count mismatch: cannot view {from:?} ({from_n} elements) as {to:?} ({to_n} elements)")]
    ElementCount {
        from: Vec<usize>,
        from_n: usize,
        to: Vec<usize>,
        to_n: usize,
    },
    #[error("domain error in {op}: {what}")]
    Domain { op: &'static str, what: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Rc<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    /// Trainable leaf: participates in autograd and accumulates gradient.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        let mut t = Self::from_vec(data, shape);
        let n = t.numel();
        t.node = Some(Rc::new(Node {
            id: next_node_id(),
            inputs: Vec::new(),
            kind: NodeKind::Leaf {
                grad: RefCell::new(vec![T::ZERO; n]),
            },
        }));
        t
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![T::ZERO; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_vec(vec![T::ONE; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    /// True when this tensor is connected to the autograd graph.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self.node.as_deref(),
            Some(Node {
                kind: NodeKind::Leaf { .. },
                ..
            })
        )
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self) -> Option<Vec<T>> {
        match self.node.as_deref() {
            Some(Node {
                kind: NodeKind::Leaf { grad },
                ..
            }) => Some(grad.borrow().clone()),
            _ => None,
        }
    }

    /// Reset the accumulated gradient of a leaf to zero.
    pub fn zero_grad(&self) {
        if let Some(Node {
            kind: NodeKind::Leaf { grad },
            ..
        }) = self.node.as_deref()
        {
            for g in grad.borrow_mut().iter_mut() {
                *g = T::ZERO;
            }
        }
    }

    /// Same data, detached from the graph.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutate the underlying buffer in place (optimizer updates). Copies only
    /// if an old graph still references the buffer.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [T])) {
        f(Arc::<Vec<T>>::make_mut(&mut self.data));
    }

    /// Replace the buffer wholesale; shape must be preserved.
    pub fn set_data(&mut self, data: Vec<T>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        self.data = Arc::new(data);
    }

    pub(crate) fn node(&self) -> Option<&Rc<Node<T>>> {
        self.node.as_ref()
    }

    /// Construct an op output and wire it into the graph when recording is on
    /// and at least one input is connected.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        backward: Box<dyn autograd::Backward<T>>,
    ) -> Self {
        let mut out = Self::from_vec(data, shape);
        if record_enabled() && inputs.iter().any(|t| t.node.is_some()) {
            out.node = Some(Rc::new(Node {
                id: next_node_id(),
                inputs,
                kind: NodeKind::Op(backward),
            }));
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable leaf; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }
}
