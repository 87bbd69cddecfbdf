//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Var`] is a reference-counted graph node holding its forward value and
//! the operation that produced it. Nodes only keep their parents when at
//! least one parent requires a gradient, so inference graphs built from
//! constant leaves are freed as soon as intermediate values go out of scope.
//!
//! Node ids increase monotonically with creation order and parents are
//! always created before their children, so sorting the reachable nodes by
//! descending id is a valid reverse topological order.

mod conv;
mod fft;
mod ops;

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{fmt_shape, numel, Tensor};

pub use conv::Conv2dSpec;
pub(crate) use conv::{conv2d_backward, conv2d_forward};
pub use fft::fft2;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    ScaleBy(Var<T>, Var<T>),
    Gelu(Var<T>),
    Reshape(Var<T>),
    Narrow {
        x: Var<T>,
        offset: usize,
    },
    Concat(Vec<Var<T>>),
    Gather {
        x: Var<T>,
        index: Rc<Vec<u32>>,
    },
    MatMul {
        a: Var<T>,
        b: Var<T>,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var<T>,
        w: Var<T>,
        spec: Conv2dSpec,
    },
    LayerNorm {
        x: Var<T>,
        scale: Var<T>,
        shift: Var<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2NormRows {
        x: Var<T>,
        norms: Vec<T>,
    },
    SoftmaxRows(Var<T>),
    SumAll(Var<T>),
    MeanAll(Var<T>),
    L1Loss(Var<T>, Var<T>),
    FftL1 {
        a: Var<T>,
        b: Var<T>,
        unit: Vec<rustfft::num_complex::Complex<T>>,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | L1Loss(a, b) => vec![a, b],
            Scale(x, _) | Gelu(x) | Reshape(x) | SoftmaxRows(x) | SumAll(x) | MeanAll(x) => {
                vec![x]
            }
            Narrow { x, .. } | Gather { x, .. } | L2NormRows { x, .. } => vec![x],
            Concat(xs) => xs.iter().collect(),
            MatMul { a, b, .. } | FftL1 { a, b, .. } => vec![a, b],
            Conv2d { x, w, .. } => vec![x, w],
            LayerNorm { x, scale, shift, .. } => vec![x, scale, shift],
        }
    }
}

impl<T: Real> Var<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Leaf whose gradient flag is taken from the tensor.
    pub fn leaf(t: Tensor<T>) -> Self {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        Self::from_parts(shape, t.into_data(), rg, Op::Leaf)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(t: Tensor<T>) -> Self {
        Self::leaf(t.with_requires_grad(true))
    }

    pub fn constant(t: Tensor<T>) -> Self {
        Self::leaf(t.with_requires_grad(false))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Detached copy of the forward value.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(self.0.shape.clone(), self.0.data.clone()).expect("node shape is valid")
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape()[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a (C,H,W) tensor, got {}",
                fmt_shape(self.shape())
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape()[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got {}",
                fmt_shape(self.shape())
            ))),
        }
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar output, got {}",
                fmt_shape(self.shape())
            )));
        }
        self.backward_with_seed(vec![T::one()])
    }

    /// Backpropagates an explicit output cotangent.
    pub fn backward_with_seed(&self, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.numel() {
            return Err(Error::Shape(format!(
                "seed has {} values for output {}",
                seed.len(),
                fmt_shape(self.shape())
            )));
        }
        let mut order: Vec<Rc<Node<T>>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![Rc::clone(&self.0)];
        while let Some(node) = stack.pop() {
            if !node.requires_grad || !seen.insert(node.id) {
                continue;
            }
            for p in node.op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(Rc::clone(&p.0));
                }
            }
            order.push(node);
        }
        order.sort_unstable_by(|a, b| b.id.cmp(&a.id));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if self.requires_grad() {
            grads.insert(self.id(), seed);
        }
        for node in order {
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(node.id, g);
            } else {
                ops::backward_node(&node, &g, &mut GradSink(&mut grads));
            }
        }
        Ok(Gradients { map: leaves })
    }
}

/// Accumulates cotangents of interior nodes during the backward sweep.
pub(crate) struct GradSink<'a, T>(&'a mut HashMap<u64, Vec<T>>);

impl<T: Real> GradSink<'_, T> {
    /// Buffer for `v`'s gradient, or `None` when `v` needs none.
    pub fn buf(&mut self, v: &Var<T>) -> Option<&mut Vec<T>> {
        if !v.requires_grad() {
            return None;
        }
        let n = v.numel();
        Some(self.0.entry(v.id()).or_insert_with(|| vec![T::zero(); n]))
    }
}

/// Leaf gradients produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&[T]> {
        self.map.get(&v.id()).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Vec<T>> {
        self.map.remove(&v.id())
    }

    /// Gradient for `v`, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); v.numel()])
    }
}
