//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records primitive operations eagerly as they execute; calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse and
//! accumulates gradients into every `requires_grad` leaf. Tapes are rebuilt
//! per training step and confined to one thread; values are stored flat in
//! row-major order with an explicit shape.
//!
//! The substrate is precision-parameterized through [`Scalar`]: property
//! tests run in `f64`, training runs in `f32`.

mod conv;
mod ops;

pub use ops::Op;

use std::cell::RefCell;
use std::fmt;

/// Floating-point element type the tape can differentiate through.
pub trait Scalar: num_traits::Float + fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// General matrix multiply `C = alpha * A(m,k) * B(k,n) + beta * C`
    /// with explicit row/column strides on every operand.
    ///
    /// # Safety
    /// Strides and dimensions must describe regions inside the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Errors raised when an operation's preconditions are violated.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected} for shape {shape:?}")]
    BadShape { op: &'static str, expected: String, shape: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<V> = std::result::Result<V, AutodiffError>;

/// A shape-carrying dense value living outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {shape:?} does not match buffer of {}",
            values.len()
        );
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.values[0]
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Record of one forward computation; rebuilt per step.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input. Gradients accumulate on it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node { shape: t.shape, values: t.values, op: Op::Leaf, requires_grad })
    }

    /// A leaf that never receives gradients (noise, targets, frozen data).
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub(crate) fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor { shape: nodes[v.0].shape.clone(), values: nodes[v.0].values.clone() }
    }

    pub fn value_scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].values.len(), 1);
        nodes[v.0].values[0]
    }

    /// Gradient of the last `backward` call with respect to `v`.
    /// Zero-filled if the node did not participate.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let values = if grads.is_empty() || grads[v.0].is_empty() {
            vec![T::zero(); nodes[v.0].values.len()]
        } else {
            grads[v.0].clone()
        };
        Tensor { shape: nodes[v.0].shape.clone(), values }
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.0].values.len() != 1 {
                return Err(AutodiffError::NonScalarLoss { shape: nodes[loss.0].shape.clone() });
            }
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Vec<T>> = nodes
            .iter()
            .map(|n| if n.requires_grad { vec![T::zero(); n.values.len()] } else { Vec::new() })
            .collect();
        if grads[loss.0].is_empty() {
            grads[loss.0] = vec![T::zero(); 1];
        }
        grads[loss.0][0] = T::one();
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            // Detach this node's grad so parent grads can be written.
            let g = std::mem::take(&mut grads[i]);
            ops::backward_step(&nodes, &mut grads, i, &g);
            grads[i] = g;
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued function at `x`.
///
/// The denominator is `max(|numeric|, 1e-8)` per element.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0, "grad_check eps must be positive");
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv);

    let eval = |values: &[T]| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf(Tensor::from_vec(x.shape.clone(), values.to_vec()), false);
        let out = f(&t, v)?;
        Ok(t.value_scalar(out).to_f64())
    };

    let mut worst = 0.0f64;
    let mut probe = x.values.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + T::from_f64(eps);
        let up = eval(&probe)?;
        probe[i] = orig - T::from_f64(eps);
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic.values[i].to_f64() - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
