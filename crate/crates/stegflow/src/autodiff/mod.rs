//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! result value and a backward closure. [`Tape::backward`] walks the nodes in
//! reverse creation order (a valid topological order, since the graph is
//! append-only) and accumulates gradients per node.
//!
//! Tensors are f32 in production; gradient-check tests instantiate the same
//! code at f64 so central finite differences are not drowned by rounding.
//!
//! ```
//! use stegflow::autodiff::Tape;
//! use ndarray::arr1;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
//! let y = (x * x).mean_all(); // d/dx mean(x^2) = 2x/3
//! let grads = tape.backward(y);
//! let gx = grads.of(x).unwrap();
//! assert!((gx[[0]] - 2.0 / 3.0).abs() < 1e-12);
//! ```

mod ops;

pub use ops::{concat_cols, gaussian_kernel_2d, stack_channels};

use ndarray::{ArrayD, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

/// Element type the engine is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    fn from_f(v: f64) -> Self {
        v as f32
    }
    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f(v: f64) -> Self {
        v
    }
    fn to_f(self) -> f64 {
        self
    }
}

type BackFn<T> = Box<dyn Fn(ArrayD<T>, &mut [Option<ArrayD<T>>])>;

struct Node<T: Scalar> {
    value: Arc<ArrayD<T>>,
    back: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    // (external slot, node id) pairs registered through `watch`.
    watched: RefCell<Vec<(usize, usize)>>,
}

/// Handle to a value on a tape. Copyable; the data lives in the tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, t: Tensor<'_, T>) -> Option<&ArrayD<T>> {
        self.slots.get(t.id).and_then(|s| s.as_ref())
    }
}

pub(crate) fn accumulate<T: Scalar>(
    slots: &mut [Option<ArrayD<T>>],
    id: usize,
    g: ArrayD<T>,
) {
    match &mut slots[id] {
        Some(cur) => *cur += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            watched: RefCell::new(Vec::new()),
        }
    }

    pub(crate) fn push(&self, value: ArrayD<T>, back: Option<BackFn<T>>) -> Tensor<'_, T> {
        // Interior nodes without a live gradient path are skipped in backward.
        let needs_grad = back.is_some();
        self.push_with(value, back, needs_grad)
    }

    pub(crate) fn push_with(
        &self,
        value: ArrayD<T>,
        back: Option<BackFn<T>>,
        needs_grad: bool,
    ) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            back,
            needs_grad,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Record an input with no parents. Gradients accumulate into it but do
    /// not propagate further.
    pub fn leaf(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        self.push_with(value, None, false)
    }

    /// A leaf whose gradient the caller intends to read (model inputs under
    /// a gradient check, for example).
    pub fn leaf_grad(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        self.push_with(value, None, true)
    }

    /// Record an input and associate it with an external slot (used by the
    /// parameter store to reclaim per-parameter gradients after backward).
    pub fn watch(&self, slot: usize, value: ArrayD<T>) -> Tensor<'_, T> {
        self.watch_arc(slot, Arc::new(value))
    }

    /// Zero-copy variant of [`Tape::watch`].
    pub fn watch_arc(&self, slot: usize, value: Arc<ArrayD<T>>) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            back: None,
            needs_grad: true,
        });
        let t = Tensor {
            tape: self,
            id: nodes.len() - 1,
        };
        self.watched.borrow_mut().push((slot, t.id));
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass seeded with ones at `root` (normally a one-element loss).
    pub fn backward(&self, root: Tensor<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut slots: Vec<Option<ArrayD<T>>> = Vec::with_capacity(nodes.len());
        slots.resize_with(nodes.len(), || None);
        slots[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.shape(), T::one()));
        for id in (0..=root.id).rev() {
            if let Some(back) = &nodes[id].back {
                // Interior node: consume its gradient, push to parents.
                if let Some(g) = slots[id].take() {
                    back(g, &mut slots);
                }
            }
            // Leaves keep their slot so callers can read it afterwards.
        }
        Grads { slots }
    }

    /// Gradients of watched slots, summed when a slot was watched repeatedly.
    /// Consumes the gradient buffers.
    pub fn watched_grads(&self, grads: &mut Grads<T>) -> Vec<(usize, ArrayD<T>)> {
        let mut out: Vec<(usize, ArrayD<T>)> = Vec::new();
        for &(slot, node) in self.watched.borrow().iter() {
            if let Some(g) = grads.slots[node].take() {
                if let Some(entry) = out.iter_mut().find(|(s, _)| *s == slot) {
                    entry.1 += &g;
                } else {
                    out.push((slot, g));
                }
            }
        }
        out
    }
}

impl<'t, T: Scalar> Tensor<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "scalar() on tensor of {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.value().iter().all(|v| v.is_finite())
    }

    /// Cut the graph: same value, no history.
    pub fn detach(&self) -> Tensor<'t, T> {
        self.tape.leaf(self.value().as_ref().clone())
    }

    fn unary(
        &self,
        value: ArrayD<T>,
        back: impl Fn(ArrayD<T>, &mut [Option<ArrayD<T>>]) + 'static,
    ) -> Tensor<'t, T> {
        if self.tape.needs_grad(self.id) {
            self.tape.push(value, Some(Box::new(back)))
        } else {
            self.tape.push_with(value, None, false)
        }
    }

    fn binary(
        &self,
        other: Tensor<'t, T>,
        value: ArrayD<T>,
        back: impl Fn(ArrayD<T>, &mut [Option<ArrayD<T>>]) + 'static,
    ) -> Tensor<'t, T> {
        if self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id) {
            self.tape.push(value, Some(Box::new(back)))
        } else {
            self.tape.push_with(value, None, false)
        }
    }

    pub fn add(&self, rhs: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (na, nb) = (self.tape.needs_grad(ia), self.tape.needs_grad(ib));
        self.binary(rhs, a.as_ref() + b.as_ref(), move |g, slots| {
            if na && nb {
                accumulate(slots, ia, g.clone());
                accumulate(slots, ib, g);
            } else if na {
                accumulate(slots, ia, g);
            } else {
                accumulate(slots, ib, g);
            }
        })
    }

    pub fn sub(&self, rhs: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (na, nb) = (self.tape.needs_grad(ia), self.tape.needs_grad(ib));
        self.binary(rhs, a.as_ref() - b.as_ref(), move |g, slots| {
            if na {
                if nb {
                    accumulate(slots, ib, -g.clone());
                }
                accumulate(slots, ia, g);
            } else {
                accumulate(slots, ib, -g);
            }
        })
    }

    pub fn mul(&self, rhs: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (na, nb) = (self.tape.needs_grad(ia), self.tape.needs_grad(ib));
        self.binary(rhs, a.as_ref() * b.as_ref(), move |g, slots| {
            if na {
                if nb {
                    accumulate(slots, ib, &g * a.as_ref());
                }
                accumulate(slots, ia, g * b.as_ref());
            } else {
                accumulate(slots, ib, g * a.as_ref());
            }
        })
    }

    pub fn div(&self, rhs: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (na, nb) = (self.tape.needs_grad(ia), self.tape.needs_grad(ib));
        self.binary(rhs, a.as_ref() / b.as_ref(), move |g, slots| {
            if nb {
                let gb = -(&g * a.as_ref()) / (b.as_ref() * b.as_ref());
                accumulate(slots, ib, gb);
            }
            if na {
                accumulate(slots, ia, g / b.as_ref());
            }
        })
    }

    pub fn neg(&self) -> Tensor<'t, T> {
        let ia = self.id;
        self.unary(-self.value().as_ref().clone(), move |g, slots| {
            accumulate(slots, ia, -g);
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<'t, T> {
        let ia = self.id;
        self.unary(self.value().as_ref() + c, move |g, slots| {
            accumulate(slots, ia, g);
        })
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<'t, T> {
        let ia = self.id;
        self.unary(self.value().as_ref() * c, move |g, slots| {
            accumulate(slots, ia, g * c);
        })
    }

    /// Multiply by a one-element tensor (e.g. a learnable scalar coefficient).
    pub fn scale_by(&self, s: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "scale_by expects a one-element tensor");
        let c = *sv.iter().next().unwrap();
        let (ia, is) = (self.id, s.id);
        let (na, ns) = (self.tape.needs_grad(ia), self.tape.needs_grad(is));
        self.binary(s, self.value().as_ref() * c, move |g, slots| {
            if ns {
                let gs = (&g * a.as_ref()).sum();
                accumulate(slots, is, ArrayD::from_elem(ndarray::IxDyn(&[1]), gs));
            }
            if na {
                accumulate(slots, ia, g * c);
            }
        })
    }

    pub fn exp(&self) -> Tensor<'t, T> {
        let out = self.value().mapv(|v| v.exp());
        let out_rc = Arc::new(out.clone());
        let ia = self.id;
        self.unary(out, move |g, slots| {
            accumulate(slots, ia, g * out_rc.as_ref());
        })
    }

    pub fn tanh(&self) -> Tensor<'t, T> {
        let out = self.value().mapv(|v| v.tanh());
        let out_rc = Arc::new(out.clone());
        let ia = self.id;
        self.unary(out, move |g, slots| {
            let d = out_rc.mapv(|y| T::one() - y * y);
            accumulate(slots, ia, g * &d);
        })
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor<'t, T> {
        let c0 = T::from_f(0.7978845608028654); // sqrt(2/pi)
        let c1 = T::from_f(0.044715);
        let half = T::from_f(0.5);
        let x = self.value();
        let out = x.mapv(|v| {
            let u = c0 * (v + c1 * v * v * v);
            half * v * (T::one() + u.tanh())
        });
        let ia = self.id;
        self.unary(out, move |g, slots| {
            let d = x.mapv(|v| {
                let u = c0 * (v + c1 * v * v * v);
                let t = u.tanh();
                let du = c0 * (T::one() + T::from_f(3.0) * c1 * v * v);
                half * (T::one() + t) + half * v * (T::one() - t * t) * du
            });
            accumulate(slots, ia, g * &d);
        })
    }

    /// |x| with sign(0) = 0 subgradient.
    pub fn abs(&self) -> Tensor<'t, T> {
        let x = self.value();
        let out = x.mapv(|v| v.abs());
        let ia = self.id;
        self.unary(out, move |g, slots| {
            let d = x.mapv(|v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            accumulate(slots, ia, g * &d);
        })
    }

    pub fn sqrt(&self) -> Tensor<'t, T> {
        let out = self.value().mapv(|v| v.sqrt());
        let out_rc = Arc::new(out.clone());
        let ia = self.id;
        let two = T::from_f(2.0);
        self.unary(out, move |g, slots| {
            let d = out_rc.mapv(|y| (two * y).recip());
            accumulate(slots, ia, g * &d);
        })
    }

    pub fn square(&self) -> Tensor<'t, T> {
        self.mul(*self)
    }

    /// Hard clamp to [0, 1]; gradient passes only where the input is in range.
    pub fn clamp01(&self) -> Tensor<'t, T> {
        let x = self.value();
        let out = x.mapv(|v| v.max(T::zero()).min(T::one()));
        let ia = self.id;
        self.unary(out, move |g, slots| {
            let d = x.mapv(|v| {
                if v >= T::zero() && v <= T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            });
            accumulate(slots, ia, g * &d);
        })
    }

    /// Round to nearest with a straight-through gradient.
    pub fn round_ste(&self) -> Tensor<'t, T> {
        let out = self.value().mapv(|v| v.round());
        let ia = self.id;
        self.unary(out, move |g, slots| {
            accumulate(slots, ia, g);
        })
    }

    pub fn sum_all(&self) -> Tensor<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        let ia = self.id;
        self.unary(
            ArrayD::from_elem(ndarray::IxDyn(&[1]), s),
            move |g, slots| {
                let g0 = *g.iter().next().unwrap();
                accumulate(slots, ia, ArrayD::from_elem(shape.as_slice(), g0));
            },
        )
    }

    pub fn mean_all(&self) -> Tensor<'t, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum_all().mul_scalar(n.recip())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<'t, T> {
        let x = self.value();
        let old_shape = x.shape().to_vec();
        let new: ArrayD<T> = reshape_owned(x.as_ref().clone(), shape);
        let ia = self.id;
        self.unary(new, move |g, slots| {
            accumulate(slots, ia, reshape_owned(g, &old_shape));
        })
    }
}

/// Reshape an owned array, copying only when the layout forces it.
pub(crate) fn reshape_owned<T: Scalar>(a: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.into_shape_with_order(shape).expect("reshape: element count")
    } else {
        a.as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape)
            .expect("reshape: element count")
    }
}

impl<'t, T: Scalar> std::ops::Add for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Tensor::add(&self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Tensor::sub(&self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Tensor::mul(&self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Neg for Tensor<'t, T> {
    type Output = Tensor<'t, T>;
    fn neg(self) -> Self::Output {
        Tensor::neg(&self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn leaf1<'t>(tape: &'t Tape<f64>, v: &[f64]) -> Tensor<'t, f64> {
        tape.leaf_grad(arr1(v).into_dyn())
    }

    #[test]
    fn add_mul_backward() {
        let tape = Tape::<f64>::new();
        let a = leaf1(&tape, &[1.0, 2.0]);
        let b = leaf1(&tape, &[3.0, 4.0]);
        let y = (a + b).mul(a).sum_all(); // sum(a*(a+b)) => d/da = 2a+b, d/db = a
        let g = tape.backward(y);
        assert_eq!(g.of(a).unwrap().as_slice().unwrap(), &[5.0, 8.0]);
        assert_eq!(g.of(b).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let tape = Tape::<f64>::new();
        let a = leaf1(&tape, &[2.0]);
        let y = (a * a * a).sum_all(); // d/da = 3a^2
        let g = tape.backward(y);
        assert!((g.of(a).unwrap()[[0]] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let a = leaf1(&tape, &[3.0]);
        let d = a.detach();
        let y = (a * d).sum_all();
        let g = tape.backward(y);
        assert_eq!(g.of(a).unwrap()[[0]], 3.0); // only the live path counts
    }

    #[test]
    fn scale_by_grad() {
        let tape = Tape::<f64>::new();
        let a = leaf1(&tape, &[1.0, 2.0]);
        let s = leaf1(&tape, &[0.5]);
        let y = a.scale_by(s).sum_all();
        let g = tape.backward(y);
        assert_eq!(g.of(s).unwrap()[[0]], 3.0);
        assert_eq!(g.of(a).unwrap().as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn elementwise_fd_check() {
        // Central finite differences on a composite elementwise expression.
        let xs = [0.3, -0.7, 1.4];
        let f = |v: &[f64]| -> f64 {
            let tape = Tape::<f64>::new();
            let x = tape.leaf_grad(arr1(v).into_dyn());
            let y = x.gelu().tanh().mul(x.exp()).abs().mean_all();
            y.scalar()
        };
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(arr1(&xs).into_dyn());
        let y = x.gelu().tanh().mul(x.exp()).abs().mean_all();
        let g = tape.backward(y);
        let ga = g.of(x).unwrap();
        let h = 1e-6;
        for i in 0..xs.len() {
            let mut up = xs.to_vec();
            let mut dn = xs.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (ga[[i]] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "coord {i}: analytic {} vs fd {}",
                ga[[i]],
                fd
            );
        }
    }

    #[test]
    fn watch_collects_param_grads() {
        let tape = Tape::<f64>::new();
        let w = arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        let p1 = tape.watch(7, w.clone());
        let p2 = tape.watch(7, w); // same slot watched twice
        let y = (p1 + p2).sum_all();
        let mut g = tape.backward(y);
        let wg = tape.watched_grads(&mut g);
        assert_eq!(wg.len(), 1);
        assert_eq!(wg[0].0, 7);
        assert_eq!(wg[0].1.sum(), 8.0);
    }
}
