//! Invertible code-image transition: a conditioning-driven coupling network
//! that rewrites the code image against the host before embedding, and
//! inverts exactly against whatever conditioning image is supplied at decode
//! (the distorted stego, since the host is unavailable there).
//!
//! Each block applies, with the conditioning image `h` as the untouched
//! branch:
//!
//! ```text
//! forward:  y = (x + add(h)) * exp(s(h)) + shift(h)
//! inverse:  x = (y - shift(h)) * exp(-s(h)) - add(h)
//! ```
//!
//! where `s = 2 tanh(scale(h))`, keeping `exp(s)` inside `[e^-2, e^2]`. All
//! three sub-networks end in zero-initialized layers, so a fresh network is
//! the identity on the code branch. Because the conditioning branch is
//! consumed as an input only, forward-then-inverse with the same conditioning
//! reconstructs the code branch exactly; with different conditioning it
//! deliberately does not.

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::qr::{self, ModuleMatrix};
use rand_chacha::ChaCha8Rng;

/// Scale outputs are passed through `SCALE_MAX * tanh(.)`.
pub const SCALE_MAX: f64 = 2.0;

/// Three-layer convolutional stack, final layer zero-initialized.
struct ConvStack {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl ConvStack {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvStack {
            c1: Conv2d::new(store, &format!("{prefix}.c1"), 3, width, 3, 1, 1, false, rng),
            c2: Conv2d::new(store, &format!("{prefix}.c2"), width, width, 3, 1, 1, false, rng),
            c3: Conv2d::new(store, &format!("{prefix}.c3"), width, 3, 3, 1, 1, true, rng),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let h = self.c1.forward(tape, store, x).gelu();
        let h = self.c2.forward(tape, store, h).gelu();
        self.c3.forward(tape, store, h)
    }
}

struct TransitionBlock {
    add: ConvStack,
    scale: ConvStack,
    shift: ConvStack,
}

pub struct TransitionNet {
    blocks: Vec<TransitionBlock>,
}

impl TransitionNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        num_blocks: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..num_blocks)
            .map(|i| TransitionBlock {
                add: ConvStack::new(store, &format!("{prefix}.block{i}.add"), width, rng),
                scale: ConvStack::new(store, &format!("{prefix}.block{i}.scale"), width, rng),
                shift: ConvStack::new(store, &format!("{prefix}.block{i}.shift"), width, rng),
            })
            .collect();
        TransitionNet { blocks }
    }

    fn check_shapes<T: Scalar>(a: &Tensor<'_, T>, b: &Tensor<'_, T>) -> Result<()> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb || sa.len() != 3 || sa[0] != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("two equal (3, H, W) images, got {sa:?}"),
                got: format!("{sb:?}"),
            });
        }
        Ok(())
    }

    /// Transform the code image conditioned on the host image.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        code: Tensor<'t, T>,
        conditioning: Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        Self::check_shapes(&code, &conditioning)?;
        let mut x = code;
        for block in &self.blocks {
            let s = block
                .scale
                .forward(tape, store, conditioning)
                .tanh()
                .mul_scalar(T::from_f(SCALE_MAX));
            x = x
                .add(block.add.forward(tape, store, conditioning))
                .mul(s.exp())
                .add(block.shift.forward(tape, store, conditioning));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteValue("transition forward"));
        }
        Ok(x)
    }

    /// Exact algebraic inverse of [`TransitionNet::forward`] for identical
    /// conditioning input.
    pub fn inverse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        code_star: Tensor<'t, T>,
        conditioning: Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        Self::check_shapes(&code_star, &conditioning)?;
        let mut x = code_star;
        for block in self.blocks.iter().rev() {
            let s = block
                .scale
                .forward(tape, store, conditioning)
                .tanh()
                .mul_scalar(T::from_f(SCALE_MAX));
            x = x
                .sub(block.shift.forward(tape, store, conditioning))
                .mul(s.neg().exp())
                .sub(block.add.forward(tape, store, conditioning));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteValue("transition inverse"));
        }
        Ok(x)
    }
}

/// Scan-constraint loss on the transformed code image: L1 between the module
/// samples of the transformed and reference code, masked to the modules that
/// currently read wrong (mean reduction over all n^2 entries).
///
/// The mask is recomputed from the current transformed image and treated as a
/// constant: gradient flows only through the masked sample differences.
pub fn transition_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    code_star: Tensor<'t, T>,
    reference: &ModuleMatrix,
    kernel_size: usize,
    threshold: f64,
) -> Tensor<'t, T> {
    let n = reference.side();
    let native = n * kernel_size;
    let shape = code_star.shape();
    let star_native = if shape[1] == native && shape[2] == native {
        code_star
    } else {
        code_star.resize_nearest(native, native)
    };
    let samples = qr::scan_tensor(star_native, kernel_size);

    // Reference samples of an exact render are the module values themselves.
    let reference_vals = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[n, n]), |ix| {
        T::from_f(reference.grid()[[ix[0], ix[1]]] as f64)
    });

    // Error mask from the current (detached) samples.
    let current = samples.value();
    let mask = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[n, n]), |ix| {
        let read_white = current[[ix[0], ix[1]]].to_f() > threshold;
        let truth_white = reference.grid()[[ix[0], ix[1]]] == 1;
        if read_white != truth_white {
            T::one()
        } else {
            T::zero()
        }
    });

    let reference_t = tape.leaf(reference_vals);
    let mask_t = tape.leaf(mask);
    samples.sub(reference_t).abs().mul(mask_t).mean_all()
}
