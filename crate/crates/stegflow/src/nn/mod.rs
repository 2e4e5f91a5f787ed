//! Neural-network building blocks over the autodiff tape: a named parameter
//! store, linear/attention/convolution layers and the AdamW optimizer.

mod layers;
mod optim;

pub use layers::{Conv2d, CrossAttnSubNet, LayerNorm, Linear, Mlp, MultiHeadAttention,
    PatchEmbed, SelfAttnSubNet, TransformerBlock};
pub use optim::AdamW;

use crate::autodiff::{Scalar, Tape, Tensor};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Handle to a named parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry<T: Scalar> {
    name: String,
    value: Arc<ArrayD<T>>,
}

/// Ordered, name-addressable collection of trainable arrays. Insertion order
/// is the canonical order for checkpoints and optimizer state.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Mutate a parameter in place (copy-on-write only if a forward pass
    /// still holds the array, which callers should avoid).
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<T>)) {
        f(Arc::make_mut(&mut self.entries[id.0].value));
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set: shape mismatch for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    /// Put the parameter on a tape as a watched leaf (zero-copy).
    pub fn watch<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Tensor<'t, T> {
        tape.watch_arc(id.0, Arc::clone(&self.entries[id.0].value))
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        T::from_f(crate::linalg::normal(rng) * std)
    })
}

/// Fan-average scaled init for linear maps.
pub fn xavier_init<T: Scalar>(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    normal_init(&[n_in, n_out], (2.0 / (n_in + n_out) as f64).sqrt(), rng)
}
