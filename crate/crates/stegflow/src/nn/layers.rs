//! Layers. Each holds parameter handles only; values live in the store and
//! are placed on a tape per forward pass.

use super::{normal_init, xavier_init, ParamId, ParamStore};
use crate::autodiff::{concat_cols, Scalar, Tape, Tensor};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

pub struct Linear {
    w: ParamId, // (in, out)
    b: ParamId, // (out)
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = if zero_init {
            ArrayD::zeros(ndarray::IxDyn(&[n_in, n_out]))
        } else {
            xavier_init(n_in, n_out, rng)
        };
        Linear {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(
                format!("{prefix}.b"),
                ArrayD::zeros(ndarray::IxDyn(&[n_out])),
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let w = store.watch(tape, self.w);
        let b = store.watch(tape, self.b);
        x.matmul(w).add_row(b)
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(
                format!("{prefix}.gamma"),
                ArrayD::from_elem(ndarray::IxDyn(&[dim]), T::one()),
            ),
            beta: store.add(
                format!("{prefix}.beta"),
                ArrayD::zeros(ndarray::IxDyn(&[dim])),
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let gamma = store.watch(tape, self.gamma);
        let beta = store.watch(tape, self.beta);
        x.layernorm_rows(1e-5).mul_row(gamma).add_row(beta)
    }
}

/// Two-layer feed-forward with GELU. `zero_final` zeroes the second linear so
/// the whole block outputs exactly zero at initialization.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        zero_final: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, false, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, zero_final, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let h = self.fc1.forward(tape, store, x).gelu();
        self.fc2.forward(tape, store, h)
    }
}

/// Scaled dot-product attention over projected heads:
/// `Attn(Q, K, V) = softmax(Q K^T / sqrt(d)) V` per head, then an output
/// projection. Queries may come from a different sequence than keys/values.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, false, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, false, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, false, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, false, rng),
            heads,
            dim,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        queries: Tensor<'t, T>,
        keys_values: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let q = self.wq.forward(tape, store, queries);
        let k = self.wk.forward(tape, store, keys_values);
        let v = self.wv.forward(tape, store, keys_values);
        let dh = self.dim / self.heads;
        let scale = T::from_f(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let logits = qh.matmul(kh.transpose2()).mul_scalar(scale);
            outs.push(logits.softmax_rows().matmul(vh));
        }
        let merged = concat_cols(&outs);
        self.wo.forward(tape, store, merged)
    }
}

/// Standard pre-norm transformer block (tokenizer backbone).
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, mlp_dim, false, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let a = self.ln1.forward(tape, store, x);
        let x = x.add(self.attn.forward(tape, store, a, a));
        let m = self.ln2.forward(tape, store, x);
        x.add(self.mlp.forward(tape, store, m))
    }
}

/// Coupling sub-network: self-attention block followed by a feed-forward MLP
/// whose final layer is zero-initialized, so the sub-network output is
/// exactly zero at construction. Normalization stays inside the sub-network;
/// the coupling arithmetic around it is never normalized.
pub struct SelfAttnSubNet {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl SelfAttnSubNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SelfAttnSubNet {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, mlp_dim, true, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let a = self.ln1.forward(tape, store, x);
        let x = x.add(self.attn.forward(tape, store, a, a));
        let m = self.ln2.forward(tape, store, x);
        self.mlp.forward(tape, store, m)
    }
}

/// Cross-attention sub-network with the same zero-at-init contract as
/// [`SelfAttnSubNet`]; queries from one stream, keys/values from another.
pub struct CrossAttnSubNet {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttnSubNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrossAttnSubNet {
            ln_q: LayerNorm::new(store, &format!("{prefix}.ln_q"), dim),
            ln_kv: LayerNorm::new(store, &format!("{prefix}.ln_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, mlp_dim, true, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        queries: Tensor<'t, T>,
        keys_values: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let q = self.ln_q.forward(tape, store, queries);
        let kv = self.ln_kv.forward(tape, store, keys_values);
        let x = queries.add(self.attn.forward(tape, store, q, kv));
        let m = self.ln2.forward(tape, store, x);
        self.mlp.forward(tape, store, m)
    }
}

pub struct Conv2d {
    w: ParamId, // (out, in, k, k)
    b: ParamId, // (out)
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = if zero_init {
            ArrayD::zeros(ndarray::IxDyn(&[c_out, c_in, k, k]))
        } else {
            normal_init(
                &[c_out, c_in, k, k],
                (2.0 / (c_in * k * k) as f64).sqrt(),
                rng,
            )
        };
        Conv2d {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(
                format!("{prefix}.b"),
                ArrayD::zeros(ndarray::IxDyn(&[c_out])),
            ),
            stride,
            pad,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let w = store.watch(tape, self.w);
        let b = store.watch(tape, self.b);
        x.conv2d(w, self.stride, self.pad).bias_chw(b)
    }
}

/// Patch embedding with a learned positional table: `(3, S, S)` to `(N, D)`
/// where `N = (S / patch)^2`.
pub struct PatchEmbed {
    proj: Linear,
    pos: ParamId, // (N, D)
    patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        side: usize,
        patch: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(side % patch == 0, "image side must divide by patch size");
        let n = (side / patch) * (side / patch);
        PatchEmbed {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                3 * patch * patch,
                dim,
                false,
                rng,
            ),
            pos: store.add(format!("{prefix}.pos"), normal_init(&[n, dim], 0.02, rng)),
            patch,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        image: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let tokens = self.proj.forward(tape, store, image.patchify(self.patch));
        tokens.add(store.watch(tape, self.pos))
    }
}
