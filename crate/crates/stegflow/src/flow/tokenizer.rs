//! Image <-> token transforms: a small ViT-style tokenizer (patch embedding,
//! pre-norm transformer blocks, final normalization) and a detokenizer (a
//! linear projection back to patch pixels, reshaping, then two convolutions
//! with a GELU between them).

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamStore, PatchEmbed, TransformerBlock};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct TokenizerConfig {
    pub side: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
}

impl TokenizerConfig {
    pub fn token_count(&self) -> usize {
        (self.side / self.patch) * (self.side / self.patch)
    }
}

pub struct Tokenizer {
    embed: PatchEmbed,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Tokenizer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TokenizerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Tokenizer {
            embed: PatchEmbed::new(store, &format!("{prefix}.embed"), cfg.side, cfg.patch, cfg.dim, rng),
            blocks: (0..cfg.depth)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        &format!("{prefix}.block{i}"),
                        cfg.dim,
                        cfg.mlp_dim,
                        cfg.heads,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        image: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let mut tokens = self.embed.forward(tape, store, image);
        for block in &self.blocks {
            tokens = block.forward(tape, store, tokens);
        }
        self.norm.forward(tape, store, tokens)
    }
}

pub struct Detokenizer {
    proj: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    side: usize,
    patch: usize,
}

impl Detokenizer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TokenizerConfig,
        conv_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Detokenizer {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                cfg.dim,
                3 * cfg.patch * cfg.patch,
                false,
                rng,
            ),
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), 3, conv_width, 3, 1, 1, false, rng),
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), conv_width, 3, 3, 1, 1, false, rng),
            side: cfg.side,
            patch: cfg.patch,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        tokens: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        let pixels = self
            .proj
            .forward(tape, store, tokens)
            .unpatchify(3, self.side, self.side, self.patch);
        let h = self.conv1.forward(tape, store, pixels).gelu();
        self.conv2.forward(tape, store, h)
    }
}
