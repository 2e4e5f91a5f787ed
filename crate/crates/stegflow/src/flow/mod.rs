//! The steganography network: tokenizers on both streams and a stack of
//! attention coupling blocks that conceal code tokens into host tokens and
//! reveal them back by running the same blocks in reverse.
//!
//! Per block, with frozen conditioning tokens `c` (host tokens at encode,
//! distorted-stego tokens at decode):
//!
//! ```text
//! forward:  h' = h + f(q) + alpha * cross(q, c)
//!           q' = shift(h') + q * exp(2 tanh(scale(h')))
//! inverse:  q  = (q' - shift(h')) * exp(-2 tanh(scale(h')))
//!           h  = h' - f(q) - alpha * cross(q, c)
//! ```
//!
//! Every sub-network ends in a zero-initialized layer, so the whole stack is
//! the identity until training moves it.

mod tokenizer;

pub use tokenizer::{Detokenizer, Tokenizer, TokenizerConfig};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fusion::FusionMatrix;
use crate::linalg;
use crate::nn::{CrossAttnSubNet, ParamId, ParamStore, SelfAttnSubNet};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Initial value of the per-block cross-attention coefficient.
pub const ALPHA_INIT: f64 = 0.01;
/// Scale sub-network outputs pass through `SCALE_MAX * tanh(.)`.
pub const SCALE_MAX: f64 = 2.0;

/// Paired token streams at one coupling depth, with the frozen conditioning.
#[derive(Clone, Copy)]
pub struct FlowState<'t, T: Scalar> {
    pub host: Tensor<'t, T>,
    pub code: Tensor<'t, T>,
    pub conditioning: Tensor<'t, T>,
    pub depth: usize,
}

pub struct CouplingBlock {
    host_update: SelfAttnSubNet,
    shift: SelfAttnSubNet,
    scale: SelfAttnSubNet,
    cross: CrossAttnSubNet,
    alpha: ParamId,
}

impl CouplingBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CouplingBlock {
            host_update: SelfAttnSubNet::new(store, &format!("{prefix}.host_update"), dim, mlp_dim, heads, rng),
            shift: SelfAttnSubNet::new(store, &format!("{prefix}.shift"), dim, mlp_dim, heads, rng),
            scale: SelfAttnSubNet::new(store, &format!("{prefix}.scale"), dim, mlp_dim, heads, rng),
            cross: CrossAttnSubNet::new(store, &format!("{prefix}.cross"), dim, mlp_dim, heads, rng),
            alpha: store.add(
                format!("{prefix}.alpha"),
                ArrayD::from_elem(ndarray::IxDyn(&[1]), T::from_f(ALPHA_INIT)),
            ),
        }
    }

    pub fn alpha_param(&self) -> ParamId {
        self.alpha
    }

    fn scale_term<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        host: Tensor<'t, T>,
    ) -> Tensor<'t, T> {
        self.scale
            .forward(tape, store, host)
            .tanh()
            .mul_scalar(T::from_f(SCALE_MAX))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        state: FlowState<'t, T>,
        cross_enabled: bool,
    ) -> Result<FlowState<'t, T>> {
        let mut host_new = state.host.add(self.host_update.forward(tape, store, state.code));
        if cross_enabled {
            let alpha = store.watch(tape, self.alpha);
            let attend = self
                .cross
                .forward(tape, store, state.code, state.conditioning);
            host_new = host_new.add(attend.scale_by(alpha));
        }
        let code_new = self
            .shift
            .forward(tape, store, host_new)
            .add(state.code.mul(self.scale_term(tape, store, host_new).exp()));
        if !host_new.is_finite() || !code_new.is_finite() {
            return Err(Error::NonFiniteValue("coupling forward"));
        }
        Ok(FlowState {
            host: host_new,
            code: code_new,
            conditioning: state.conditioning,
            depth: state.depth + 1,
        })
    }

    pub fn inverse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        state: FlowState<'t, T>,
        cross_enabled: bool,
    ) -> Result<FlowState<'t, T>> {
        let code_prev = state
            .code
            .sub(self.shift.forward(tape, store, state.host))
            .mul(self.scale_term(tape, store, state.host).neg().exp());
        let mut host_prev = state.host.sub(self.host_update.forward(tape, store, code_prev));
        if cross_enabled {
            let alpha = store.watch(tape, self.alpha);
            let attend = self
                .cross
                .forward(tape, store, code_prev, state.conditioning);
            host_prev = host_prev.sub(attend.scale_by(alpha));
        }
        if !host_prev.is_finite() || !code_prev.is_finite() {
            return Err(Error::NonFiniteValue("coupling inverse"));
        }
        Ok(FlowState {
            host: host_prev,
            code: code_prev,
            conditioning: state.conditioning,
            depth: state.depth.saturating_sub(1),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    pub tokenizer: TokenizerConfig,
    pub coupling_blocks: usize,
    pub detok_conv_width: usize,
    pub fusion_enabled: bool,
    pub cross_attention_enabled: bool,
    pub shared_conditioning_tokenizer: bool,
}

pub struct FlowModel {
    pub host_tokenizer: Tokenizer,
    pub code_tokenizer: Tokenizer,
    pub decode_tokenizer: Tokenizer,
    cond_tokenizer: Option<Tokenizer>,
    pub stego_detokenizer: Detokenizer,
    pub code_detokenizer: Detokenizer,
    pub blocks: Vec<CouplingBlock>,
    pub fusion: FusionMatrix,
    cfg: FlowConfig,
}

impl FlowModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: FlowConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let tc = &cfg.tokenizer;
        let blocks = (0..cfg.coupling_blocks)
            .map(|i| {
                CouplingBlock::new(
                    store,
                    &format!("{prefix}.coupling{i}"),
                    tc.dim,
                    tc.mlp_dim,
                    tc.heads,
                    rng,
                )
            })
            .collect();
        FlowModel {
            host_tokenizer: Tokenizer::new(store, &format!("{prefix}.host_tok"), tc, rng),
            code_tokenizer: Tokenizer::new(store, &format!("{prefix}.code_tok"), tc, rng),
            decode_tokenizer: Tokenizer::new(store, &format!("{prefix}.decode_tok"), tc, rng),
            cond_tokenizer: if cfg.shared_conditioning_tokenizer {
                None
            } else {
                Some(Tokenizer::new(store, &format!("{prefix}.cond_tok"), tc, rng))
            },
            stego_detokenizer: Detokenizer::new(
                store,
                &format!("{prefix}.stego_detok"),
                tc,
                cfg.detok_conv_width,
                rng,
            ),
            code_detokenizer: Detokenizer::new(
                store,
                &format!("{prefix}.code_detok"),
                tc,
                cfg.detok_conv_width,
                rng,
            ),
            blocks,
            fusion: FusionMatrix::new(store, &format!("{prefix}.itf"), tc.token_count(), rng),
            cfg,
        }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    fn check_image<T: Scalar>(&self, t: &Tensor<'_, T>) -> Result<()> {
        let side = self.cfg.tokenizer.side;
        let shape = t.shape();
        if shape != [3, side, side] {
            return Err(Error::ShapeMismatch {
                expected: format!("(3, {side}, {side})"),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Run the coupling stack forward from prepared token streams.
    pub fn run_forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        mut state: FlowState<'t, T>,
    ) -> Result<FlowState<'t, T>> {
        for block in &self.blocks {
            state = block.forward(tape, store, state, self.cfg.cross_attention_enabled)?;
        }
        Ok(state)
    }

    /// Run the coupling stack inverse from final-depth token streams.
    pub fn run_inverse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        mut state: FlowState<'t, T>,
    ) -> Result<FlowState<'t, T>> {
        for block in self.blocks.iter().rev() {
            state = block.inverse(tape, store, state, self.cfg.cross_attention_enabled)?;
        }
        Ok(state)
    }

    /// Embed a (transformed) code image into a host image. Returns the stego
    /// image and the final-depth code tokens (the residual stream, modeled as
    /// Gaussian and discarded by the caller).
    pub fn conceal<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        host: Tensor<'t, T>,
        code: Tensor<'t, T>,
    ) -> Result<(Tensor<'t, T>, Tensor<'t, T>)> {
        self.check_image(&host)?;
        self.check_image(&code)?;
        let host_tokens = self.host_tokenizer.forward(tape, store, host);
        let mut code_tokens = self.code_tokenizer.forward(tape, store, code);
        if self.cfg.fusion_enabled {
            code_tokens = self.fusion.fuse(tape, store, code_tokens)?;
        }
        let state = FlowState {
            host: host_tokens,
            code: code_tokens,
            conditioning: host_tokens,
            depth: 0,
        };
        let out = self.run_forward(tape, store, state)?;
        let stego = self.stego_detokenizer.forward(tape, store, out.host);
        if !stego.is_finite() {
            return Err(Error::NonFiniteValue("conceal"));
        }
        Ok((stego, out.code))
    }

    /// Recover the code-domain image from a (possibly distorted) stego image.
    /// The final-depth code tokens are unknown at decode and are drawn from a
    /// standard Gaussian with the given seed.
    pub fn reveal<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        stego: Tensor<'t, T>,
        rng_seed: u64,
    ) -> Result<Tensor<'t, T>> {
        self.check_image(&stego)?;
        let host_tokens = self.decode_tokenizer.forward(tape, store, stego);
        let cond_tokens = match &self.cond_tokenizer {
            Some(tok) => tok.forward(tape, store, stego),
            None => self.host_tokenizer.forward(tape, store, stego),
        };
        let tc = &self.cfg.tokenizer;
        let code_tokens = tape.leaf(gaussian_tokens::<T>(tc.token_count(), tc.dim, rng_seed));
        let state = FlowState {
            host: host_tokens,
            code: code_tokens,
            conditioning: cond_tokens,
            depth: self.blocks.len(),
        };
        let out = self.run_inverse(tape, store, state)?;
        let mut tokens = out.code;
        if self.cfg.fusion_enabled {
            tokens = self.fusion.unfuse(tape, store, tokens)?;
        }
        let code = self.code_detokenizer.forward(tape, store, tokens);
        if !code.is_finite() {
            return Err(Error::NonFiniteValue("reveal"));
        }
        Ok(code)
    }
}

/// Standard-normal token grid, fully determined by the seed.
pub fn gaussian_tokens<T: Scalar>(n: usize, dim: usize, seed: u64) -> ArrayD<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(ndarray::IxDyn(&[n, dim]), |_| {
        T::from_f(linalg::normal(&mut rng))
    })
}
