//! Full embed/extract model: transition network + attention coupling flow +
//! the fixed perceptual feature stack, built from one training configuration
//! and one parameter store.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, TokenizerConfig};
use crate::img::{self, Image};
use crate::nn::ParamStore;
use crate::objectives::FeatureStack;
use crate::qr::{self, ModuleMatrix};
use crate::trainer::TrainConfig;
use crate::transition::TransitionNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Model {
    pub store: ParamStore<f32>,
    pub transition: TransitionNet,
    pub flow: FlowModel,
    pub perceptual: FeatureStack<f32>,
    pub cfg: TrainConfig,
}

impl Model {
    pub fn build(cfg: &TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
        let mut store = ParamStore::new();
        let transition = TransitionNet::new(
            &mut store,
            "transition",
            cfg.transition_blocks,
            cfg.transition_width,
            &mut rng,
        );
        let flow = FlowModel::new(&mut store, "flow", cfg.flow_config(), &mut rng);
        Ok(Model {
            store,
            transition,
            flow,
            perceptual: FeatureStack::fixed_random(),
            cfg: cfg.clone(),
        })
    }

    /// Pixels per module when rendering a code for the flow input.
    pub fn code_render_px(&self) -> usize {
        self.cfg.image_side / qr::module_count(self.cfg.qr_version).expect("validated version")
    }

    /// Render a module matrix at the flow's input size.
    pub fn render_code(&self, mm: &ModuleMatrix) -> Result<Image<f32>> {
        qr::render(mm, self.code_render_px(), self.cfg.image_side)
    }

    /// Embed (inference): host + code matrix -> clamped stego image.
    pub fn embed(&self, host: &Image<f32>, mm: &ModuleMatrix) -> Result<Image<f32>> {
        let tape = Tape::<f32>::new();
        let host_t = tape.leaf(host.clone().into_dyn());
        let code_t = tape.leaf(self.render_code(mm)?.into_dyn());
        let code_star = if self.cfg.transition_enabled {
            self.transition.forward(&tape, &self.store, code_t, host_t)?
        } else {
            code_t
        };
        let (stego, _residual) = self.flow.conceal(&tape, &self.store, host_t, code_star)?;
        let clamped = stego.clamp01();
        Ok(tensor_to_image(clamped))
    }

    /// Extract (inference): distorted stego -> restored code-domain image at
    /// the flow input size.
    pub fn extract(&self, stego: &Image<f32>, reveal_seed: u64) -> Result<Image<f32>> {
        let tape = Tape::<f32>::new();
        let stego_t = tape.leaf(stego.clone().into_dyn());
        let revealed = self.flow.reveal(&tape, &self.store, stego_t, reveal_seed)?;
        let restored = if self.cfg.transition_enabled {
            self.transition
                .inverse(&tape, &self.store, revealed, stego_t)?
        } else {
            revealed
        };
        Ok(tensor_to_image(restored))
    }

    /// Resample a restored code image to native module resolution and try to
    /// read the message.
    pub fn decode_code_image(&self, code_img: &Image<f32>) -> Result<Option<Vec<u8>>> {
        let n = qr::module_count(self.cfg.qr_version)?;
        let native = img::resize_nearest(code_img, n * qr::MODULE_PX, n * qr::MODULE_PX);
        Ok(qr::identify(&native, self.cfg.qr_version, qr::MODULE_PX))
    }

    /// Binarized module grid of a restored code image (for error-rate
    /// reporting even when decoding fails).
    pub fn scan_code_image(&self, code_img: &Image<f32>) -> Result<ndarray::Array2<u8>> {
        let n = qr::module_count(self.cfg.qr_version)?;
        let native = img::resize_nearest(code_img, n * qr::MODULE_PX, n * qr::MODULE_PX);
        let sm = qr::scan_simulate(&native, qr::MODULE_PX)?;
        let lo = sm.samples.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = sm.samples.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        Ok(qr::binarize(&sm, ((lo + hi) / 2.0) as f32))
    }
}

pub(crate) fn tensor_to_image(t: Tensor<'_, f32>) -> Image<f32> {
    t.value()
        .as_ref()
        .clone()
        .into_dimensionality()
        .expect("image-shaped tensor")
}

/// Splitmix-style seed derivation; deterministic and collision-resistant
/// enough for stream separation.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

impl TrainConfig {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            tokenizer: TokenizerConfig {
                side: self.image_side,
                patch: self.patch_size,
                depth: self.tokenizer_depth,
                dim: self.token_dim,
                mlp_dim: self.mlp_dim,
                heads: self.heads,
            },
            coupling_blocks: self.coupling_blocks,
            detok_conv_width: self.detok_conv_width,
            fusion_enabled: self.fusion_enabled,
            cross_attention_enabled: self.cross_attention_enabled,
            shared_conditioning_tokenizer: self.shared_conditioning_tokenizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = qr::module_count(self.qr_version)?;
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.image_side < n {
            return Err(Error::Config(format!(
                "image_side {} smaller than the {n}-module code",
                self.image_side
            )));
        }
        if self.lr_floor > self.lr_initial {
            return Err(Error::Config("lr_floor above lr_initial".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.distortion.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn desk_model_builds_and_embeds_identity_init() {
        let cfg = TrainConfig::desk();
        let model = Model::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let host = Image::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.2..0.8f32));
        let mm = qr::encode_message(b"model smoke", 5).unwrap();
        let stego = model.embed(&host, &mm).unwrap();
        assert_eq!(stego.dim(), (3, 64, 64));
        let restored = model.extract(&stego, 3).unwrap();
        assert_eq!(restored.dim(), (3, 64, 64));
    }

    #[test]
    fn seed_derivation_separates_streams() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[1, 3]);
        let c = derive_seed(7, &[1, 2]);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = TrainConfig::desk();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.qr_version = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.image_side = 32; // smaller than a 37-module code
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
