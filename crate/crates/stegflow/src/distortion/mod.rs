//! Differentiable print-and-photograph corruption: projective warp, color
//! jitter, Gaussian blur, Gaussian noise, JPEG, and a final clamp to [0, 1],
//! applied in that fixed order. Sampling bounds follow the robust-embedding
//! configuration (noise 0.07, JPEG quality 60, warp 0.02); each perturbation
//! is included independently with probability 1/2.

mod jpeg;

pub use jpeg::jpeg_tensor;

use crate::autodiff::{gaussian_kernel_2d, Scalar, Tape, Tensor};
use crate::img::Image;
use crate::linalg;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Sampling bounds for one training/evaluation channel.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistortionConfig {
    pub brightness_max: f64,
    pub hue_max: f64,
    pub saturation_max: f64,
    pub contrast_range: (f64, f64),
    pub jpeg_quality: u8,
    pub noise_sigma: f64,
    pub blur_kernel: usize,
    pub blur_sigma_range: (f64, f64),
    pub warp_frac: f64,
    /// Independent inclusion probability per perturbation.
    pub enable_probability: f64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            brightness_max: 0.3,
            hue_max: 0.1,
            saturation_max: 1.0,
            contrast_range: (0.5, 1.5),
            jpeg_quality: 60,
            noise_sigma: 0.07,
            blur_kernel: 7,
            blur_sigma_range: (0.1, 3.0),
            warp_frac: 0.02,
            enable_probability: 0.5,
        }
    }
}

impl DistortionConfig {
    /// Everything off; `apply` becomes the identity.
    pub fn none() -> Self {
        DistortionConfig {
            enable_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.brightness_max >= 0.0
            && self.hue_max >= 0.0
            && self.saturation_max >= 0.0
            && self.contrast_range.0 <= self.contrast_range.1
            && (1..=100).contains(&self.jpeg_quality)
            && self.noise_sigma >= 0.0
            && self.blur_kernel % 2 == 1
            && self.warp_frac >= 0.0
            && (0.0..=1.0).contains(&self.enable_probability);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid distortion bounds: {self:?}")))
        }
    }
}

/// One fully-resolved draw: the concrete perturbations of a single image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistortionSpec {
    pub warp_corners: Option<[[f64; 2]; 4]>,
    pub brightness_shift: Option<f64>,
    pub hue_shift: Option<[f64; 3]>,
    pub saturation_scale: Option<f64>,
    pub contrast_scale: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub blur_kernel: usize,
    pub noise_sigma: Option<f64>,
    pub noise_seed: u64,
    pub jpeg_quality: Option<u8>,
}

impl DistortionSpec {
    /// Identity spec: `apply` returns the input bit-for-bit.
    pub fn none() -> Self {
        DistortionSpec {
            warp_corners: None,
            brightness_shift: None,
            hue_shift: None,
            saturation_scale: None,
            contrast_scale: None,
            blur_sigma: None,
            blur_kernel: 7,
            noise_sigma: None,
            noise_seed: 0,
            jpeg_quality: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.warp_corners.is_none()
            && self.brightness_shift.is_none()
            && self.hue_shift.is_none()
            && self.saturation_scale.is_none()
            && self.contrast_scale.is_none()
            && self.blur_sigma.is_none()
            && self.noise_sigma.is_none()
            && self.jpeg_quality.is_none()
    }
}

impl fmt::Display for DistortionSpec {
    /// Human-readable key-value block for experiment logs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt<T: fmt::Debug>(v: &Option<T>) -> String {
            match v {
                Some(x) => format!("{x:?}"),
                None => "off".into(),
            }
        }
        writeln!(f, "warp_corners: {}", opt(&self.warp_corners))?;
        writeln!(f, "brightness_shift: {}", opt(&self.brightness_shift))?;
        writeln!(f, "hue_shift: {}", opt(&self.hue_shift))?;
        writeln!(f, "saturation_scale: {}", opt(&self.saturation_scale))?;
        writeln!(f, "contrast_scale: {}", opt(&self.contrast_scale))?;
        writeln!(f, "blur_sigma: {} (kernel {})", opt(&self.blur_sigma), self.blur_kernel)?;
        writeln!(f, "noise_sigma: {} (seed {})", opt(&self.noise_sigma), self.noise_seed)?;
        write!(f, "jpeg_quality: {}", opt(&self.jpeg_quality))
    }
}

/// Draw one spec. Deterministic in `(cfg, seed)`; each perturbation is
/// included with `cfg.enable_probability` and its parameters are uniform
/// within the configured bounds.
pub fn sample_spec(cfg: &DistortionConfig, seed: u64) -> DistortionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.enable_probability;
    let mut on = |rng: &mut ChaCha8Rng| p > 0.0 && rng.gen_bool(p);

    let warp_corners = if on(&mut rng) && cfg.warp_frac > 0.0 {
        let mut corners = [[0.0f64; 2]; 4];
        for c in corners.iter_mut() {
            c[0] = rng.gen_range(-cfg.warp_frac..=cfg.warp_frac);
            c[1] = rng.gen_range(-cfg.warp_frac..=cfg.warp_frac);
        }
        Some(corners)
    } else {
        None
    };
    let brightness_shift = if on(&mut rng) && cfg.brightness_max > 0.0 {
        Some(rng.gen_range(-cfg.brightness_max..=cfg.brightness_max))
    } else {
        None
    };
    let hue_shift = if on(&mut rng) && cfg.hue_max > 0.0 {
        Some([
            rng.gen_range(-cfg.hue_max..=cfg.hue_max),
            rng.gen_range(-cfg.hue_max..=cfg.hue_max),
            rng.gen_range(-cfg.hue_max..=cfg.hue_max),
        ])
    } else {
        None
    };
    let saturation_scale = if on(&mut rng) && cfg.saturation_max > 0.0 {
        Some(rng.gen_range(0.0..=cfg.saturation_max))
    } else {
        None
    };
    let contrast_scale = if on(&mut rng) {
        Some(rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1))
    } else {
        None
    };
    let blur_sigma = if on(&mut rng) {
        Some(rng.gen_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1))
    } else {
        None
    };
    let noise_sigma = if on(&mut rng) && cfg.noise_sigma > 0.0 {
        Some(rng.gen_range(0.0..=cfg.noise_sigma))
    } else {
        None
    };
    let jpeg_quality = if on(&mut rng) {
        Some(cfg.jpeg_quality)
    } else {
        None
    };
    DistortionSpec {
        warp_corners,
        brightness_shift,
        hue_shift,
        saturation_scale,
        contrast_scale,
        blur_sigma,
        blur_kernel: cfg.blur_kernel,
        noise_sigma,
        noise_seed: rng.gen(),
        jpeg_quality,
    }
}

/// Apply a spec to a `(3, H, W)` tensor in [0, 1]. Differentiable end to end
/// (JPEG rounding is straight-through); a fully disabled spec is a no-op.
pub fn apply<'t, T: Scalar>(
    tape: &'t Tape<T>,
    img: Tensor<'t, T>,
    spec: &DistortionSpec,
) -> Tensor<'t, T> {
    if spec.is_identity() {
        return img;
    }
    let shape = img.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut x = img;

    if let Some(corners) = &spec.warp_corners {
        // Each output corner reads from the unit-square corner plus its
        // offset; interior samples follow the induced homography.
        let dst = [
            [corners[0][0], corners[0][1]],
            [1.0 + corners[1][0], corners[1][1]],
            [1.0 + corners[2][0], 1.0 + corners[2][1]],
            [corners[3][0], 1.0 + corners[3][1]],
        ];
        let hm = linalg::homography_from_unit_square(&dst);
        let grid = Array3::from_shape_fn((h, w, 2), |(i, j, k)| {
            let u = j as f64 / (w - 1).max(1) as f64;
            let v = i as f64 / (h - 1).max(1) as f64;
            let (sx, sy) = linalg::apply_homography(&hm, u, v);
            if k == 0 {
                sy * (h - 1) as f64
            } else {
                sx * (w - 1) as f64
            }
        });
        x = x.warp_bilinear(&grid);
    }

    if let Some(b) = spec.brightness_shift {
        x = x.add_scalar(T::from_f(b));
    }
    if let Some(hs) = &spec.hue_shift {
        let shift = ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| T::from_f(hs[ix[0]]));
        x = x.add(tape.leaf(shift));
    }
    if let Some(s) = spec.saturation_scale {
        // Pull toward the luminance plane: s=0 keeps color, s=1 is grayscale.
        let gray = x.luminance();
        let gray3 = crate::autodiff::stack_channels(&[gray, gray, gray]);
        x = x.add(gray3.sub(x).mul_scalar(T::from_f(s)));
    }
    if let Some(c) = spec.contrast_scale {
        // Midpoint-anchored contrast.
        x = x.mul_scalar(T::from_f(c)).add_scalar(T::from_f(0.5 * (1.0 - c)));
    }
    if let Some(sigma) = spec.blur_sigma {
        let kernel = gaussian_kernel_2d::<T>(spec.blur_kernel, sigma.max(1e-3));
        x = x.depthwise_conv_same(&kernel);
    }
    if let Some(sigma) = spec.noise_sigma {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let noise = ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |_| {
            T::from_f(sigma * linalg::normal(&mut rng))
        });
        x = x.add(tape.leaf(noise));
    }
    if let Some(q) = spec.jpeg_quality {
        x = jpeg_tensor(x, q);
    }
    x.clamp01()
}

/// Plain-image convenience wrapper over [`apply`].
pub fn apply_image<T: Scalar>(img: &Image<T>, spec: &DistortionSpec) -> Image<T> {
    let tape = Tape::<T>::new();
    let t = tape.leaf(img.clone().into_dyn());
    let out = apply(&tape, t, spec);
    let v = out.value().as_ref().clone();
    v.into_dimensionality().expect("image rank")
}

/// Mask random black squares until at least `rate` of the area is covered.
/// Square side is a tenth of the image side, so coverage overshoots by less
/// than one square (about 1%).
pub fn apply_tamper<T: Scalar>(img: &Image<T>, rate: f64, seed: u64) -> Image<T> {
    let (_, h, w) = img.dim();
    let mut out = img.clone();
    if rate <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (h / 10).max(1);
    let target = (rate * (h * w) as f64).ceil() as usize;
    let mut covered = vec![false; h * w];
    let mut count = 0usize;
    while count < target {
        let top = rng.gen_range(0..=h - side);
        let left = rng.gen_range(0..=w - side);
        for y in top..top + side {
            for x in left..left + side {
                for c in 0..3 {
                    out[[c, y, x]] = T::zero();
                }
                if !covered[y * w + x] {
                    covered[y * w + x] = true;
                    count += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img;

    fn rand_image(seed: u64, side: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((3, side, side), |_| rng.gen_range(0.2..0.8))
    }

    #[test]
    fn identity_spec_is_bit_identical() {
        let image = rand_image(1, 24);
        let out = apply_image(&image, &DistortionSpec::none());
        assert_eq!(image, out);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_bounds() {
        let cfg = DistortionConfig::default();
        cfg.validate().unwrap();
        let a = sample_spec(&cfg, 42);
        let b = sample_spec(&cfg, 42);
        assert_eq!(a, b);
        for seed in 0..200 {
            let s = sample_spec(&cfg, seed);
            if let Some(v) = s.brightness_shift {
                assert!(v.abs() <= cfg.brightness_max);
            }
            if let Some(v) = s.noise_sigma {
                assert!((0.0..=cfg.noise_sigma).contains(&v));
            }
            if let Some(c) = s.contrast_scale {
                assert!((cfg.contrast_range.0..=cfg.contrast_range.1).contains(&c));
            }
            if let Some(w) = s.warp_corners {
                for corner in w {
                    assert!(corner[0].abs() <= cfg.warp_frac && corner[1].abs() <= cfg.warp_frac);
                }
            }
            if let Some(q) = s.jpeg_quality {
                assert_eq!(q, cfg.jpeg_quality);
            }
        }
    }

    #[test]
    fn all_perturbations_keep_range_and_shape() {
        let cfg = DistortionConfig {
            enable_probability: 1.0,
            ..Default::default()
        };
        let image = rand_image(2, 32);
        for seed in 0..5 {
            let spec = sample_spec(&cfg, seed);
            let out = apply_image(&image, &spec);
            assert_eq!(out.dim(), image.dim());
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn noise_only_spec_matches_requested_sigma() {
        let mut spec = DistortionSpec::none();
        spec.noise_sigma = Some(0.1);
        spec.noise_seed = 7;
        let image: Image<f64> = img::constant(0.5, 224, 224);
        let out = apply_image(&image, &spec);
        let n = (3 * 224 * 224) as f64;
        let mean: f64 = out.iter().zip(image.iter()).map(|(a, b)| a - b).sum::<f64>() / n;
        let var: f64 = out
            .iter()
            .zip(image.iter())
            .map(|(a, b)| (a - b - mean) * (a - b - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((0.095..=0.105).contains(&std), "noise std {std}");
    }

    #[test]
    fn gradient_flows_through_every_stage() {
        let cfg = DistortionConfig {
            enable_probability: 1.0,
            ..Default::default()
        };
        let spec = sample_spec(&cfg, 11);
        assert!(!spec.is_identity());
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(rand_image(3, 16).into_dyn());
        let y = apply(&tape, x, &spec).mean_all();
        let grads = tape.backward(y);
        let g = grads.of(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tamper_covers_requested_fraction() {
        let image = rand_image(4, 224);
        assert_eq!(apply_tamper(&image, 0.0, 5), image);
        let out = apply_tamper(&image, 0.05, 5);
        let black = out
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .zip(out.index_axis(ndarray::Axis(0), 1))
            .zip(out.index_axis(ndarray::Axis(0), 2))
            .filter(|((r, g), b)| **r == 0.0 && **g == 0.0 && **b == 0.0)
            .count();
        let frac = black as f64 / (224.0 * 224.0);
        assert!((0.05..=0.06).contains(&frac), "covered {frac}");
    }

    #[test]
    fn spec_display_is_keyed_lines() {
        let spec = sample_spec(&DistortionConfig::default(), 1);
        let text = format!("{spec}");
        assert!(text.contains("noise_sigma:"));
        assert!(text.contains("jpeg_quality:"));
    }
}
